//! Linear time-invariant SDE priors `dx = A x dt + B dw`, their exact
//! discretization, and the Lyapunov vector field used by the DLRA module.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, seeded_rng, symmetrize};
use crate::operator::{CostClass, DenseOperator, Op};

/// Largest state dimension for which dense `n × n` oracles are built.
pub const DEFAULT_DENSE_CAP: usize = 2048;

/// Dimension up to which a caller-supplied transition is checked against a
/// matrix-free exponential on random probes.
pub const TRANSITION_CHECK_MAX_DIM: usize = 512;

const TRANSITION_CHECK_TOL: f64 = 1e-8;

/// Closed-form `dt ↦ exp(A dt)` action supplied by a problem definition.
pub type TransitionFn = Arc<dyn Fn(f64) -> Result<Op> + Send + Sync>;

/// Closed-form `dt ↦ Q(dt)` (dense) supplied by a problem definition.
pub type NoiseFn = Arc<dyn Fn(f64) -> Result<DMatrix<f64>> + Send + Sync>;

#[derive(Clone)]
pub struct LtiSdeModel {
    drift: Op,
    diffusion_gram: Op,
    wiener_dim: usize,
    transition: Option<TransitionFn>,
    exact_noise: Option<NoiseFn>,
}

impl fmt::Debug for LtiSdeModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LtiSdeModel")
            .field("n", &self.n())
            .field("wiener_dim", &self.wiener_dim)
            .field("drift", &self.drift)
            .field("structured_transition", &self.transition.is_some())
            .field("structured_noise", &self.exact_noise.is_some())
            .finish()
    }
}

impl LtiSdeModel {
    /// Validates shapes, and symmetry and PSD-ness of `B Bᵀ` on random probes.
    pub fn new(drift: Op, diffusion_gram: Op, wiener_dim: usize) -> Result<Self> {
        let n = drift.in_dim();
        for (name, op) in [("drift", &drift), ("diffusion Gram", &diffusion_gram)] {
            if op.in_dim() != n || op.out_dim() != n {
                return Err(Error::Dimension {
                    context: format!("{name} operator"),
                    expected: n,
                    got: op.out_dim(),
                });
            }
        }
        let mut rng = seeded_rng(0x5de, 0);
        let x = gaussian_matrix(&mut rng, n, 3);
        let gx = diffusion_gram.apply_mat(&x);
        let gtx = diffusion_gram.apply_adjoint_mat(&x);
        let scale = gx.norm().max(f64::MIN_POSITIVE);
        if (&gx - &gtx).norm() > 1e-10 * scale {
            return Err(Error::InvalidArgument("diffusion Gram is not symmetric".into()));
        }
        for j in 0..3 {
            let quad = x.column(j).dot(&gx.column(j));
            if quad < -1e-10 * x.column(j).norm() * gx.column(j).norm() {
                return Err(Error::InvalidArgument("diffusion Gram is not PSD".into()));
            }
        }
        Ok(Self {
            drift,
            diffusion_gram,
            wiener_dim,
            transition: None,
            exact_noise: None,
        })
    }

    /// Attach a closed-form transition; it is validated on use.
    pub fn with_transition(mut self, f: TransitionFn) -> Self {
        self.transition = Some(f);
        self
    }

    /// Attach a closed-form exact process noise for dense reference filters.
    pub fn with_exact_noise(mut self, f: NoiseFn) -> Self {
        self.exact_noise = Some(f);
        self
    }

    pub fn n(&self) -> usize {
        self.drift.in_dim()
    }

    pub fn wiener_dim(&self) -> usize {
        self.wiener_dim
    }

    pub fn drift(&self) -> &Op {
        &self.drift
    }

    pub fn diffusion_gram(&self) -> &Op {
        &self.diffusion_gram
    }
}

/// The transition `Φ = exp(A dt)` as an operator.
///
/// A closed-form transition attached to the model is used when present (and
/// checked against a matrix-free exponential for `n ≤ 512`); otherwise the
/// dense exponential is materialized.
pub fn discretize_transition(model: &LtiSdeModel, dt: f64) -> Result<Op> {
    discretize_transition_capped(model, dt, DEFAULT_DENSE_CAP)
}

pub fn discretize_transition_capped(model: &LtiSdeModel, dt: f64, cap: usize) -> Result<Op> {
    discretize_transition_checked(model, dt, cap, true)
}

/// As [`discretize_transition_capped`]; `verify = false` skips the check of
/// a closed-form transition, for callers that already verified it once.
pub fn discretize_transition_checked(model: &LtiSdeModel, dt: f64, cap: usize, verify: bool) -> Result<Op> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
    }
    let n = model.n();
    if let Some(f) = &model.transition {
        let phi = f(dt)?;
        if phi.in_dim() != n || phi.out_dim() != n {
            return Err(Error::Dimension {
                context: "structured transition".into(),
                expected: n,
                got: phi.out_dim(),
            });
        }
        if verify && n <= TRANSITION_CHECK_MAX_DIM {
            let mut rng = seeded_rng(0x7a5, 1);
            let x = gaussian_matrix(&mut rng, n, 3);
            let reference = expm_action(|v| model.drift.apply_mat(v), dt, &x);
            let err = (phi.apply_mat(&x) - &reference).norm() / reference.norm().max(f64::MIN_POSITIVE);
            if err > TRANSITION_CHECK_TOL {
                return Err(Error::TransitionMismatch(err));
            }
        }
        return Ok(phi);
    }
    if n > cap {
        return Err(Error::DenseCapExceeded { n, cap });
    }
    let a = model.drift.to_dense() * dt;
    Ok(DenseOperator::arc(a.exp()))
}

/// `exp(t · L) X` for a linear map `L` given by its block action.
///
/// Scaled Taylor series: the interval is split so each substep has
/// `‖t L‖ / s ≤ 1/4` by a power-iteration norm estimate, and each substep
/// sums terms until they stop contributing.
pub fn expm_action<F>(apply: F, t: f64, x: &DMatrix<f64>) -> DMatrix<f64>
where
    F: Fn(&DMatrix<f64>) -> DMatrix<f64>,
{
    if x.ncols() == 0 || t == 0.0 {
        return x.clone();
    }
    let norm = estimate_norm(&apply, x.nrows());
    let steps = ((t.abs() * norm) / 0.25).ceil().max(1.0) as usize;
    let h = t / steps as f64;
    let mut out = x.clone();
    for _ in 0..steps {
        let mut term = out.clone();
        let mut sum = out.clone();
        for k in 1..=60 {
            term = apply(&term) * (h / k as f64);
            sum += &term;
            if term.norm() <= f64::EPSILON * 0.5 * sum.norm() {
                break;
            }
        }
        out = sum;
    }
    out
}

fn estimate_norm<F>(apply: &F, dim: usize) -> f64
where
    F: Fn(&DMatrix<f64>) -> DMatrix<f64>,
{
    let mut rng = seeded_rng(0xe57, 2);
    let mut v = gaussian_matrix(&mut rng, dim, 2);
    let mut est: f64 = 0.0;
    for _ in 0..8 {
        let nv = v.norm();
        if nv == 0.0 {
            break;
        }
        v /= nv;
        let w = apply(&v);
        est = est.max(w.norm());
        v = w;
    }
    2.0 * est
}

/// Dense `Q(dt)` solving `Q' = A Q + Q Aᵀ + B Bᵀ`, `Q(0) = 0`.
///
/// Uses the matrix-fraction decomposition of `[[A, BBᵀ], [0, −Aᵀ]]`, or the
/// eigenbasis of `A` when `A` is symmetric.
pub fn exact_process_noise(model: &LtiSdeModel, dt: f64, cap: usize) -> Result<DMatrix<f64>> {
    let n = model.n();
    if n > cap {
        return Err(Error::DenseCapExceeded { n, cap });
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
    }
    let a = model.drift.to_dense();
    let g = model.diffusion_gram.to_dense();
    Ok(dense_lyapunov_solution(&a, &g, &DMatrix::zeros(n, n), dt))
}

/// Dense exact process noise, preferring a closed form attached to the model.
pub fn process_noise_dense(model: &LtiSdeModel, dt: f64, cap: usize) -> Result<DMatrix<f64>> {
    if let Some(f) = &model.exact_noise {
        let n = model.n();
        if n > cap {
            return Err(Error::DenseCapExceeded { n, cap });
        }
        return Ok(symmetrize(&f(dt)?));
    }
    exact_process_noise(model, dt, cap)
}

/// Solution at time `t` of `Y' = A Y + Y Aᵀ + G`, `Y(0) = y0`, for dense
/// (small) matrices.
///
/// General `A`: exponentiate `M = [[A, G], [0, −Aᵀ]] t` to get the blocks
/// `F11 = exp(A t)` and `F12`; then `Y(t) = F11 y0 F11ᵀ + F12 F11ᵀ`.
/// Symmetric `A = V Λ Vᵀ`: entrywise in the eigenbasis,
/// `Ỹ_ij(t) = e^{(λ_i+λ_j)t} Ỹ_ij(0) + G̃_ij (e^{(λ_i+λ_j)t} − 1)/(λ_i+λ_j)`.
pub fn dense_lyapunov_solution(
    a: &DMatrix<f64>,
    g: &DMatrix<f64>,
    y0: &DMatrix<f64>,
    t: f64,
) -> DMatrix<f64> {
    let n = a.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let asym = (a - a.transpose()).norm();
    if asym <= 1e-14 * a.norm() {
        let eig = symmetrize(a).symmetric_eigen();
        let v = &eig.eigenvectors;
        let lam = &eig.eigenvalues;
        let gt = v.transpose() * g * v;
        let yt = v.transpose() * y0 * v;
        let mut out = DMatrix::zeros(n, n);
        for j in 0..n {
            for i in 0..n {
                let s = lam[i] + lam[j];
                let growth = (s * t).exp();
                let integral = if s == 0.0 { t } else { (s * t).exp_m1() / s };
                out[(i, j)] = growth * yt[(i, j)] + gt[(i, j)] * integral;
            }
        }
        return symmetrize(&(v * out * v.transpose()));
    }

    let mut block = DMatrix::zeros(2 * n, 2 * n);
    block.view_mut((0, 0), (n, n)).copy_from(&(a * t));
    block.view_mut((0, n), (n, n)).copy_from(&(g * t));
    block.view_mut((n, n), (n, n)).copy_from(&(-a.transpose() * t));
    let f = block.exp();
    let f11 = f.view((0, 0), (n, n)).into_owned();
    let f12 = f.view((0, n), (n, n)).into_owned();
    let out = &f11 * y0 * f11.transpose() + f12 * f11.transpose();
    symmetrize(&out)
}

/// The two factored evaluations of `F(Y) = A Y + Y Aᵀ + B Bᵀ` used by the
/// BUG integrator.
#[derive(Debug, Clone, Copy)]
pub enum LyapunovForm<'a> {
    /// `F(K U₀ᵀ) U₀ = A K + K (U₀ᵀ Aᵀ U₀) + B Bᵀ U₀`.
    KStep { k: &'a DMatrix<f64>, u0: &'a DMatrix<f64> },
    /// `Uₕᵀ F(Uₕ D Uₕᵀ) Uₕ = Ã D + D Ãᵀ + Uₕᵀ B Bᵀ Uₕ` with `Ã = Uₕᵀ A Uₕ`.
    SStep { d: &'a DMatrix<f64>, uh: &'a DMatrix<f64> },
}

pub fn lyapunov_rhs_apply(model: &LtiSdeModel, form: LyapunovForm<'_>) -> DMatrix<f64> {
    match form {
        LyapunovForm::KStep { k, u0 } => {
            let au0 = model.drift.apply_mat(u0);
            let projected_t = au0.transpose() * u0; // U₀ᵀ Aᵀ U₀
            let mut out = model.drift.apply_mat(k);
            out.gemm(1.0, k, &projected_t, 1.0);
            out += model.diffusion_gram.apply_mat(u0);
            out
        }
        LyapunovForm::SStep { d, uh } => {
            let (a_d, g_d) = projected_coefficients(model, uh);
            &a_d * d + d * a_d.transpose() + g_d
        }
    }
}

/// `(Uᵀ A U, Uᵀ B Bᵀ U)` for an orthonormal basis `U`.
pub fn projected_coefficients(model: &LtiSdeModel, u: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let a_d = u.transpose() * model.drift.apply_mat(u);
    let g_d = symmetrize(&(u.transpose() * model.diffusion_gram.apply_mat(u)));
    (a_d, g_d)
}

/// Whether the model's transition comes from a closed form (linear cost)
/// or a dense exponential.
pub fn transition_cost_class(model: &LtiSdeModel) -> CostClass {
    if model.transition.is_some() {
        model.drift.cost_class()
    } else {
        CostClass::Quadratic
    }
}
