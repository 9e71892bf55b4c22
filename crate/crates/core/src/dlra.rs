//! Rank-`r` BUG (basis update & Galerkin) integrator for the symmetric
//! Lyapunov equation `Q' = A Q + Q Aᵀ + B Bᵀ`, and the low-rank process
//! noise factor built from it.

use log::warn;
use nalgebra::DMatrix;

use crate::error::{check_finite, Error, Result};
use crate::linalg::{derive_seed, orthonormalize_with_fallback, psd_sqrt, random_orthonormal, symmetrize, LowRankFactor};
use crate::sde::{dense_lyapunov_solution, expm_action, projected_coefficients, LtiSdeModel};

/// Clamped negative eigenvalue mass of `D`, relative to its trace, above
/// which a warning is raised.
pub const CLAMP_WARNING_RATIO: f64 = 1e-6;

/// Integrator for the K-step ODE `K' = A K + K (U₀ᵀ Aᵀ U₀) + B Bᵀ U₀`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KStepSolver {
    /// Classical Runge–Kutta with `steps` equal steps per BUG step.
    Rk4 { steps: usize },
    /// Exact solution through the exponential of an augmented
    /// `(n + r)`-block operator, applied matrix-free.
    Exponential,
}

impl Default for KStepSolver {
    fn default() -> Self {
        KStepSolver::Rk4 { steps: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DlraConfig {
    /// BUG steps per filter step.
    pub substeps: usize,
    pub k_solver: KStepSolver,
    /// Start each filter step from the previous step's basis. When false a
    /// fresh random basis is drawn every time.
    pub reuse_basis: bool,
}

impl Default for DlraConfig {
    fn default() -> Self {
        Self {
            substeps: 1,
            k_solver: KStepSolver::default(),
            reuse_basis: true,
        }
    }
}

/// `Y = u · d · uᵀ` at time `t`.
#[derive(Debug, Clone)]
pub struct DlraState {
    pub u: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub t: f64,
}

impl DlraState {
    pub fn new(u: DMatrix<f64>, d: DMatrix<f64>, t: f64) -> Result<Self> {
        let r = u.ncols();
        if d.shape() != (r, r) {
            return Err(Error::Dimension {
                context: "DLRA core matrix".into(),
                expected: r,
                got: d.nrows(),
            });
        }
        let gram_err = (u.transpose() * &u - DMatrix::<f64>::identity(r, r)).norm();
        if gram_err > 1e-10 * r as f64 {
            return Err(Error::InvalidArgument(format!(
                "DLRA basis is not orthonormal (‖UᵀU − I‖ = {gram_err:.3e})"
            )));
        }
        Ok(Self { u, d: symmetrize(&d), t })
    }

    pub fn dense(&self) -> DMatrix<f64> {
        &self.u * &self.d * self.u.transpose()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BugStepInfo {
    /// Columns of `K(t+h)` that were numerically dependent and completed.
    pub completed_columns: usize,
}

/// `K(h)` for the K-step ODE started at `K(0) = U₀ D₀`.
pub fn k_step(
    model: &LtiSdeModel,
    u0: &DMatrix<f64>,
    d0: &DMatrix<f64>,
    h: f64,
    solver: KStepSolver,
) -> DMatrix<f64> {
    let drift = model.drift();
    let k0 = u0 * d0;
    // K' = A K + K P + C with constant P = U₀ᵀ Aᵀ U₀ and C = B Bᵀ U₀.
    let p = drift.apply_mat(u0).transpose() * u0;
    let c = model.diffusion_gram().apply_mat(u0);
    match solver {
        KStepSolver::Rk4 { steps } => {
            let steps = steps.max(1);
            let dt = h / steps as f64;
            let f = |k: &DMatrix<f64>| {
                let mut out = drift.apply_mat(k);
                out.gemm(1.0, k, &p, 1.0);
                out += &c;
                out
            };
            let mut k = k0;
            for _ in 0..steps {
                let s1 = f(&k);
                let s2 = f(&(&k + &s1 * (dt / 2.0)));
                let s3 = f(&(&k + &s2 * (dt / 2.0)));
                let s4 = f(&(&k + &s3 * dt));
                k += (s1 + s2 * 2.0 + s3 * 2.0 + s4) * (dt / 6.0);
            }
            k
        }
        KStepSolver::Exponential => {
            // With X₁' = A X₁ + C X₂ and X₂' = −P X₂, K = X₁ X₂⁻¹ solves the
            // K-step ODE; start from X₁ = K₀, X₂ = I.
            let (n, r) = u0.shape();
            let mut z = DMatrix::zeros(n + r, r);
            z.view_mut((0, 0), (n, r)).copy_from(&k0);
            z.view_mut((n, 0), (r, r)).fill_with_identity();
            let block = |x: &DMatrix<f64>| {
                let top = x.rows(0, n).into_owned();
                let bottom = x.rows(n, r).into_owned();
                let mut out = DMatrix::zeros(n + r, x.ncols());
                let mut t = drift.apply_mat(&top);
                t.gemm(1.0, &c, &bottom, 1.0);
                out.rows_mut(0, n).copy_from(&t);
                out.rows_mut(n, r).copy_from(&(-&p * bottom));
                out
            };
            let z = expm_action(block, h, &z);
            let top = z.rows(0, n).into_owned();
            let bottom = z.rows(n, r).into_owned();
            // K = top · bottom⁻¹, i.e. Kᵀ solves bottomᵀ Kᵀ = topᵀ.
            let lu = bottom.transpose().lu();
            lu.solve(&top.transpose())
                .expect("exp(−P h) is invertible")
                .transpose()
        }
    }
}

/// One BUG step of size `h`.
///
/// K-step, then orthonormalization (dependent columns are completed from
/// the old basis, then from `seed`), then the Galerkin S-step on the new
/// basis, which is itself a small Lyapunov equation solved exactly.
pub fn bug_step(
    state: &DlraState,
    model: &LtiSdeModel,
    h: f64,
    solver: KStepSolver,
    seed: u64,
) -> Result<(DlraState, BugStepInfo)> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("BUG step size must be positive, got {h}")));
    }
    let (n, r) = state.u.shape();
    if n != model.n() {
        return Err(Error::Dimension {
            context: "DLRA basis rows".into(),
            expected: model.n(),
            got: n,
        });
    }
    let k = k_step(model, &state.u, &state.d, h, solver);
    check_finite(k.iter(), &format!("K-step at t = {} (h = {h}, r = {r})", state.t))?;

    let ortho = orthonormalize_with_fallback(&k, Some(&state.u), seed)?;
    let uh = ortho.q;
    let m = uh.transpose() * &state.u;
    let d_start = &m * &state.d * m.transpose();
    let (a_d, g_d) = projected_coefficients(model, &uh);
    let d = dense_lyapunov_solution(&a_d, &g_d, &symmetrize(&d_start), h);
    check_finite(d.iter(), &format!("S-step at t = {} (h = {h}, r = {r})", state.t))?;

    Ok((
        DlraState { u: uh, d, t: state.t + h },
        BugStepInfo { completed_columns: ortho.completed_columns },
    ))
}

/// Low-rank process noise `Q^{1/2}` over one filter interval.
#[derive(Debug, Clone)]
pub struct ProcessNoise {
    pub q_sqrt: LowRankFactor,
    /// Final basis, to seed the next interval.
    pub basis: DMatrix<f64>,
    /// Magnitude of negative eigenvalues of `D` set to zero.
    pub clamped_mass: f64,
    pub clamp_warning: bool,
    /// Total completed basis columns over all substeps.
    pub completed_columns: usize,
}

/// Integrate `Q' = A Q + Q Aᵀ + B Bᵀ` from `Q = 0` over `dt` at rank `rank`
/// and return `Q^{1/2} = U D^{1/2}`.
pub fn process_noise_factor(
    model: &LtiSdeModel,
    basis_prev: Option<&DMatrix<f64>>,
    rank: usize,
    dt: f64,
    config: &DlraConfig,
    seed: u64,
) -> Result<ProcessNoise> {
    let n = model.n();
    if rank == 0 || rank > n {
        return Err(Error::RankTooLarge { rank, max: n });
    }
    let u0 = match basis_prev {
        Some(b) => {
            if b.shape() != (n, rank) {
                return Err(Error::Dimension {
                    context: "previous DLRA basis columns".into(),
                    expected: rank,
                    got: b.ncols(),
                });
            }
            b.clone()
        }
        None => random_orthonormal(n, rank, seed)?,
    };
    let substeps = config.substeps.max(1);
    let h = dt / substeps as f64;
    let mut state = DlraState { u: u0, d: DMatrix::zeros(rank, rank), t: 0.0 };
    let mut completed = 0;
    for i in 0..substeps {
        let (next, info) = bug_step(&state, model, h, config.k_solver, derive_seed(seed, i as u64 + 1))?;
        state = next;
        completed += info.completed_columns;
    }

    let (d_sqrt, clamped) = psd_sqrt(&state.d);
    let trace = state.d.trace().abs();
    let clamp_warning = clamped > CLAMP_WARNING_RATIO * trace && clamped > 0.0;
    if clamp_warning {
        warn!("process noise core had negative eigenvalue mass {clamped:.3e} (trace {trace:.3e}) clamped to zero");
    }
    let q_sqrt = LowRankFactor::new(&state.u * d_sqrt)?;
    Ok(ProcessNoise {
        q_sqrt,
        basis: state.u,
        clamped_mass: clamped,
        clamp_warning,
        completed_columns: completed,
    })
}
