//! The rank-reduced Kalman filter: square-root prediction with rank
//! truncation, exact low-rank corrections, and the marginal likelihood.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::dlra::{process_noise_factor, DlraConfig};
use crate::error::{check_finite, Error, Result};
use crate::linalg::{derive_seed, hstack, scale_columns, truncated_svd, LowRankFactor, SvdTriple, PINV_RELATIVE_CUTOFF};
use crate::operator::{LinearOperator, Op};
use crate::sde::{discretize_transition_checked, LtiSdeModel, DEFAULT_DENSE_CAP};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Gain singular values above `1 + GAIN_TOLERANCE` in the wide-rank branch
/// indicate inconsistent inputs.
pub const GAIN_TOLERANCE: f64 = 1e-8;

/// Gaussian with mean and low-rank covariance square root.
#[derive(Debug, Clone)]
pub struct SqrtGaussian {
    pub mean: DVector<f64>,
    pub factor: LowRankFactor,
}

impl SqrtGaussian {
    pub fn new(mean: DVector<f64>, factor: LowRankFactor) -> Result<Self> {
        if mean.len() != factor.n() {
            return Err(Error::Dimension {
                context: "mean length vs covariance factor rows".into(),
                expected: factor.n(),
                got: mean.len(),
            });
        }
        check_finite(mean.iter(), "Gaussian mean")?;
        Ok(Self { mean, factor })
    }

    pub fn n(&self) -> usize {
        self.mean.len()
    }

    pub fn rank(&self) -> usize {
        self.factor.rank()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        self.factor.outer()
    }

    /// Append zero columns so the factor has exactly `rank` columns.
    pub fn padded(mut self, rank: usize) -> Result<Self> {
        let r = self.rank();
        if r > rank {
            return Err(Error::RankTooLarge { rank: r, max: rank });
        }
        if r < rank {
            let m = self.factor.into_matrix().resize_horizontally(rank, 0.0);
            self.factor = LowRankFactor::new(m)?;
        }
        Ok(self)
    }
}

/// Measurement noise square root `R^{1/2}`.
#[derive(Debug, Clone)]
pub enum NoiseModel {
    /// Independent noise with these standard deviations.
    Diagonal(DVector<f64>),
    /// Lower-triangular Cholesky factor of `R`.
    Dense(DMatrix<f64>),
}

/// `y = C x + v`, `v ~ N(0, R)`.
#[derive(Debug, Clone)]
pub struct ObservationModel {
    c: Op,
    noise: NoiseModel,
}

impl ObservationModel {
    pub fn new(c: Op, noise: NoiseModel) -> Result<Self> {
        let m = c.out_dim();
        match &noise {
            NoiseModel::Diagonal(s) => {
                if s.len() != m {
                    return Err(Error::Dimension { context: "noise std vector".into(), expected: m, got: s.len() });
                }
                if s.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                    return Err(Error::InvalidArgument("noise standard deviations must be positive".into()));
                }
            }
            NoiseModel::Dense(l) => {
                if l.shape() != (m, m) {
                    return Err(Error::Dimension { context: "noise square root".into(), expected: m, got: l.nrows() });
                }
                if (0..m).any(|j| (0..j).any(|i| l[(i, j)] != 0.0)) {
                    return Err(Error::InvalidArgument("dense noise square root must be lower triangular".into()));
                }
                if l.diagonal().iter().any(|&v| !(v > 0.0)) {
                    return Err(Error::InvalidArgument("noise Cholesky factor needs a positive diagonal".into()));
                }
            }
        }
        Ok(Self { c, noise })
    }

    /// Independent noise with a common standard deviation.
    pub fn isotropic(c: Op, std: f64) -> Result<Self> {
        let m = c.out_dim();
        Self::new(c, NoiseModel::Diagonal(DVector::from_element(m, std)))
    }

    /// Dense noise given its covariance.
    pub fn from_covariance(c: Op, r: &DMatrix<f64>) -> Result<Self> {
        let chol = r
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidArgument("measurement covariance is not positive definite".into()))?;
        Self::new(c, NoiseModel::Dense(chol.l()))
    }

    pub fn m(&self) -> usize {
        self.c.out_dim()
    }

    pub fn n(&self) -> usize {
        self.c.in_dim()
    }

    pub fn c(&self) -> &Op {
        &self.c
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    /// `R^{-1/2} X`.
    pub fn whiten(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.noise {
            NoiseModel::Diagonal(s) => {
                let mut out = x.clone();
                for (mut row, &si) in out.row_iter_mut().zip(s.iter()) {
                    row /= si;
                }
                out
            }
            NoiseModel::Dense(l) => l.solve_lower_triangular(x).expect("positive diagonal"),
        }
    }

    pub fn whiten_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let m = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        DVector::from_column_slice(self.whiten(&m).as_slice())
    }

    /// `R^{1/2} X`.
    pub fn unwhiten(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.noise {
            NoiseModel::Diagonal(s) => {
                let mut out = x.clone();
                for (mut row, &si) in out.row_iter_mut().zip(s.iter()) {
                    row *= si;
                }
                out
            }
            NoiseModel::Dense(l) => l * x,
        }
    }

    /// `log |R^{1/2}|` in `O(m)`.
    pub fn log_det_r_sqrt(&self) -> f64 {
        match &self.noise {
            NoiseModel::Diagonal(s) => s.iter().map(|v| v.ln()).sum(),
            NoiseModel::Dense(l) => l.diagonal().iter().map(|v| v.ln()).sum(),
        }
    }

    pub fn noise_sqrt_dense(&self) -> DMatrix<f64> {
        match &self.noise {
            NoiseModel::Diagonal(s) => DMatrix::from_diagonal(s),
            NoiseModel::Dense(l) => l.clone(),
        }
    }

    pub fn noise_cov_dense(&self) -> DMatrix<f64> {
        let l = self.noise_sqrt_dense();
        &l * l.transpose()
    }
}

/// One entry of the measurement sequence. `y = None` is a missing
/// measurement: the step predicts but does not correct.
#[derive(Debug, Clone)]
pub struct ObservationStep {
    pub time: f64,
    pub model: Arc<ObservationModel>,
    pub y: Option<DVector<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    /// `r ≤ m`: SVD of the whitened projected factor.
    LowRank,
    /// `m ≤ r`: SVD of the innovation square root.
    WideRank,
}

/// Quantities of a correction exposed for diagnostics and tests.
#[derive(Debug, Clone)]
pub struct CorrectionInternals {
    pub branch: Branch,
    /// Low-rank branch: `U`, `D`, `V` of `(R^{-1/2} C Π^{1/2})ᵀ`.
    /// Wide branch: `U^k`, `D^k` of the reduced gain and `U^s`.
    pub u: DMatrix<f64>,
    pub d: DVector<f64>,
    pub v: DMatrix<f64>,
    pub whitened_residual: DVector<f64>,
    /// Negative `1 − (D^k)²` mass clamped to zero (wide branch).
    pub clamped_mass: f64,
}

/// A corrected Gaussian with its log-likelihood increment.
#[derive(Debug, Clone)]
pub struct Correction {
    pub posterior: SqrtGaussian,
    pub loglik: f64,
    pub internals: CorrectionInternals,
}

fn check_obs(pred: &SqrtGaussian, obs: &ObservationModel, y: &DVector<f64>) -> Result<()> {
    if obs.n() != pred.n() {
        return Err(Error::Dimension { context: "observation operator input".into(), expected: pred.n(), got: obs.n() });
    }
    if y.len() != obs.m() {
        return Err(Error::Dimension { context: "measurement vector".into(), expected: obs.m(), got: y.len() });
    }
    check_finite(y.iter(), "measurement")
}

/// Correction for `r ≤ m`.
///
/// With `W = R^{-1/2} C Π^{1/2}`, `Wᵀ = U D Vᵀ` and `e = R^{-1/2}(y − C μ⁻)`:
/// `μ = μ⁻ + Π^{1/2} U (I + D²)^{-1} D Vᵀ e` and `Σ^{1/2} = Π^{1/2} U (I + D²)^{-1/2}`.
pub fn correct_low_rank(pred: &SqrtGaussian, obs: &ObservationModel, y: &DVector<f64>) -> Result<Correction> {
    check_obs(pred, obs, y)?;
    let (m, r) = (obs.m(), pred.rank());
    if r > m {
        return Err(Error::BranchPrecondition(format!(
            "low-rank correction needs r ≤ m (r = {r}, m = {m}); use the wide-rank branch"
        )));
    }
    let pi = pred.factor.matrix();
    let w = obs.whiten(&obs.c().apply_mat(pi));
    let e = obs.whiten_vec(&(y - obs.c().apply(&pred.mean)));
    let SvdTriple { u, d, v } = truncated_svd(&w.transpose(), r)?;

    let vte = v.tr_mul(&e);
    let coef = DVector::from_fn(r, |k, _| d[k] / (1.0 + d[k] * d[k]) * vte[k]);
    let mean = &pred.mean + pi * (&u * coef);

    let mut core = u.clone();
    scale_columns(&mut core, &d.map(|dk| 1.0 / (1.0 + dk * dk).sqrt()));
    let factor = LowRankFactor::new(pi * core)?;

    let mut loglik = -0.5 * m as f64 * LN_2PI - obs.log_det_r_sqrt() - 0.5 * e.norm_squared();
    for k in 0..r {
        let d2 = d[k] * d[k];
        loglik += -0.5 * d2.ln_1p() + 0.5 * d2 / (1.0 + d2) * vte[k] * vte[k];
    }
    check_finite(std::iter::once(&loglik), "log-likelihood increment")?;

    Ok(Correction {
        posterior: SqrtGaussian::new(mean, factor)?,
        loglik,
        internals: CorrectionInternals {
            branch: Branch::LowRank,
            u,
            d,
            v,
            whitened_residual: e,
            clamped_mass: 0.0,
        },
    })
}

/// Correction for `m ≤ r`.
///
/// `[C Π^{1/2} | R^{1/2}] = U^s D^s (·)ᵀ` factors the innovation covariance,
/// `K̃ = (C Π^{1/2})ᵀ U^s (D^s)^{-1}`, the mean moves by
/// `Π^{1/2} K̃ (D^s)^{-1} U^sᵀ (y − C μ⁻)`, and with `K̃ = U^k D^k (·)ᵀ` the
/// factor is `Π^{1/2} U^k (I − (D^k)²)^{1/2}`.
pub fn correct_wide_rank(pred: &SqrtGaussian, obs: &ObservationModel, y: &DVector<f64>) -> Result<Correction> {
    check_obs(pred, obs, y)?;
    let (m, r) = (obs.m(), pred.rank());
    if m > r {
        return Err(Error::BranchPrecondition(format!(
            "wide-rank correction needs m ≤ r (r = {r}, m = {m}); use the low-rank branch"
        )));
    }
    let pi = pred.factor.matrix();
    let cp = obs.c().apply_mat(pi);
    let block = hstack(&cp, &obs.noise_sqrt_dense());
    let s = truncated_svd(&block, m)?;
    if s.d[m - 1] <= 0.0 {
        return Err(Error::InvalidArgument("innovation covariance is singular".into()));
    }
    let inv_ds = s.d.map(|v| 1.0 / v);

    let mut us_scaled = s.u.clone();
    scale_columns(&mut us_scaled, &inv_ds);
    let ktilde = cp.transpose() * &us_scaled; // r × m

    let residual = y - obs.c().apply(&pred.mean);
    let z = s.u.tr_mul(&residual).component_mul(&inv_ds);
    let mean = &pred.mean + pi * (&ktilde * &z);

    let padded = ktilde.clone().resize_horizontally(r, 0.0);
    let k = truncated_svd(&padded, r)?;
    let mut clamped = 0.0;
    let mut shrink = DVector::zeros(r);
    for i in 0..r {
        let dk = k.d[i];
        if dk > 1.0 + GAIN_TOLERANCE {
            return Err(Error::InconsistentGain(dk));
        }
        let rest = 1.0 - dk * dk;
        if rest < 0.0 {
            clamped += -rest;
            shrink[i] = 0.0;
        } else {
            shrink[i] = rest.sqrt();
        }
    }
    let mut core = k.u.clone();
    scale_columns(&mut core, &shrink);
    let factor = LowRankFactor::new(pi * core)?;

    let loglik = -0.5 * m as f64 * LN_2PI - s.d.iter().map(|v| v.ln()).sum::<f64>() - 0.5 * z.norm_squared();
    check_finite(std::iter::once(&loglik), "log-likelihood increment")?;

    Ok(Correction {
        posterior: SqrtGaussian::new(mean, factor)?,
        loglik,
        internals: CorrectionInternals {
            branch: Branch::WideRank,
            u: k.u,
            d: k.d,
            v: s.u,
            whitened_residual: obs.whiten_vec(&residual),
            clamped_mass: clamped,
        },
    })
}

/// Dispatch on `r ≤ m`.
pub fn correct(pred: &SqrtGaussian, obs: &ObservationModel, y: &DVector<f64>) -> Result<Correction> {
    if pred.rank() <= obs.m() {
        correct_low_rank(pred, obs, y)
    } else {
        correct_wide_rank(pred, obs, y)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PredictInfo {
    /// `Σ_{k>r} d_k² / Σ_k d_k²` of the prediction block.
    pub discarded_mass: f64,
}

/// Output of [`predict_with_svd`].
#[derive(Debug, Clone)]
pub struct Prediction {
    pub predicted: SqrtGaussian,
    pub info: PredictInfo,
    /// Truncated SVD of `[Φ Σ^{1/2} | Q^{1/2}]`; `Π^{1/2} = u · diag(d)`.
    pub svd: SvdTriple,
}

/// `μ⁻ = Φ μ`, `Π^{1/2}` = best rank-`rank` factor of `[Φ Σ^{1/2} | Q^{1/2}]`.
pub fn predict(
    prior: &SqrtGaussian,
    phi: &dyn LinearOperator,
    q_sqrt: Option<&LowRankFactor>,
    rank: usize,
) -> Result<(SqrtGaussian, PredictInfo)> {
    let p = predict_with_svd(prior, phi, q_sqrt, rank)?;
    Ok((p.predicted, p.info))
}

pub fn predict_with_svd(
    prior: &SqrtGaussian,
    phi: &dyn LinearOperator,
    q_sqrt: Option<&LowRankFactor>,
    rank: usize,
) -> Result<Prediction> {
    let n = prior.n();
    if phi.in_dim() != n || phi.out_dim() != n {
        return Err(Error::Dimension { context: "transition operator".into(), expected: n, got: phi.out_dim() });
    }
    let mean = phi.apply(&prior.mean);
    let propagated = phi.apply_mat(prior.factor.matrix());
    let block = match q_sqrt {
        Some(q) => {
            if q.n() != n {
                return Err(Error::Dimension { context: "process noise factor rows".into(), expected: n, got: q.n() });
            }
            hstack(&propagated, q.matrix())
        }
        None => propagated,
    };
    let max_rank = block.ncols().min(n);
    if rank > max_rank {
        return Err(Error::RankTooLarge { rank, max: max_rank });
    }
    let svd = truncated_svd(&block, rank)?;
    let total = block.norm_squared();
    let kept = svd.d.norm_squared();
    let discarded_mass = if total > 0.0 { ((total - kept) / total).max(0.0) } else { 0.0 };
    let predicted = SqrtGaussian::new(mean, LowRankFactor::new(svd.scaled_left())?)?;
    Ok(Prediction { predicted, info: PredictInfo { discarded_mass }, svd })
}

/// `Γᵀ = (Π^{1/2})⁺ Φ Σ^{1/2}` from the prediction SVD, with the relative
/// singular value cutoff. Returns `Γ` and whether the cutoff engaged.
fn gain_core(svd: &SvdTriple, propagated: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let d1 = svd.d.iter().cloned().fold(0.0, f64::max);
    let mut engaged = false;
    let inv = svd.d.map(|s| {
        if d1 > 0.0 && s > PINV_RELATIVE_CUTOFF * d1 {
            1.0 / s
        } else {
            engaged = true;
            0.0
        }
    });
    let mut gt = svd.u.transpose() * propagated;
    for (mut row, &s) in gt.row_iter_mut().zip(inv.iter()) {
        row *= s;
    }
    (gt.transpose(), engaged)
}

/// Per-step transition: `Φ` and an optional low-rank `Q^{1/2}`.
#[derive(Debug, Clone)]
pub struct StepTransition {
    pub phi: Op,
    pub q_sqrt: Option<LowRankFactor>,
    pub clamped_mass: f64,
    pub clamp_warning: bool,
    pub completed_columns: usize,
}

impl StepTransition {
    pub fn noiseless(phi: Op) -> Self {
        Self { phi, q_sqrt: None, clamped_mass: 0.0, clamp_warning: false, completed_columns: 0 }
    }
}

/// Supplies the transition between consecutive filter times. `step` is the
/// index of the filter step being predicted (`≥ 1`).
pub trait TransitionSource {
    fn transition(&mut self, step: usize, from: f64, to: f64) -> Result<StepTransition>;
}

/// Continuous-time prior discretized per step; `Q^{1/2}` from the BUG
/// integrator with basis reuse, `Φ` cached while `dt` does not change.
#[derive(Debug, Clone)]
pub struct ContinuousDynamics {
    model: Arc<LtiSdeModel>,
    rank: usize,
    config: DlraConfig,
    seed: u64,
    basis: Option<DMatrix<f64>>,
    phi_cache: Option<(f64, Op)>,
    /// A closed-form transition is checked against the exponential once.
    transition_verified: bool,
}

impl ContinuousDynamics {
    pub fn new(model: Arc<LtiSdeModel>, rank: usize, config: DlraConfig, seed: u64) -> Self {
        Self { model, rank, config, seed, basis: None, phi_cache: None, transition_verified: false }
    }

    pub fn model(&self) -> &Arc<LtiSdeModel> {
        &self.model
    }
}

fn same_dt(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs())
}

impl TransitionSource for ContinuousDynamics {
    fn transition(&mut self, step: usize, from: f64, to: f64) -> Result<StepTransition> {
        let dt = to - from;
        let phi = match &self.phi_cache {
            Some((cached, op)) if same_dt(*cached, dt) => op.clone(),
            _ => {
                let op = discretize_transition_checked(&self.model, dt, DEFAULT_DENSE_CAP, !self.transition_verified)?;
                self.transition_verified = true;
                self.phi_cache = Some((dt, op.clone()));
                op
            }
        };
        let basis = if self.config.reuse_basis { self.basis.as_ref() } else { None };
        let pn = process_noise_factor(&self.model, basis, self.rank, dt, &self.config, derive_seed(self.seed, step as u64))?;
        self.basis = Some(pn.basis);
        Ok(StepTransition {
            phi,
            q_sqrt: Some(pn.q_sqrt),
            clamped_mass: pn.clamped_mass,
            clamp_warning: pn.clamp_warning,
            completed_columns: pn.completed_columns,
        })
    }
}

/// The same `Φ` and `Q^{1/2}` at every step.
#[derive(Debug, Clone)]
pub struct DiscreteDynamics {
    pub phi: Op,
    pub q_sqrt: Option<LowRankFactor>,
}

impl TransitionSource for DiscreteDynamics {
    fn transition(&mut self, _step: usize, _from: f64, _to: f64) -> Result<StepTransition> {
        Ok(StepTransition {
            phi: self.phi.clone(),
            q_sqrt: self.q_sqrt.clone(),
            clamped_mass: 0.0,
            clamp_warning: false,
            completed_columns: 0,
        })
    }
}

/// Replays precomputed transitions; entry `step − 1` serves step `step`.
/// Lets several filters share one DLRA schedule.
#[derive(Debug, Clone)]
pub struct ScheduledDynamics {
    pub schedule: Arc<Vec<StepTransition>>,
}

impl TransitionSource for ScheduledDynamics {
    fn transition(&mut self, step: usize, _from: f64, _to: f64) -> Result<StepTransition> {
        self.schedule
            .get(step.wrapping_sub(1))
            .cloned()
            .ok_or_else(|| Error::InvalidArgument(format!("no scheduled transition for step {step}")))
    }
}

/// Precompute the transitions for a sequence of times.
pub fn record_schedule(source: &mut dyn TransitionSource, times: &[f64]) -> Result<Vec<StepTransition>> {
    check_times(times)?;
    (1..times.len()).map(|l| source.transition(l, times[l - 1], times[l])).collect()
}

fn check_times(times: &[f64]) -> Result<()> {
    for (i, w) in times.windows(2).enumerate() {
        if !(w[1] > w[0]) {
            return Err(Error::NonMonotoneTimes { index: i + 1, time: w[1], previous: w[0] });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct StepDiagnostics {
    /// `None` when the measurement was missing.
    pub branch: Option<Branch>,
    pub discarded_mass: f64,
    pub pinv_cutoff_engaged: bool,
    pub noise_clamped_mass: f64,
    pub noise_clamp_warning: bool,
    pub completed_columns: usize,
    pub gain_clamped_mass: f64,
    pub whitened_residual: Option<DVector<f64>>,
}

#[derive(Debug, Clone)]
pub struct FilterStepRecord {
    pub time: f64,
    pub predicted: SqrtGaussian,
    pub corrected: SqrtGaussian,
    /// `Γ` with `G = Σ_{prev}^{1/2} Γ (Π^{1/2})⁺`, linking the previous
    /// corrected moments to this step's prediction. `None` at the first step.
    pub gain_core: Option<DMatrix<f64>>,
    pub q_factor: Option<LowRankFactor>,
    pub phi: Option<Op>,
    pub loglik_increment: f64,
    pub diagnostics: StepDiagnostics,
}

#[derive(Debug, Clone)]
pub struct FilterTrace {
    pub init: SqrtGaussian,
    pub records: Vec<FilterStepRecord>,
    pub total_loglik: f64,
    pub times: Vec<f64>,
}

/// Incremental filter, one measurement time per call.
#[derive(Debug, Clone)]
pub struct RrkfStepper {
    rank: usize,
    init: SqrtGaussian,
    current: Option<(f64, SqrtGaussian)>,
    steps: usize,
    total_loglik: f64,
}

impl RrkfStepper {
    /// `init` is the prior at the first measurement time; factors narrower
    /// than `rank` are padded with zero columns.
    pub fn new(init: SqrtGaussian, rank: usize) -> Result<Self> {
        if rank == 0 || rank > init.n() {
            return Err(Error::RankTooLarge { rank, max: init.n() });
        }
        let init = init.padded(rank)?;
        Ok(Self { rank, init, current: None, steps: 0, total_loglik: 0.0 })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn total_loglik(&self) -> f64 {
        self.total_loglik
    }

    pub fn init(&self) -> &SqrtGaussian {
        &self.init
    }

    /// Latest corrected moments, or the initial prior before the first step.
    pub fn current(&self) -> &SqrtGaussian {
        self.current.as_ref().map(|(_, g)| g).unwrap_or(&self.init)
    }

    pub fn step(&mut self, dynamics: &mut dyn TransitionSource, obs: &ObservationStep) -> Result<FilterStepRecord> {
        let mut diagnostics = StepDiagnostics::default();
        let (predicted, gain_core, q_factor, phi) = match &self.current {
            None => (self.init.clone(), None, None, None),
            Some((t_prev, prev)) => {
                if !(obs.time > *t_prev) {
                    return Err(Error::NonMonotoneTimes { index: self.steps, time: obs.time, previous: *t_prev });
                }
                let tr = dynamics.transition(self.steps, *t_prev, obs.time)?;
                let propagated = tr.phi.apply_mat(prev.factor.matrix());
                let p = predict_with_svd(prev, tr.phi.as_ref(), tr.q_sqrt.as_ref(), self.rank)?;
                let (gamma, engaged) = gain_core(&p.svd, &propagated);
                diagnostics.discarded_mass = p.info.discarded_mass;
                diagnostics.pinv_cutoff_engaged = engaged;
                diagnostics.noise_clamped_mass = tr.clamped_mass;
                diagnostics.noise_clamp_warning = tr.clamp_warning;
                diagnostics.completed_columns = tr.completed_columns;
                (p.predicted, Some(gamma), tr.q_sqrt, Some(tr.phi))
            }
        };

        let (corrected, loglik) = match &obs.y {
            Some(y) => {
                let c = correct(&predicted, &obs.model, y)?;
                diagnostics.branch = Some(c.internals.branch);
                diagnostics.gain_clamped_mass = c.internals.clamped_mass;
                diagnostics.whitened_residual = Some(c.internals.whitened_residual);
                (c.posterior, c.loglik)
            }
            None => (predicted.clone(), 0.0),
        };

        self.total_loglik += loglik;
        self.steps += 1;
        self.current = Some((obs.time, corrected.clone()));
        Ok(FilterStepRecord {
            time: obs.time,
            predicted,
            corrected,
            gain_core,
            q_factor,
            phi,
            loglik_increment: loglik,
            diagnostics,
        })
    }
}

/// Run the filter over a whole measurement sequence. `init` is the prior at
/// the first measurement time.
pub fn filter_pass(
    dynamics: &mut dyn TransitionSource,
    obs_seq: &[ObservationStep],
    init: SqrtGaussian,
    rank: usize,
) -> Result<FilterTrace> {
    let times: Vec<f64> = obs_seq.iter().map(|o| o.time).collect();
    check_times(&times)?;
    let mut stepper = RrkfStepper::new(init, rank)?;
    let mut records = Vec::with_capacity(obs_seq.len());
    for obs in obs_seq {
        records.push(stepper.step(dynamics, obs)?);
    }
    let total_loglik = records.iter().map(|r| r.loglik_increment).sum();
    Ok(FilterTrace { init: stepper.init, records, total_loglik, times })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{gaussian_matrix, gaussian_vector, seeded_rng};
    use crate::operator::{DenseOperator, ScaledIdentity};

    fn random(n: usize, k: usize, seed: u64) -> DMatrix<f64> {
        gaussian_matrix(&mut seeded_rng(seed, 0), n, k)
    }

    fn gaussian(n: usize, r: usize, seed: u64) -> SqrtGaussian {
        let mean = gaussian_vector(&mut seeded_rng(seed, 1), n);
        SqrtGaussian::new(mean, LowRankFactor::new(random(n, r, seed)).unwrap()).unwrap()
    }

    fn obs_model(m: usize, n: usize, seed: u64) -> ObservationModel {
        let noise = DVector::from_fn(m, |i, _| 0.3 + 0.1 * i as f64);
        ObservationModel::new(DenseOperator::arc(random(m, n, seed)), NoiseModel::Diagonal(noise)).unwrap()
    }

    /// Textbook update on the dense prior with Joseph-form covariance.
    fn dense_update(
        mean: &DVector<f64>,
        cov: &DMatrix<f64>,
        c: &DMatrix<f64>,
        r: &DMatrix<f64>,
        y: &DVector<f64>,
    ) -> (DVector<f64>, DMatrix<f64>, f64) {
        let s = c * cov * c.transpose() + r;
        let s_inv = s.clone().try_inverse().unwrap();
        let k = cov * c.transpose() * &s_inv;
        let resid = y - c * mean;
        let ikc = DMatrix::identity(mean.len(), mean.len()) - &k * c;
        let post = &ikc * cov * ikc.transpose() + &k * r * k.transpose();
        let m = y.len() as f64;
        let loglik = -0.5 * m * LN_2PI - 0.5 * s.determinant().ln() - 0.5 * resid.dot(&(&s_inv * &resid));
        (mean + k * resid, post, loglik)
    }

    fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm()
    }

    #[test]
    fn identity_prediction_keeps_covariance() {
        let prior = gaussian(7, 3, 1);
        let (pred, info) = predict(&prior, &ScaledIdentity::identity(7), None, 3).unwrap();
        assert!(rel(&pred.covariance(), &prior.covariance()) < 1e-12);
        assert!(info.discarded_mass < 1e-14);
    }

    #[test]
    fn full_rank_prediction_matches_dense() {
        let prior = gaussian(8, 8, 2);
        let phi = random(8, 8, 3);
        let q = LowRankFactor::new(random(8, 8, 4)).unwrap();
        let (pred, _) = predict(&prior, &DenseOperator(phi.clone()), Some(&q), 8).unwrap();
        let dense = &phi * prior.covariance() * phi.transpose() + q.outer();
        assert!(rel(&pred.covariance(), &dense) < 1e-10);
        assert!((pred.mean - &phi * &prior.mean).norm() < 1e-12);
    }

    #[test]
    fn exact_rank_prediction_discards_nothing() {
        let basis = random(10, 5, 5);
        let prior = SqrtGaussian::new(DVector::zeros(10), LowRankFactor::new(&basis * random(5, 5, 6)).unwrap()).unwrap();
        let q = LowRankFactor::new(&basis * random(5, 5, 7)).unwrap();
        let (_, info) = predict(&prior, &ScaledIdentity::identity(10), Some(&q), 5).unwrap();
        assert!(info.discarded_mass < 1e-12);
    }

    #[test]
    fn truncation_is_frobenius_optimal() {
        let prior = gaussian(12, 4, 8);
        let phi = random(12, 12, 9);
        let q = LowRankFactor::new(random(12, 4, 10)).unwrap();
        let (pred, _) = predict(&prior, &DenseOperator(phi.clone()), Some(&q), 4).unwrap();
        let full = &phi * prior.covariance() * phi.transpose() + q.outer();
        let eig = full.clone().symmetric_eigen();
        let mut vals: Vec<(f64, usize)> = eig.eigenvalues.iter().cloned().zip(0..).collect();
        vals.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let mut best = DMatrix::zeros(12, 12);
        for &(l, i) in vals.iter().take(4) {
            let v = eig.eigenvectors.column(i);
            best += v * v.transpose() * l;
        }
        assert!(rel(&pred.covariance(), &best) < 1e-10);
    }

    #[test]
    fn uninformative_measurement() {
        let pred = gaussian(6, 3, 11);
        let obs = ObservationModel::new(DenseOperator::arc(DMatrix::zeros(4, 6)), NoiseModel::Diagonal(DVector::from_element(4, 0.5))).unwrap();
        let y = DVector::from_vec(vec![0.3, -1.0, 0.2, 0.7]);
        let e = &y / 0.5;
        let expected = -2.0 * LN_2PI - 4.0 * 0.5f64.ln() - 0.5 * e.norm_squared();
        for c in [correct_low_rank(&pred, &obs, &y).unwrap(), correct_wide_rank(&gaussian(6, 5, 11), &obs, &y).unwrap()] {
            assert!((c.loglik - expected).abs() < 1e-12);
        }
        let c = correct_low_rank(&pred, &obs, &y).unwrap();
        assert!((&c.posterior.mean - &pred.mean).norm() < 1e-14);
        assert!(rel(&c.posterior.covariance(), &pred.covariance()) < 1e-12);
        let wide_pred = gaussian(6, 5, 11);
        let c = correct_wide_rank(&wide_pred, &obs, &y).unwrap();
        assert!(rel(&c.posterior.covariance(), &wide_pred.covariance()) < 1e-12);
    }

    #[test]
    fn low_rank_branch_matches_dense_update() {
        let pred = gaussian(10, 4, 12);
        let obs = obs_model(6, 10, 13);
        let y = gaussian_vector(&mut seeded_rng(14, 0), 6);
        let c = correct_low_rank(&pred, &obs, &y).unwrap();
        let (mean, cov, ll) = dense_update(&pred.mean, &pred.covariance(), &obs.c().to_dense(), &obs.noise_cov_dense(), &y);
        assert!((&c.posterior.mean - &mean).norm() < 1e-9 * mean.norm());
        assert!(rel(&c.posterior.covariance(), &cov) < 1e-9);
        assert!((c.loglik - ll).abs() < 1e-8);
        assert!(correct_low_rank(&gaussian(10, 7, 1), &obs, &y).is_err());
    }

    #[test]
    fn wide_branch_matches_dense_update() {
        let pred = gaussian(8, 5, 15);
        let obs = obs_model(2, 8, 16);
        let y = gaussian_vector(&mut seeded_rng(17, 0), 2);
        let c = correct_wide_rank(&pred, &obs, &y).unwrap();
        let (mean, cov, ll) = dense_update(&pred.mean, &pred.covariance(), &obs.c().to_dense(), &obs.noise_cov_dense(), &y);
        assert!((&c.posterior.mean - &mean).norm() < 1e-9 * mean.norm());
        assert!(rel(&c.posterior.covariance(), &cov) < 1e-9);
        assert!((c.loglik - ll).abs() < 1e-8);
        assert!(correct_wide_rank(&gaussian(8, 1, 1), &obs_model(2, 8, 1), &y).is_err());
    }

    #[test]
    fn branches_agree_at_the_boundary() {
        let pred = gaussian(9, 4, 18);
        let r = random(4, 4, 19);
        let obs = ObservationModel::from_covariance(DenseOperator::arc(random(4, 9, 20)), &(&r * r.transpose() + DMatrix::identity(4, 4))).unwrap();
        let y = gaussian_vector(&mut seeded_rng(21, 0), 4);
        let a = correct_low_rank(&pred, &obs, &y).unwrap();
        let b = correct_wide_rank(&pred, &obs, &y).unwrap();
        assert!((&a.posterior.mean - &b.posterior.mean).norm() < 1e-9 * a.posterior.mean.norm());
        assert!(rel(&a.posterior.covariance(), &b.posterior.covariance()) < 1e-9);
        assert!((a.loglik - b.loglik).abs() < 1e-9);
    }

    #[test]
    fn noise_model_round_trips() {
        let r = random(3, 3, 22);
        let obs = ObservationModel::from_covariance(DenseOperator::arc(random(3, 5, 23)), &(&r * r.transpose() + DMatrix::identity(3, 3))).unwrap();
        let x = random(3, 2, 24);
        assert!((obs.unwhiten(&obs.whiten(&x)) - &x).norm() < 1e-10 * x.norm());
        let diag = ObservationModel::new(DenseOperator::arc(random(2, 5, 1)), NoiseModel::Diagonal(DVector::from_vec(vec![2.0, 3.0]))).unwrap();
        assert!((diag.log_det_r_sqrt() - 6f64.ln()).abs() < 1e-15);
        assert!(ObservationModel::new(DenseOperator::arc(random(2, 5, 1)), NoiseModel::Diagonal(DVector::from_vec(vec![2.0, 0.0]))).is_err());
    }

    #[test]
    fn empty_sequence_returns_init_only() {
        let init = gaussian(5, 2, 25);
        let mut dyn_ = DiscreteDynamics { phi: Arc::new(ScaledIdentity::identity(5)), q_sqrt: None };
        let trace = filter_pass(&mut dyn_, &[], init.clone(), 2).unwrap();
        assert!(trace.records.is_empty());
        assert_eq!(trace.total_loglik, 0.0);
        assert_eq!(trace.init.mean, init.mean);
    }

    #[test]
    fn non_monotone_times_rejected() {
        let obs = Arc::new(obs_model(3, 5, 26));
        let steps: Vec<_> = [0.0, 1.0, 1.0]
            .iter()
            .map(|&t| ObservationStep { time: t, model: obs.clone(), y: None })
            .collect();
        let mut dyn_ = DiscreteDynamics { phi: Arc::new(ScaledIdentity::identity(5)), q_sqrt: None };
        assert!(matches!(filter_pass(&mut dyn_, &steps, gaussian(5, 2, 1), 2), Err(Error::NonMonotoneTimes { .. })));
    }

    #[test]
    fn missing_measurement_only_predicts() {
        let obs = Arc::new(obs_model(3, 5, 27));
        let y = gaussian_vector(&mut seeded_rng(28, 0), 3);
        let steps = vec![
            ObservationStep { time: 0.0, model: obs.clone(), y: Some(y.clone()) },
            ObservationStep { time: 1.0, model: obs.clone(), y: None },
        ];
        let phi = random(5, 5, 29) * 0.3;
        let mut dyn_ = DiscreteDynamics { phi: DenseOperator::arc(phi), q_sqrt: None };
        let trace = filter_pass(&mut dyn_, &steps, gaussian(5, 2, 30), 2).unwrap();
        let last = &trace.records[1];
        assert_eq!(last.loglik_increment, 0.0);
        assert!(last.diagnostics.branch.is_none());
        assert!((&last.corrected.mean - &last.predicted.mean).norm() == 0.0);
        assert!((trace.total_loglik - trace.records[0].loglik_increment).abs() < 1e-15);
    }

    #[test]
    fn gain_core_reproduces_dense_smoothing_gain() {
        let n = 6;
        let prev = gaussian(n, n, 31);
        let phi = random(n, n, 32) * 0.4;
        let q = LowRankFactor::new(random(n, n, 33) * 0.5).unwrap();
        let propagated = &phi * prev.factor.matrix();
        let p = predict_with_svd(&prev, &DenseOperator(phi.clone()), Some(&q), n).unwrap();
        let (gamma, engaged) = gain_core(&p.svd, &propagated);
        assert!(!engaged);
        let pi = p.predicted.covariance();
        let dense_gain = prev.covariance() * phi.transpose() * pi.clone().try_inverse().unwrap();
        let pinv = crate::linalg::TallPinv::new(p.predicted.factor.matrix()).unwrap();
        let low_rank_gain = prev.factor.matrix() * &gamma * pinv.apply(&DMatrix::identity(n, n));
        assert!(rel(&low_rank_gain, &dense_gain) < 1e-9);
    }
}
