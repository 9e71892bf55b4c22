//! Ensemble Kalman filters: the stochastic variant with perturbed
//! observations and the transform variant with a symmetric square root.
//!
//! Both work on the whitened projected anomalies `W = R^{-1/2} C A`
//! (`m × r`, `A` the scaled anomaly matrix), so no `n × n` or `m × m`
//! covariance is ever formed. No inflation and no localization.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_finite, Error, Result};
use crate::filter::{ObservationModel, ObservationStep, StepTransition, TransitionSource};
use crate::linalg::{checked_svd, gaussian_matrix, scale_columns, seeded_rng, select_columns, symmetrize, LowRankFactor};
use crate::operator::Op;
use crate::sde::{discretize_transition_capped, process_noise_dense, LtiSdeModel};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Columns are state samples.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub members: DMatrix<f64>,
}

impl Ensemble {
    pub fn new(members: DMatrix<f64>) -> Result<Self> {
        if members.ncols() < 2 {
            return Err(Error::InvalidArgument("an ensemble needs at least two members".into()));
        }
        check_finite(members.iter(), "ensemble members")?;
        Ok(Self { members })
    }

    pub fn size(&self) -> usize {
        self.members.ncols()
    }

    pub fn mean(&self) -> DVector<f64> {
        self.members.column_mean()
    }

    /// `(X − x̄ 1ᵀ) / √(r − 1)`, a square root of the sample covariance.
    pub fn anomalies(&self) -> DMatrix<f64> {
        let mean = self.mean();
        let mut a = self.members.clone();
        for mut col in a.column_iter_mut() {
            col -= &mean;
        }
        a / ((self.size() - 1) as f64).sqrt()
    }

    pub fn factor(&self) -> LowRankFactor {
        LowRankFactor::new(self.anomalies()).expect("finite ensemble")
    }

    pub fn sample_cov(&self) -> DMatrix<f64> {
        let a = self.anomalies();
        &a * a.transpose()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnsembleKind {
    /// Perturbed-observation EnKF.
    Stochastic,
    /// ETKF with the symmetric square-root transform.
    Transform,
}

/// Incremental ensemble filter, one measurement time per call.
#[derive(Debug, Clone)]
pub struct EnsembleFilter {
    kind: EnsembleKind,
    ensemble: Ensemble,
    rng: ChaCha8Rng,
    time: Option<f64>,
    steps: usize,
    total_loglik: f64,
}

impl EnsembleFilter {
    pub fn new(kind: EnsembleKind, init: Ensemble, seed: u64) -> Self {
        Self {
            kind,
            ensemble: init,
            rng: seeded_rng(seed, 0xe7),
            time: None,
            steps: 0,
            total_loglik: 0.0,
        }
    }

    pub fn ensemble(&self) -> &Ensemble {
        &self.ensemble
    }

    pub fn total_loglik(&self) -> f64 {
        self.total_loglik
    }

    /// Propagate (after the first call) and correct; returns the
    /// log-likelihood increment under the forecast sample statistics.
    pub fn step(&mut self, dynamics: &mut dyn TransitionSource, obs: &ObservationStep) -> Result<f64> {
        if let Some(t_prev) = self.time {
            if !(obs.time > t_prev) {
                return Err(Error::NonMonotoneTimes { index: self.steps, time: obs.time, previous: t_prev });
            }
            let tr = dynamics.transition(self.steps, t_prev, obs.time)?;
            let mut x = tr.phi.apply_mat(&self.ensemble.members);
            if let Some(q) = &tr.q_sqrt {
                let z = gaussian_matrix(&mut self.rng, q.rank(), x.ncols());
                x.gemm(1.0, q.matrix(), &z, 1.0);
            }
            self.ensemble.members = x;
        }
        let loglik = match &obs.y {
            Some(y) => match self.kind {
                EnsembleKind::Stochastic => enkf_update(&mut self.ensemble, &obs.model, y, &mut self.rng)?,
                EnsembleKind::Transform => etkf_update(&mut self.ensemble, &obs.model, y)?,
            },
            None => 0.0,
        };
        check_finite(self.ensemble.members.iter(), "ensemble after update")?;
        self.time = Some(obs.time);
        self.steps += 1;
        self.total_loglik += loglik;
        Ok(loglik)
    }
}

struct Projected {
    a: DMatrix<f64>,
    w: DMatrix<f64>,
    e: DVector<f64>,
}

fn project(ens: &Ensemble, obs: &ObservationModel, y: &DVector<f64>) -> Result<Projected> {
    if y.len() != obs.m() {
        return Err(Error::Dimension { context: "measurement vector".into(), expected: obs.m(), got: y.len() });
    }
    let a = ens.anomalies();
    let w = obs.whiten(&obs.c().apply_mat(&a));
    let e = obs.whiten_vec(&(y - obs.c().apply(&ens.mean())));
    Ok(Projected { a, w, e })
}

/// Thin SVD `W = U diag(s) Vᵀ` of the whitened projected anomalies; every
/// ensemble-space inverse below is diagonal in this basis, so the cost is
/// `O(m r min(m, r))` whichever of `m` and `r` is larger.
struct ThinSvd {
    u: DMatrix<f64>,
    s: DVector<f64>,
    v: DMatrix<f64>,
}

fn thin_svd(w: &DMatrix<f64>) -> ThinSvd {
    let (u, s, v) = checked_svd(w);
    ThinSvd { u, s, v }
}

/// `log N(y; C x̄, C A Aᵀ Cᵀ + R)` with
/// `|I + W Wᵀ| = Π (1 + sᵢ²)` and
/// `eᵀ (I + W Wᵀ)^{-1} e = ‖e‖² − Σ sᵢ²/(1 + sᵢ²) (uᵢᵀ e)²`.
fn forecast_loglik(p: &Projected, obs: &ObservationModel, svd: &ThinSvd) -> f64 {
    let m = obs.m() as f64;
    let ue = svd.u.transpose() * &p.e;
    let mut quad = p.e.norm_squared();
    let mut log_det = 0.0;
    for (&si, &c) in svd.s.iter().zip(ue.iter()) {
        let s2 = si * si;
        quad -= s2 / (1.0 + s2) * c * c;
        log_det += 0.5 * (1.0 + s2).ln();
    }
    -0.5 * m * LN_2PI - obs.log_det_r_sqrt() - log_det - 0.5 * quad
}

/// Perturbed-observation update. Member `i` moves by
/// `A Wᵀ (W Wᵀ + I)^{-1} (R^{-1/2}(y − C xᵢ) + ηᵢ)` with `ηᵢ ~ N(0, I)`.
fn enkf_update(ens: &mut Ensemble, obs: &ObservationModel, y: &DVector<f64>, rng: &mut ChaCha8Rng) -> Result<f64> {
    let p = project(ens, obs, y)?;
    let svd = thin_svd(&p.w);
    let loglik = forecast_loglik(&p, obs, &svd);

    let r = ens.size();
    let mut innov = DMatrix::zeros(obs.m(), r);
    let cx = obs.c().apply_mat(&ens.members);
    for (mut col, cxi) in innov.column_iter_mut().zip(cx.column_iter()) {
        col.copy_from(&(y - cxi));
    }
    let e = obs.whiten(&innov) + gaussian_matrix(rng, obs.m(), r);
    // (W Wᵀ + I)^{-1} E = E − U diag(s²/(1 + s²)) Uᵀ E.
    let mut ue = svd.u.transpose() * &e;
    for (mut row, &si) in ue.row_iter_mut().zip(svd.s.iter()) {
        row *= si * si / (1.0 + si * si);
    }
    let t = &e - &svd.u * ue;
    ens.members += &p.a * (p.w.transpose() * &t);
    Ok(loglik)
}

/// Symmetric square-root transform update:
/// `x̄ += A V diag(s/(1 + s²)) Uᵀ e` and
/// `A ← A (I + WᵀW)^{-1/2} = A + (A V) diag((1 + s²)^{-1/2} − 1) Vᵀ`.
fn etkf_update(ens: &mut Ensemble, obs: &ObservationModel, y: &DVector<f64>) -> Result<f64> {
    let p = project(ens, obs, y)?;
    let svd = thin_svd(&p.w);
    let loglik = forecast_loglik(&p, obs, &svd);

    let r = ens.size();
    let av = &p.a * &svd.v;
    let ue = svd.u.transpose() * &p.e;
    let weights = DVector::from_iterator(svd.s.len(), svd.s.iter().zip(ue.iter()).map(|(&si, &c)| si / (1.0 + si * si) * c));
    let mean = ens.mean() + &av * weights;

    let mut shrink = av;
    scale_columns(&mut shrink, &svd.s.map(|si| 1.0 / (1.0 + si * si).sqrt() - 1.0));
    let anomalies = (&p.a + shrink * svd.v.transpose()) * ((r - 1) as f64).sqrt();
    let mut members = anomalies;
    for mut col in members.column_iter_mut() {
        col += &mean;
    }
    ens.members = members;
    Ok(loglik)
}

/// Eigenvalues of `Q` at or below this fraction of the largest are dropped
/// from the sampling factor; their standard deviations are below `1e-7` of
/// the leading one.
pub const NOISE_EIGEN_CUTOFF: f64 = 1e-14;

/// Exact discretization of a continuous prior with a full process-noise
/// factor `V diag(√λ)` of the dense `Q(dt)`, so ensembles sample the exact
/// noise. Cached while `dt` is fixed.
#[derive(Debug, Clone)]
pub struct ExactNoiseDynamics {
    model: Arc<LtiSdeModel>,
    cap: usize,
    cache: Option<(f64, StepTransition)>,
}

impl ExactNoiseDynamics {
    pub fn new(model: Arc<LtiSdeModel>, cap: usize) -> Result<Self> {
        if model.n() > cap {
            return Err(Error::DenseCapExceeded { n: model.n(), cap });
        }
        Ok(Self { model, cap, cache: None })
    }
}

/// `V diag(√λ)` over the eigenpairs of `q` above [`NOISE_EIGEN_CUTOFF`].
pub fn noise_sampling_factor(q: &DMatrix<f64>) -> Result<LowRankFactor> {
    let eig = symmetrize(q).symmetric_eigen();
    let max = eig.eigenvalues.max();
    let keep: Vec<usize> = (0..eig.eigenvalues.len()).filter(|&i| eig.eigenvalues[i] > NOISE_EIGEN_CUTOFF * max).collect();
    let mut f = select_columns(&eig.eigenvectors, &keep);
    scale_columns(&mut f, &DVector::from_iterator(keep.len(), keep.iter().map(|&i| eig.eigenvalues[i].sqrt())));
    LowRankFactor::new(f)
}

impl TransitionSource for ExactNoiseDynamics {
    fn transition(&mut self, _step: usize, from: f64, to: f64) -> Result<StepTransition> {
        let dt = to - from;
        if let Some((cached, tr)) = &self.cache {
            if (cached - dt).abs() <= 1e-12 * dt.abs() {
                return Ok(tr.clone());
            }
        }
        let phi: Op = discretize_transition_capped(&self.model, dt, self.cap)?;
        let q = process_noise_dense(&self.model, dt, self.cap)?;
        let factor = noise_sampling_factor(&q)?;
        let mut tr = StepTransition::noiseless(phi);
        tr.q_sqrt = (factor.rank() > 0).then_some(factor);
        self.cache = Some((dt, tr.clone()));
        Ok(tr)
    }
}

/// Per-step ensemble statistics.
#[derive(Debug, Clone)]
pub struct EnsembleTrace {
    pub means: Vec<DVector<f64>>,
    pub factors: Vec<LowRankFactor>,
    pub logliks: Vec<f64>,
    pub total_loglik: f64,
}

fn ensemble_pass(
    kind: EnsembleKind,
    dynamics: &mut dyn TransitionSource,
    obs_seq: &[ObservationStep],
    init: Ensemble,
    seed: u64,
) -> Result<EnsembleTrace> {
    let mut filter = EnsembleFilter::new(kind, init, seed);
    let mut trace = EnsembleTrace { means: Vec::new(), factors: Vec::new(), logliks: Vec::new(), total_loglik: 0.0 };
    for obs in obs_seq {
        let ll = filter.step(dynamics, obs)?;
        trace.means.push(filter.ensemble().mean());
        trace.factors.push(filter.ensemble().factor());
        trace.logliks.push(ll);
    }
    trace.total_loglik = filter.total_loglik();
    Ok(trace)
}

pub fn enkf_pass(
    dynamics: &mut dyn TransitionSource,
    obs_seq: &[ObservationStep],
    init: Ensemble,
    seed: u64,
) -> Result<EnsembleTrace> {
    ensemble_pass(EnsembleKind::Stochastic, dynamics, obs_seq, init, seed)
}

pub fn etkf_pass(
    dynamics: &mut dyn TransitionSource,
    obs_seq: &[ObservationStep],
    init: Ensemble,
    seed: u64,
) -> Result<EnsembleTrace> {
    ensemble_pass(EnsembleKind::Transform, dynamics, obs_seq, init, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::{DiscreteDynamics, NoiseModel};
    use crate::operator::{DenseOperator, Op};
    use std::sync::Arc;

    fn random(n: usize, k: usize, seed: u64) -> DMatrix<f64> {
        gaussian_matrix(&mut seeded_rng(seed, 0), n, k)
    }

    fn obs(m: usize, n: usize, seed: u64) -> Arc<ObservationModel> {
        Arc::new(ObservationModel::new(DenseOperator::arc(random(m, n, seed)), NoiseModel::Diagonal(DVector::from_element(m, 0.5))).unwrap())
    }

    #[test]
    fn blind_noiseless_ensemble_mean_follows_dynamics() {
        let n = 5;
        let phi = random(n, n, 1) * 0.4;
        let zero_c = Arc::new(ObservationModel::isotropic(DenseOperator::arc(DMatrix::zeros(2, n)), 1.0).unwrap());
        let init = Ensemble::new(random(n, 6, 2)).unwrap();
        let steps: Vec<_> = (0..4)
            .map(|i| ObservationStep { time: i as f64, model: zero_c.clone(), y: Some(DVector::from_vec(vec![0.3, 0.1])) })
            .collect();
        for kind in [EnsembleKind::Stochastic, EnsembleKind::Transform] {
            let mut dyn_ = DiscreteDynamics { phi: DenseOperator::arc(phi.clone()) as Op, q_sqrt: None };
            let trace = ensemble_pass(kind, &mut dyn_, &steps, init.clone(), 3).unwrap();
            let mut expected = init.mean();
            for (i, mean) in trace.means.iter().enumerate() {
                if i > 0 {
                    expected = &phi * expected;
                }
                assert!((mean - &expected).norm() < 1e-12 * expected.norm().max(1.0), "{kind:?} step {i}");
            }
        }
    }

    #[test]
    fn transform_update_is_the_kalman_update_of_the_sample_statistics() {
        let (n, m, r) = (8, 3, 6);
        let o = obs(m, n, 4);
        let mut ens = Ensemble::new(random(n, r, 5)).unwrap();
        let y = DVector::from_vec(vec![0.5, -0.3, 1.2]);
        let prior_mean = ens.mean();
        let prior_cov = ens.sample_cov();
        etkf_update(&mut ens, &o, &y).unwrap();

        let c = o.c().to_dense();
        let s = &c * &prior_cov * c.transpose() + o.noise_cov_dense();
        let k = &prior_cov * c.transpose() * s.try_inverse().unwrap();
        let mean = &prior_mean + &k * (&y - &c * &prior_mean);
        let cov = (DMatrix::identity(n, n) - &k * &c) * &prior_cov;
        assert!((ens.mean() - mean).norm() < 1e-10);
        assert!((ens.sample_cov() - &cov).norm() < 1e-8 * cov.norm());
    }

    #[test]
    fn sample_covariance_rank_is_below_ensemble_size() {
        let ens = Ensemble::new(random(10, 4, 6)).unwrap();
        let s = ens.factor().singular_values();
        assert!(s[3] < 1e-12 * s[0]);
    }

    #[test]
    fn forecast_loglik_matches_dense_density() {
        let (n, m, r) = (7, 4, 5);
        let o = obs(m, n, 7);
        let ens = Ensemble::new(random(n, r, 8)).unwrap();
        let y = DVector::from_vec(vec![0.1, 0.2, -0.4, 0.9]);
        let p = project(&ens, &o, &y).unwrap();
        let ll = forecast_loglik(&p, &o, &thin_svd(&p.w));
        let c = o.c().to_dense();
        let s = &c * ens.sample_cov() * c.transpose() + o.noise_cov_dense();
        let d = &y - &c * ens.mean();
        let dense = -0.5 * m as f64 * LN_2PI - 0.5 * s.determinant().ln() - 0.5 * d.dot(&(s.try_inverse().unwrap() * &d));
        assert!((ll - dense).abs() < 1e-10);
    }

    #[test]
    fn runs_are_reproducible_per_seed() {
        let (n, m) = (6, 2);
        let o = obs(m, n, 9);
        let steps: Vec<_> = (0..3)
            .map(|i| ObservationStep { time: i as f64, model: o.clone(), y: Some(DVector::from_vec(vec![0.2, -0.1])) })
            .collect();
        let q = LowRankFactor::new(random(n, 2, 10) * 0.1).unwrap();
        let run = |seed| {
            let mut dyn_ = DiscreteDynamics { phi: DenseOperator::arc(random(n, n, 11) * 0.3), q_sqrt: Some(q.clone()) };
            enkf_pass(&mut dyn_, &steps, Ensemble::new(random(n, 5, 12)).unwrap(), seed).unwrap()
        };
        let (a, b, c) = (run(1), run(1), run(2));
        assert_eq!(a.means, b.means);
        assert_ne!(a.means, c.means);
    }

    #[test]
    fn sampling_factor_reproduces_the_noise_covariance() {
        let b = gaussian_matrix(&mut seeded_rng(4, 0), 6, 3);
        let q = &b * b.transpose();
        let f = noise_sampling_factor(&q).unwrap();
        assert_eq!(f.rank(), 3);
        assert!((f.outer() - &q).norm() < 1e-12 * q.norm());
        assert_eq!(noise_sampling_factor(&DMatrix::zeros(4, 4)).unwrap().rank(), 0);
    }
}
