//! Dense Kalman filter and Rauch–Tung–Striebel smoother.
//!
//! Covariances are stored in full. Prediction applies `Φ` through its
//! operator (so a shift costs `O(n²)`, not `O(n³)`), and the correction
//! uses the Joseph form evaluated in `O(n² m)`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_finite, Error, Result};
use crate::filter::{ObservationModel, ObservationStep};
use crate::linalg::{symmetrize, PINV_RELATIVE_CUTOFF};
use crate::operator::Op;
use crate::sde::{discretize_transition_capped, process_noise_dense, LtiSdeModel};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone)]
pub struct DenseGaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl DenseGaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if cov.shape() != (n, n) {
            return Err(Error::Dimension { context: "dense covariance".into(), expected: n, got: cov.nrows() });
        }
        check_finite(mean.iter().chain(cov.iter()), "dense Gaussian")?;
        Ok(Self { mean, cov: symmetrize(&cov) })
    }

    pub fn n(&self) -> usize {
        self.mean.len()
    }
}

/// `Φ` and the dense process noise `Q` for one step.
#[derive(Debug, Clone)]
pub struct DenseTransition {
    pub phi: Op,
    pub q: Option<Arc<DMatrix<f64>>>,
}

pub trait DenseTransitionSource {
    fn dense_transition(&mut self, step: usize, from: f64, to: f64) -> Result<DenseTransition>;
}

/// Exact discretization of a continuous prior, cached while `dt` is fixed.
#[derive(Debug, Clone)]
pub struct ExactDenseDynamics {
    model: Arc<LtiSdeModel>,
    cap: usize,
    cache: Option<(f64, DenseTransition)>,
}

impl ExactDenseDynamics {
    pub fn new(model: Arc<LtiSdeModel>, cap: usize) -> Result<Self> {
        if model.n() > cap {
            return Err(Error::DenseCapExceeded { n: model.n(), cap });
        }
        Ok(Self { model, cap, cache: None })
    }
}

impl DenseTransitionSource for ExactDenseDynamics {
    fn dense_transition(&mut self, _step: usize, from: f64, to: f64) -> Result<DenseTransition> {
        let dt = to - from;
        if let Some((cached, tr)) = &self.cache {
            if (cached - dt).abs() <= 1e-12 * dt.abs() {
                return Ok(tr.clone());
            }
        }
        let phi = discretize_transition_capped(&self.model, dt, self.cap)?;
        let q = process_noise_dense(&self.model, dt, self.cap)?;
        let tr = DenseTransition { phi, q: Some(Arc::new(q)) };
        self.cache = Some((dt, tr.clone()));
        Ok(tr)
    }
}

/// The same `Φ` and `Q` at every step.
#[derive(Debug, Clone)]
pub struct FixedDenseDynamics {
    pub phi: Op,
    pub q: Option<Arc<DMatrix<f64>>>,
}

impl DenseTransitionSource for FixedDenseDynamics {
    fn dense_transition(&mut self, _step: usize, _from: f64, _to: f64) -> Result<DenseTransition> {
        Ok(DenseTransition { phi: self.phi.clone(), q: self.q.clone() })
    }
}

/// `Φ Σ Φᵀ + Q` with `Φ` applied as an operator.
pub fn dense_predict(prior: &DenseGaussian, phi: &Op, q: Option<&DMatrix<f64>>) -> DenseGaussian {
    let mean = phi.apply(&prior.mean);
    let half = phi.apply_mat(&prior.cov); // Φ Σ
    let mut cov = phi.apply_mat(&half.transpose()); // Φ (Φ Σ)ᵀ = Φ Σ Φᵀ
    if let Some(q) = q {
        cov += q;
    }
    DenseGaussian { mean, cov: symmetrize(&cov) }
}

/// Joseph-form Kalman update; returns the posterior and `log N(y; Cμ⁻, S)`.
pub fn dense_correct(pred: &DenseGaussian, obs: &ObservationModel, y: &DVector<f64>) -> Result<(DenseGaussian, f64)> {
    let m = obs.m();
    if y.len() != m {
        return Err(Error::Dimension { context: "measurement vector".into(), expected: m, got: y.len() });
    }
    let c = obs.c();
    let r = obs.noise_cov_dense();
    let cp = c.apply_mat(&pred.cov); // C Π, m × n
    let s = symmetrize(&(c.apply_mat(&cp.transpose()) + &r));
    let chol = s
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("innovation covariance is not positive definite".into()))?;
    // K = (C Π)ᵀ S⁻¹, so Kᵀ = S⁻¹ C Π.
    let kt = chol.solve(&cp);
    let k = kt.transpose();
    let resid = y - c.apply(&pred.mean);
    let mean = &pred.mean + &k * &resid;

    let z = &pred.cov - &k * &cp; // (I − K C) Π
    let zct = c.apply_mat(&z.transpose()).transpose(); // Z Cᵀ
    let cov = &z - &zct * &kt + &k * (&r * &kt);

    let l = chol.l();
    let white = l.solve_lower_triangular(&resid).expect("Cholesky factor is nonsingular");
    let log_det: f64 = l.diagonal().iter().map(|v| v.ln()).sum();
    let loglik = -0.5 * m as f64 * LN_2PI - log_det - 0.5 * white.norm_squared();
    check_finite(std::iter::once(&loglik), "dense log-likelihood")?;
    Ok((DenseGaussian { mean, cov: symmetrize(&cov) }, loglik))
}

#[derive(Debug, Clone)]
pub struct DenseStepRecord {
    pub time: f64,
    pub predicted: DenseGaussian,
    pub corrected: DenseGaussian,
    /// Transition into this step; `None` at the first step.
    pub transition: Option<DenseTransition>,
    pub loglik_increment: f64,
}

#[derive(Debug, Clone)]
pub struct DenseTrace {
    pub init: DenseGaussian,
    pub records: Vec<DenseStepRecord>,
    pub total_loglik: f64,
}

/// Incremental dense filter, one measurement time per call.
#[derive(Debug, Clone)]
pub struct DenseKalmanFilter {
    init: DenseGaussian,
    current: Option<(f64, DenseGaussian)>,
    steps: usize,
    total_loglik: f64,
}

impl DenseKalmanFilter {
    pub fn new(init: DenseGaussian, cap: usize) -> Result<Self> {
        if init.n() > cap {
            return Err(Error::DenseCapExceeded { n: init.n(), cap });
        }
        Ok(Self { init, current: None, steps: 0, total_loglik: 0.0 })
    }

    pub fn total_loglik(&self) -> f64 {
        self.total_loglik
    }

    pub fn current(&self) -> &DenseGaussian {
        self.current.as_ref().map(|(_, g)| g).unwrap_or(&self.init)
    }

    pub fn step(&mut self, dynamics: &mut dyn DenseTransitionSource, obs: &ObservationStep) -> Result<DenseStepRecord> {
        let (predicted, transition) = match &self.current {
            None => (self.init.clone(), None),
            Some((t_prev, prev)) => {
                if !(obs.time > *t_prev) {
                    return Err(Error::NonMonotoneTimes { index: self.steps, time: obs.time, previous: *t_prev });
                }
                let tr = dynamics.dense_transition(self.steps, *t_prev, obs.time)?;
                (dense_predict(prev, &tr.phi, tr.q.as_deref()), Some(tr))
            }
        };
        let (corrected, loglik) = match &obs.y {
            Some(y) => dense_correct(&predicted, &obs.model, y)?,
            None => (predicted.clone(), 0.0),
        };
        self.total_loglik += loglik;
        self.steps += 1;
        self.current = Some((obs.time, corrected.clone()));
        Ok(DenseStepRecord { time: obs.time, predicted, corrected, transition, loglik_increment: loglik })
    }
}

/// Dense filter over a whole sequence, keeping every step.
pub fn dense_kf_pass(
    dynamics: &mut dyn DenseTransitionSource,
    obs_seq: &[ObservationStep],
    init: DenseGaussian,
    cap: usize,
) -> Result<DenseTrace> {
    let mut kf = DenseKalmanFilter::new(init.clone(), cap)?;
    let mut records = Vec::with_capacity(obs_seq.len());
    for obs in obs_seq {
        records.push(kf.step(dynamics, obs)?);
    }
    let total_loglik = records.iter().map(|r| r.loglik_increment).sum();
    Ok(DenseTrace { init, records, total_loglik })
}

/// Symmetric pseudoinverse with the relative eigenvalue cutoff.
fn sym_pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let inv = eig.eigenvalues.map(|l| if max > 0.0 && l > PINV_RELATIVE_CUTOFF * max { 1.0 / l } else { 0.0 });
    let mut v = eig.eigenvectors.clone();
    for (mut col, &s) in v.column_iter_mut().zip(inv.iter()) {
        col *= s;
    }
    v * eig.eigenvectors.transpose()
}

/// Backward kernel `x_l | x_{l+1} ~ N(G x_{l+1} + v, P)` in dense form:
/// `G = Σ Φᵀ Π⁺`, `v = μ − G μ⁻`, `P = (I − GΦ) Σ (I − GΦ)ᵀ + G Q Gᵀ`.
pub fn dense_backward_kernel(
    filtered: &DenseGaussian,
    next_predicted: &DenseGaussian,
    transition: &DenseTransition,
) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let n = filtered.n();
    let phi_sigma = transition.phi.apply_mat(&filtered.cov);
    let g = phi_sigma.transpose() * sym_pinv(&next_predicted.cov);
    let v = &filtered.mean - &g * &next_predicted.mean;
    let g_phi = transition.phi.apply_adjoint_mat(&g.transpose()).transpose();
    let i_gp = DMatrix::identity(n, n) - g_phi;
    let mut p = &i_gp * &filtered.cov * i_gp.transpose();
    if let Some(q) = &transition.q {
        p += &g * q.as_ref() * g.transpose();
    }
    (g, v, symmetrize(&p))
}

/// RTS smoothing moments for every step of a dense trace.
pub fn dense_rts_pass(trace: &DenseTrace) -> Result<Vec<DenseGaussian>> {
    let n_steps = trace.records.len();
    if n_steps == 0 {
        return Ok(Vec::new());
    }
    let mut out = vec![trace.records[n_steps - 1].corrected.clone()];
    for l in (0..n_steps - 1).rev() {
        let next = &trace.records[l + 1];
        let transition = next
            .transition
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("dense trace step is missing its transition".into()))?;
        let (g, v, p) = dense_backward_kernel(&trace.records[l].corrected, &next.predicted, transition);
        let later = out.last().expect("non-empty");
        let mean = &g * &later.mean + v;
        let cov = &g * &later.cov * g.transpose() + p;
        out.push(DenseGaussian { mean, cov: symmetrize(&cov) });
    }
    out.reverse();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::NoiseModel;
    use crate::operator::{DenseOperator, ScaledIdentity};

    fn scalar_obs(std: f64) -> Arc<ObservationModel> {
        Arc::new(ObservationModel::new(Arc::new(ScaledIdentity::identity(1)), NoiseModel::Diagonal(DVector::from_element(1, std))).unwrap())
    }

    fn scalar(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    #[test]
    fn scalar_recursion_matches_hand_computation() {
        let (a, q, r): (f64, f64, f64) = (0.9, 0.2, 0.5);
        let obs = scalar_obs(r.sqrt());
        let ys = [1.3, -0.4];
        let steps: Vec<_> = ys
            .iter()
            .enumerate()
            .map(|(i, &y)| ObservationStep { time: i as f64, model: obs.clone(), y: Some(scalar(y)) })
            .collect();
        let mut dyn_ = FixedDenseDynamics {
            phi: DenseOperator::arc(DMatrix::from_element(1, 1, a)),
            q: Some(Arc::new(DMatrix::from_element(1, 1, q))),
        };
        let init = DenseGaussian::new(scalar(0.2), DMatrix::from_element(1, 1, 2.0)).unwrap();
        let trace = dense_kf_pass(&mut dyn_, &steps, init, 8).unwrap();

        let (mut mu, mut p, mut ll) = (0.2, 2.0, 0.0);
        for (i, &y) in ys.iter().enumerate() {
            if i > 0 {
                mu *= a;
                p = a * a * p + q;
            }
            let s = p + r;
            ll += -0.5 * (2.0 * std::f64::consts::PI * s).ln() - 0.5 * (y - mu) * (y - mu) / s;
            let k = p / s;
            mu += k * (y - mu);
            p *= 1.0 - k;
            let rec = &trace.records[i].corrected;
            assert!((rec.mean[0] - mu).abs() < 1e-12);
            assert!((rec.cov[(0, 0)] - p).abs() < 1e-12);
        }
        assert!((trace.total_loglik - ll).abs() < 1e-12);
    }

    #[test]
    fn precise_measurement_pins_the_mean() {
        let n = 3;
        let obs = Arc::new(ObservationModel::isotropic(Arc::new(ScaledIdentity::identity(n)), 1e-6).unwrap());
        let y = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let init = DenseGaussian::new(DVector::zeros(n), DMatrix::identity(n, n)).unwrap();
        let (post, _) = dense_correct(&init, &obs, &y).unwrap();
        assert!((post.mean - y).norm() < 1e-5);
    }

    #[test]
    fn loglik_matches_joint_gaussian() {
        // N = 3 steps, n = 2, m = 1: stack y = H x₀ + noise into one Gaussian.
        let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.2, -0.1, 0.8]);
        let q = DMatrix::from_row_slice(2, 2, &[0.3, 0.05, 0.05, 0.2]);
        let c = DMatrix::from_row_slice(1, 2, &[1.0, -0.5]);
        let r: f64 = 0.4;
        let mu0 = DVector::from_vec(vec![0.5, -0.2]);
        let p0 = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.6]);
        let ys = [0.7, -0.1, 0.4];

        // Brute force: x_k = A^k x₀ + Σ_j A^{k−j} w_j.
        let nsteps = ys.len();
        let mut means = DVector::zeros(nsteps);
        let mut state_cov = vec![vec![DMatrix::zeros(2, 2); nsteps]; nsteps];
        let pow = |k: usize| (0..k).fold(DMatrix::identity(2, 2), |acc, _| &a * acc);
        for i in 0..nsteps {
            means[i] = (&c * pow(i) * &mu0)[0];
            for j in 0..nsteps {
                let mut cov = pow(i) * &p0 * pow(j).transpose();
                for k in 1..=i.min(j) {
                    cov += pow(i - k) * &q * pow(j - k).transpose();
                }
                state_cov[i][j] = cov;
            }
        }
        let joint = DMatrix::from_fn(nsteps, nsteps, |i, j| {
            (&c * &state_cov[i][j] * c.transpose())[0] + if i == j { r } else { 0.0 }
        });
        let y = DVector::from_row_slice(&ys);
        let d = &y - &means;
        let brute = -0.5 * nsteps as f64 * LN_2PI - 0.5 * joint.determinant().ln()
            - 0.5 * d.dot(&(joint.clone().try_inverse().unwrap() * &d));

        let obs = Arc::new(ObservationModel::isotropic(DenseOperator::arc(c.clone()), r.sqrt()).unwrap());
        let steps: Vec<_> = ys
            .iter()
            .enumerate()
            .map(|(i, &v)| ObservationStep { time: i as f64, model: obs.clone(), y: Some(scalar(v)) })
            .collect();
        let mut dyn_ = FixedDenseDynamics { phi: DenseOperator::arc(a.clone()), q: Some(Arc::new(q.clone())) };
        let trace = dense_kf_pass(&mut dyn_, &steps, DenseGaussian::new(mu0, p0).unwrap(), 8).unwrap();
        assert!((trace.total_loglik - brute).abs() < 1e-12);
    }

    #[test]
    fn scalar_smoother_matches_hand_computation() {
        let (a, q, r): (f64, f64, f64) = (0.7, 0.3, 0.2);
        let obs = scalar_obs(r.sqrt());
        let steps: Vec<_> = [0.5, 1.1]
            .iter()
            .enumerate()
            .map(|(i, &y)| ObservationStep { time: i as f64, model: obs.clone(), y: Some(scalar(y)) })
            .collect();
        let mut dyn_ = FixedDenseDynamics {
            phi: DenseOperator::arc(DMatrix::from_element(1, 1, a)),
            q: Some(Arc::new(DMatrix::from_element(1, 1, q))),
        };
        let trace = dense_kf_pass(&mut dyn_, &steps, DenseGaussian::new(scalar(0.0), DMatrix::from_element(1, 1, 1.0)).unwrap(), 4).unwrap();
        let smooth = dense_rts_pass(&trace).unwrap();
        let f0 = &trace.records[0].corrected;
        let p1 = &trace.records[1].predicted;
        let f1 = &trace.records[1].corrected;
        let g = f0.cov[(0, 0)] * a / p1.cov[(0, 0)];
        let mean = f0.mean[0] + g * (f1.mean[0] - p1.mean[0]);
        let var = f0.cov[(0, 0)] + g * g * (f1.cov[(0, 0)] - p1.cov[(0, 0)]);
        assert!((smooth[0].mean[0] - mean).abs() < 1e-12);
        assert!((smooth[0].cov[(0, 0)] - var).abs() < 1e-12);
        assert!((smooth[1].mean[0] - f1.mean[0]).abs() == 0.0);
    }

    #[test]
    fn cap_is_enforced() {
        let init = DenseGaussian::new(DVector::zeros(5), DMatrix::identity(5, 5)).unwrap();
        assert!(matches!(DenseKalmanFilter::new(init, 4), Err(Error::DenseCapExceeded { .. })));
    }
}
