//! Periodic linear advection with sinusoidal initial states.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::{data::observe, Dynamics, InitialDistribution, Problem};
use crate::error::{Error, Result};
use crate::filter::ObservationModel;
use crate::linalg::seeded_rng;
use crate::operator::{CircularShift, LinearOperator, SelectionOperator};

/// Harmonics `k = 0..=HARMONICS` in each initial curve.
pub const HARMONICS: usize = 25;
/// Wavelength denominator of the sinusoids, in grid cells.
pub const WAVE_PERIOD: f64 = 1000.0;
/// Dimension of the span of all initial curves: a constant plus a sine and
/// cosine per nonzero harmonic.
pub const TRUE_RANK: usize = 2 * HARMONICS + 1;

#[derive(Debug, Clone, PartialEq)]
pub struct AdvectionScenario {
    pub n: usize,
    pub velocity: f64,
    pub dt: f64,
    pub dx: f64,
    pub obs_every: usize,
    pub obs_count: usize,
    pub noise_std: f64,
    /// Number of transitions; the problem has `steps + 1` times.
    pub steps: usize,
    /// Members of the initial ensemble; `None` means `n`.
    pub ensemble_size: Option<usize>,
    pub seed: u64,
}

impl Default for AdvectionScenario {
    fn default() -> Self {
        Self {
            n: 1024,
            velocity: 1.0,
            dt: 1.0,
            dx: 1.0,
            obs_every: 5,
            obs_count: 10,
            noise_std: 0.1,
            steps: 800,
            ensemble_size: None,
            seed: 0,
        }
    }
}

impl AdvectionScenario {
    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.obs_count == 0 || self.obs_count > self.n || self.obs_every == 0 {
            return Err(Error::InvalidArgument(format!(
                "advection needs n > 0 and 0 < obs_count <= n, got n = {}, obs_count = {}",
                self.n, self.obs_count
            )));
        }
        if !(self.noise_std > 0.0) || !(self.dx > 0.0) || !(self.dt > 0.0) {
            return Err(Error::InvalidArgument("advection noise_std, dt and dx must be positive".into()));
        }
        Ok(())
    }

    /// Whole cells moved per step.
    pub fn cell_shift(&self) -> Result<i64> {
        let cells = self.velocity * self.dt / self.dx;
        let rounded = cells.round();
        if (cells - rounded).abs() > 1e-12 * cells.abs().max(1.0) {
            return Err(Error::InvalidArgument(format!("advection moves {cells} cells per step; only whole cells are supported")));
        }
        Ok(rounded as i64)
    }
}

/// Columns `[1, sin(2πk i/1000), cos(2πk i/1000)]` for `k = 1..=25`.
pub fn harmonic_basis(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, TRUE_RANK, |i, j| {
        if j == 0 {
            return 1.0;
        }
        let k = j.div_ceil(2);
        let angle = 2.0 * PI * k as f64 * i as f64 / WAVE_PERIOD;
        if j % 2 == 1 { angle.sin() } else { angle.cos() }
    })
}

/// Basis coefficients of one curve `Σ_k a_k sin(2πk i/1000 + φ_k)`,
/// `a_k ~ U(0, 1)`, `φ_k ~ U(0, 2π)`, scaled to unit standard deviation
/// over the grid. `gram` is `BᵀB / n` and `avg` is `Bᵀ1 / n`.
fn curve_coefficients<R: Rng>(rng: &mut R, gram: &DMatrix<f64>, avg: &DVector<f64>) -> DVector<f64> {
    let mut c = DVector::zeros(TRUE_RANK);
    for k in 0..=HARMONICS {
        let a: f64 = rng.random();
        let phase: f64 = rng.random::<f64>() * 2.0 * PI;
        if k == 0 {
            c[0] = a * phase.sin();
        } else {
            c[2 * k - 1] = a * phase.cos();
            c[2 * k] = a * phase.sin();
        }
    }
    let mean = avg.dot(&c);
    let var = c.dot(&(gram * &c)) - mean * mean;
    if var > 0.0 {
        c /= var.sqrt();
    }
    c
}

/// Observed components `i · n / count`.
pub fn observed_components(n: usize, count: usize) -> Vec<usize> {
    (0..count).map(|i| i * n / count).collect()
}

pub fn build_advection(s: &AdvectionScenario) -> Result<Problem> {
    s.validate()?;
    let n = s.n;
    let shift = s.cell_shift()?;
    let phi = Arc::new(CircularShift::new(n, shift));

    let basis = harmonic_basis(n);
    let gram = basis.transpose() * &basis / n as f64;
    let avg = basis.row_sum().transpose() / n as f64;
    let members = s.ensemble_size.unwrap_or(n);
    if members < 2 {
        return Err(Error::InvalidArgument("advection ensemble needs at least two members".into()));
    }
    let mut rng = seeded_rng(s.seed, 0xad);
    let truth0 = &basis * curve_coefficients(&mut rng, &gram, &avg);
    let mut coeffs = DMatrix::zeros(TRUE_RANK, members);
    for j in 0..members {
        coeffs.set_column(j, &curve_coefficients(&mut rng, &gram, &avg));
    }

    let times: Vec<f64> = (0..=s.steps).map(|l| l as f64 * s.dt).collect();
    let mut truth = Vec::with_capacity(times.len());
    truth.push(truth0);
    for l in 1..times.len() {
        let next = phi.apply(&truth[l - 1]);
        let (a, b) = (truth[l - 1].norm(), next.norm());
        if (a - b).abs() > 1e-12 * a.max(1.0) {
            return Err(Error::InvalidArgument(format!("advection changed the state norm at step {l}")));
        }
        truth.push(next);
    }

    let c = Arc::new(SelectionOperator::new(n, observed_components(n, s.obs_count))?);
    let obs = Arc::new(ObservationModel::isotropic(c, s.noise_std)?);
    let models: Vec<_> = (0..times.len()).map(|l| (l % s.obs_every == 0).then(|| obs.clone())).collect();
    let observations = observe(&times, &truth, &models, s.seed)?;

    Ok(Problem {
        dynamics: Dynamics::Discrete { phi, q_sqrt: None },
        init: InitialDistribution::Ensemble { basis, coeffs },
        times,
        observations,
        truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::DenseOperator;

    #[test]
    fn unit_shift_is_a_period_n_permutation() {
        let n = 16;
        let op = CircularShift::new(n, 1);
        let x = DVector::from_fn(n, |i, _| (i * i) as f64);
        let mut y = x.clone();
        for _ in 0..n {
            y = op.apply(&y);
        }
        assert_eq!(y, x);
        let dense = op.to_dense();
        assert_eq!((dense.transpose() * &dense), DMatrix::identity(n, n));
    }

    #[test]
    fn shift_matches_dense_circulant() {
        let n = 64;
        let shift = 3;
        let circulant = DMatrix::from_fn(n, n, |i, j| if (j + shift) % n == i { 1.0 } else { 0.0 });
        let x = DMatrix::from_fn(n, 5, |i, j| ((i * 7 + j * 3) % 11) as f64 - 5.0);
        let op = CircularShift::new(n, shift as i64);
        assert!((op.apply_mat(&x) - DenseOperator(circulant).apply_mat(&x)).norm() < 1e-12);
    }

    #[test]
    fn curves_have_unit_spread_and_live_in_the_harmonic_span() {
        let n = 300;
        let basis = harmonic_basis(n);
        let gram = basis.tr_mul(&basis) / n as f64;
        let avg = basis.row_sum().transpose() / n as f64;
        let mut rng = seeded_rng(5, 0);
        let c = curve_coefficients(&mut rng, &gram, &avg);
        let curve = &basis * c;
        let mean = curve.mean();
        let var = curve.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((var - 1.0).abs() < 1e-10);
    }

    #[test]
    fn direct_evaluation_of_a_curve_matches_basis_form() {
        let n = 50;
        let mut rng = seeded_rng(9, 0);
        let (a, p): (Vec<f64>, Vec<f64>) = (0..=HARMONICS).map(|_| (rng.random::<f64>(), rng.random::<f64>() * 2.0 * PI)).unzip();
        let direct = DVector::from_fn(n, |i, _| {
            (0..=HARMONICS).map(|k| a[k] * (2.0 * PI * k as f64 * i as f64 / WAVE_PERIOD + p[k]).sin()).sum::<f64>()
        });
        let basis = harmonic_basis(n);
        let fit = basis.clone().svd(true, true).solve(&direct, 1e-14).unwrap();
        assert!((&basis * fit - direct).norm() < 1e-9);
    }

    #[test]
    fn initial_covariance_has_rank_51() {
        let s = AdvectionScenario { n: 1024, steps: 3, ..Default::default() };
        let p = build_advection(&s).unwrap();
        let cov = p.init.dense(1024).unwrap().cov;
        let sv = cov.singular_values();
        let mut sorted: Vec<f64> = sv.iter().copied().collect();
        sorted.sort_by(|a, b| b.total_cmp(a));
        assert!(sorted[TRUE_RANK - 1] > 1e-8 * sorted[0]);
        assert!(sorted[TRUE_RANK] < 1e-10 * sorted[0]);
    }

    #[test]
    fn observation_schedule_and_truth() {
        let s = AdvectionScenario { n: 100, steps: 12, ..Default::default() };
        let p = build_advection(&s).unwrap();
        assert_eq!(p.times.len(), 13);
        let observed: Vec<usize> = p.observations.iter().enumerate().filter(|(_, o)| o.y.is_some()).map(|(i, _)| i).collect();
        assert_eq!(observed, vec![0, 5, 10]);
        assert_eq!(observed_components(100, 10), (0..10).map(|i| 10 * i).collect::<Vec<_>>());
        let back = CircularShift::new(100, -12).apply(&p.truth[12]);
        assert!((back - &p.truth[0]).norm() < 1e-12);
    }

    #[test]
    fn fractional_shift_is_rejected() {
        let s = AdvectionScenario { n: 10, velocity: 0.5, ..Default::default() };
        assert!(build_advection(&s).is_err());
    }
}
