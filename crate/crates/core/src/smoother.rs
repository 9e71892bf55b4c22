//! Backward smoothing and posterior sampling from a filter trace.
//!
//! The posterior is a backward Markov chain
//! `x_l | x_{l+1} ~ N(G_l x_{l+1} + v_l, P_l)` with
//! `G_l = Σ_l^{1/2} Γ (Π_{l+1}^{1/2})⁺`. Everything is assembled from the
//! stored filter records; no dynamics are re-run.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::filter::{FilterStepRecord, FilterTrace, SqrtGaussian};
use crate::linalg::{gaussian_vector, hstack, seeded_rng, truncated_svd, LowRankFactor, PINV_RELATIVE_CUTOFF};

/// Pseudoinverse of a predicted factor `Π^{1/2} = Ũ D̃`, whose columns are
/// mutually orthogonal by construction: `(Π^{1/2})⁺ x = D̃⁻² (Π^{1/2})ᵀ x`
/// with the relative cutoff on `D̃`.
#[derive(Debug, Clone)]
struct OrthogonalColumnsPinv<'a> {
    factor: &'a DMatrix<f64>,
    inv_sq: DVector<f64>,
    cutoff_engaged: bool,
}

impl<'a> OrthogonalColumnsPinv<'a> {
    fn new(factor: &'a DMatrix<f64>) -> Self {
        let norms = DVector::from_iterator(factor.ncols(), factor.column_iter().map(|c| c.norm()));
        let d1 = norms.max();
        let mut cutoff_engaged = false;
        let inv_sq = norms.map(|d| {
            if d1 > 0.0 && d > PINV_RELATIVE_CUTOFF * d1 {
                1.0 / (d * d)
            } else {
                cutoff_engaged = true;
                0.0
            }
        });
        debug_assert!({
            let g = factor.transpose() * factor;
            let off = &g - DMatrix::from_diagonal(&g.diagonal());
            off.norm() <= 1e-8 * g.norm().max(f64::MIN_POSITIVE)
        });
        Self { factor, inv_sq, cutoff_engaged }
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = self.factor.transpose() * x;
        for (mut row, &s) in out.row_iter_mut().zip(self.inv_sq.iter()) {
            row *= s;
        }
        out
    }
}

/// The backward transition between filter steps `l` and `l + 1`.
#[derive(Debug, Clone)]
pub struct BackwardKernel<'a> {
    sigma: &'a DMatrix<f64>,
    gamma: &'a DMatrix<f64>,
    pinv: OrthogonalColumnsPinv<'a>,
    /// `v_l = μ_l − G_l μ⁻_{l+1}`.
    pub shift: DVector<f64>,
    /// `P_l^{1/2}`.
    pub noise_factor: LowRankFactor,
}

impl BackwardKernel<'_> {
    /// `G_l X = Σ_l^{1/2} (Γ ((Π_{l+1}^{1/2})⁺ X))`, right to left.
    pub fn gain_apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.sigma * (self.gamma * self.pinv.apply(x))
    }

    pub fn gain_apply_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let m = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        DVector::from_column_slice(self.gain_apply(&m).as_slice())
    }

    /// Whether singular values of `Π_{l+1}^{1/2}` were cut off.
    pub fn cutoff_engaged(&self) -> bool {
        self.pinv.cutoff_engaged
    }
}

/// Kernel from the records of steps `l` and `l + 1`.
///
/// `P_l^{1/2}` is the rank-`r` truncation of
/// `[(I − G_l Φ) Σ_l^{1/2} | G_l Q^{1/2}]`. Since `Γᵀ = Π⁺ Φ Σ_l^{1/2}`,
/// `G_l Φ Σ_l^{1/2} = Σ_l^{1/2} Γ Γᵀ`, so the first block is
/// `Σ_l^{1/2} (I − Γ Γᵀ)` and needs no transition application.
pub fn build_backward_kernel<'a>(
    record: &'a FilterStepRecord,
    next: &'a FilterStepRecord,
) -> Result<BackwardKernel<'a>> {
    let gamma = next
        .gain_core
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument(format!("record at t = {} has no gain core", next.time)))?;
    let sigma = record.corrected.factor.matrix();
    let r = sigma.ncols();
    if gamma.nrows() != r {
        return Err(Error::Dimension { context: "gain core rows".into(), expected: r, got: gamma.nrows() });
    }
    let pinv = OrthogonalColumnsPinv::new(next.predicted.factor.matrix());

    let mut kernel = BackwardKernel {
        sigma,
        gamma,
        pinv,
        shift: DVector::zeros(0),
        noise_factor: LowRankFactor::zeros(sigma.nrows(), r),
    };
    kernel.shift = &record.corrected.mean - kernel.gain_apply_vec(&next.predicted.mean);

    let mut left = -(gamma * gamma.transpose());
    for i in 0..r {
        left[(i, i)] += 1.0;
    }
    let core = match &next.q_factor {
        Some(q) => hstack(&left, &(gamma * kernel.pinv.apply(q.matrix()))),
        None => left,
    };
    let block = sigma * core;
    let svd = truncated_svd(&block, r.min(block.ncols()).min(block.nrows()))?;
    let mut p = svd.scaled_left();
    if p.ncols() < r {
        p = p.resize_horizontally(r, 0.0);
    }
    kernel.noise_factor = LowRankFactor::new(p)?;
    Ok(kernel)
}

/// All kernels of a trace, `kernels[l]` linking steps `l` and `l + 1`.
pub fn backward_kernels(trace: &FilterTrace) -> Result<Vec<BackwardKernel<'_>>> {
    trace
        .records
        .windows(2)
        .map(|w| build_backward_kernel(&w[0], &w[1]))
        .collect()
}

/// Smoothing moments at every filter step.
pub fn smooth_pass(trace: &FilterTrace) -> Result<Vec<SqrtGaussian>> {
    let kernels = backward_kernels(trace)?;
    smooth_with_kernels(trace, &kernels)
}

pub fn smooth_with_kernels(trace: &FilterTrace, kernels: &[BackwardKernel<'_>]) -> Result<Vec<SqrtGaussian>> {
    let last = trace
        .records
        .last()
        .ok_or_else(|| Error::InvalidArgument("cannot smooth an empty trace".into()))?;
    let mut out = vec![last.corrected.clone()];
    for kernel in kernels.iter().rev() {
        let later = out.last().expect("non-empty");
        let mean = kernel.gain_apply_vec(&later.mean) + &kernel.shift;
        let block = hstack(&kernel.gain_apply(later.factor.matrix()), kernel.noise_factor.matrix());
        let r = kernel.sigma.ncols();
        let svd = truncated_svd(&block, r.min(block.nrows()))?;
        let factor = LowRankFactor::new(svd.scaled_left().resize_horizontally(r, 0.0))?;
        out.push(SqrtGaussian::new(mean, factor)?);
    }
    out.reverse();
    Ok(out)
}

/// Posterior trajectories by backward simulation; `samples[s][l]` is the
/// state at filter step `l`. Sample `s` uses its own stream of `seed`, so
/// results do not depend on the thread count.
pub fn sample_posterior(trace: &FilterTrace, count: usize, seed: u64) -> Result<Vec<Vec<DVector<f64>>>> {
    if count == 0 {
        return Err(Error::InvalidArgument("sample count must be positive".into()));
    }
    let last = trace
        .records
        .last()
        .ok_or_else(|| Error::InvalidArgument("cannot sample from an empty trace".into()))?;
    let kernels = backward_kernels(trace)?;
    let samples = (0..count)
        .into_par_iter()
        .map(|s| {
            let mut rng = seeded_rng(seed, s as u64);
            let final_factor = last.corrected.factor.matrix();
            let z = gaussian_vector(&mut rng, final_factor.ncols());
            let mut x = &last.corrected.mean + final_factor * z;
            let mut path = vec![x.clone()];
            for kernel in kernels.iter().rev() {
                let z = gaussian_vector(&mut rng, kernel.noise_factor.rank());
                x = kernel.gain_apply_vec(&x) + &kernel.shift + kernel.noise_factor.matrix() * z;
                path.push(x.clone());
            }
            path.reverse();
            path
        })
        .collect();
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::{filter_pass, DiscreteDynamics, NoiseModel, ObservationModel, ObservationStep};
    use crate::linalg::gaussian_matrix;
    use crate::operator::{DenseOperator, ScaledIdentity};
    use std::sync::Arc;

    fn random(n: usize, k: usize, seed: u64) -> DMatrix<f64> {
        gaussian_matrix(&mut seeded_rng(seed, 0), n, k)
    }

    fn steps(n: usize, m: usize, count: usize, c: Option<DMatrix<f64>>, seed: u64) -> Vec<ObservationStep> {
        let c = c.unwrap_or_else(|| random(m, n, seed));
        let obs = Arc::new(ObservationModel::new(DenseOperator::arc(c), NoiseModel::Diagonal(DVector::from_element(m, 0.7))).unwrap());
        (0..count)
            .map(|i| ObservationStep {
                time: i as f64,
                model: obs.clone(),
                y: Some(gaussian_vector(&mut seeded_rng(seed, i as u64 + 1), m)),
            })
            .collect()
    }

    #[test]
    fn single_step_smoothing_is_filtering() {
        let n = 4;
        let init = SqrtGaussian::new(DVector::zeros(n), LowRankFactor::new(random(n, 2, 1)).unwrap()).unwrap();
        let mut dyn_ = DiscreteDynamics { phi: Arc::new(ScaledIdentity::identity(n)), q_sqrt: None };
        let trace = filter_pass(&mut dyn_, &steps(n, 2, 1, None, 2), init, 2).unwrap();
        let s = smooth_pass(&trace).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].mean, trace.records[0].corrected.mean);
    }

    #[test]
    fn deterministic_identity_transition_has_no_backward_noise() {
        let n = 5;
        let init = SqrtGaussian::new(DVector::from_element(n, 0.3), LowRankFactor::new(random(n, 3, 3)).unwrap()).unwrap();
        let mut dyn_ = DiscreteDynamics { phi: Arc::new(ScaledIdentity::identity(n)), q_sqrt: None };
        // Blind measurements keep Σ_l = Π_{l+1}.
        let trace = filter_pass(&mut dyn_, &steps(n, 2, 2, Some(DMatrix::zeros(2, n)), 4), init, 3).unwrap();
        let k = build_backward_kernel(&trace.records[0], &trace.records[1]).unwrap();
        assert!(k.noise_factor.outer().norm() < 1e-10);
        // G projects onto the span of Σ_l, so the shift keeps the rest of μ.
        let range = trace.records[0].corrected.factor.matrix();
        let mu = &trace.records[0].corrected.mean;
        let q = range.clone().qr().q();
        let expected = mu - &q * q.tr_mul(mu);
        assert!((&k.shift - expected).norm() < 1e-10);
        assert!((k.gain_apply(range) - range).norm() < 1e-10 * range.norm());
    }

    #[test]
    fn degenerate_posterior_samples_equal_the_mean_path() {
        let n = 3;
        let init = SqrtGaussian::new(DVector::from_element(n, 1.0), LowRankFactor::zeros(n, 2)).unwrap();
        let mut dyn_ = DiscreteDynamics { phi: DenseOperator::arc(random(n, n, 5) * 0.5), q_sqrt: None };
        let trace = filter_pass(&mut dyn_, &steps(n, 2, 3, None, 6), init, 2).unwrap();
        let smooth = smooth_pass(&trace).unwrap();
        for path in sample_posterior(&trace, 4, 7).unwrap() {
            for (x, s) in path.iter().zip(&smooth) {
                assert!((x - &s.mean).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let n = 4;
        let init = SqrtGaussian::new(DVector::zeros(n), LowRankFactor::new(random(n, n, 8)).unwrap()).unwrap();
        let q = LowRankFactor::new(random(n, n, 9) * 0.3).unwrap();
        let mut dyn_ = DiscreteDynamics { phi: DenseOperator::arc(random(n, n, 10) * 0.4), q_sqrt: Some(q) };
        let trace = filter_pass(&mut dyn_, &steps(n, 2, 3, None, 11), init, n).unwrap();
        let a = sample_posterior(&trace, 5, 12).unwrap();
        let b = sample_posterior(&trace, 5, 12).unwrap();
        assert_eq!(a, b);
    }
}
