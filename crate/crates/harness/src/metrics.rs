//! Accuracy metrics against the dense Kalman filter and calibration
//! statistics of Gaussian estimates.

use log::warn;
use nalgebra::{DMatrix, DVector};
use libm::erf;

use crate::error::{HarnessError, Result};

/// Marginal standard deviations below this make a Z-score unreliable; such
/// components are excluded and counted.
pub const ZSCORE_STD_FLOOR: f64 = 1e-12;

/// `sqrt` of the mean over all `(time, component)` pairs of squared mean
/// differences.
pub fn rmse(approx: &[DVector<f64>], reference: &[DVector<f64>]) -> Result<f64> {
    if approx.len() != reference.len() {
        return Err(HarnessError::Shape(format!("{} approximate means vs {} reference means", approx.len(), reference.len())));
    }
    let mut acc = MetricAccumulator::default();
    for (a, r) in approx.iter().zip(reference) {
        acc.add_mean(a, r)?;
    }
    Ok(acc.rmse())
}

/// `‖L Lᵀ − Σ‖_F / ‖Σ‖_F`, or `None` when `Σ = 0`.
pub fn step_cov_ratio(factor: &DMatrix<f64>, reference: &DMatrix<f64>) -> Result<Option<f64>> {
    let n = reference.nrows();
    if factor.nrows() != n || reference.ncols() != n {
        return Err(HarnessError::Shape(format!(
            "factor with {} rows vs {}×{} reference covariance",
            factor.nrows(),
            n,
            reference.ncols()
        )));
    }
    let scale = reference.norm();
    if scale == 0.0 {
        return Ok(None);
    }
    let mut diff = -reference.clone();
    diff.gemm(1.0, factor, &factor.transpose(), 1.0);
    Ok(Some(diff.norm() / scale))
}

/// `(1/N) Σ_l ‖L_l L_lᵀ − Σ_l‖_F / ‖Σ_l‖_F` over the steps whose reference
/// is nonzero.
pub fn cov_rel_frobenius(factors: &[DMatrix<f64>], reference: &[DMatrix<f64>]) -> Result<f64> {
    if factors.len() != reference.len() {
        return Err(HarnessError::Shape(format!("{} factors vs {} reference covariances", factors.len(), reference.len())));
    }
    let mut acc = MetricAccumulator::default();
    for (f, r) in factors.iter().zip(reference) {
        acc.add_cov(f, r)?;
    }
    Ok(acc.cov_rel_frobenius())
}

/// Streaming form of [`rmse`] and [`cov_rel_frobenius`] with per-step
/// maxima.
#[derive(Debug, Clone, Default)]
pub struct MetricAccumulator {
    sq_sum: f64,
    entries: usize,
    ratio_sum: f64,
    ratios: usize,
    /// Steps skipped because the reference covariance was zero.
    pub excluded_steps: usize,
    /// `max_l RMSE_l / ‖μ_l‖` (zero over zero counts as zero).
    pub max_step_rmse_ratio: f64,
    /// `max_l ‖L_l L_lᵀ − Σ_l‖_F / ‖Σ_l‖_F`.
    pub max_step_cov: f64,
}

impl MetricAccumulator {
    pub fn add_mean(&mut self, approx: &DVector<f64>, reference: &DVector<f64>) -> Result<()> {
        if approx.len() != reference.len() {
            return Err(HarnessError::Shape(format!("mean of length {} vs {}", approx.len(), reference.len())));
        }
        let sq = (approx - reference).norm_squared();
        self.sq_sum += sq;
        self.entries += approx.len();
        let step_rmse = (sq / approx.len().max(1) as f64).sqrt();
        let ratio = match (step_rmse, reference.norm()) {
            (0.0, _) => 0.0,
            (_, 0.0) => f64::INFINITY,
            (e, scale) => e / scale,
        };
        self.max_step_rmse_ratio = self.max_step_rmse_ratio.max(ratio);
        Ok(())
    }

    pub fn add_cov(&mut self, factor: &DMatrix<f64>, reference: &DMatrix<f64>) -> Result<()> {
        match step_cov_ratio(factor, reference)? {
            Some(r) => {
                self.ratio_sum += r;
                self.ratios += 1;
                self.max_step_cov = self.max_step_cov.max(r);
            }
            None => {
                if self.excluded_steps == 0 {
                    warn!("zero reference covariance; step excluded from the covariance metric");
                }
                self.excluded_steps += 1;
            }
        }
        Ok(())
    }

    pub fn rmse(&self) -> f64 {
        if self.entries == 0 {
            return f64::NAN;
        }
        (self.sq_sum / self.entries as f64).sqrt()
    }

    pub fn cov_rel_frobenius(&self) -> f64 {
        if self.ratios == 0 {
            return f64::NAN;
        }
        self.ratio_sum / self.ratios as f64
    }
}

/// Pooled Z-scores with the number of excluded components.
#[derive(Debug, Clone, Default)]
pub struct ZScores {
    pub scores: Vec<f64>,
    pub excluded: usize,
}

impl ZScores {
    /// `(ξ − reference) / λ` per component; components with
    /// `λ < ZSCORE_STD_FLOOR` are excluded and counted.
    pub fn add(&mut self, mean: &DVector<f64>, std: &DVector<f64>, reference: &DVector<f64>) -> Result<()> {
        if mean.len() != std.len() || mean.len() != reference.len() {
            return Err(HarnessError::Shape(format!(
                "Z-scores need equal lengths, got {}, {} and {}",
                mean.len(),
                std.len(),
                reference.len()
            )));
        }
        for i in 0..mean.len() {
            if std[i] < ZSCORE_STD_FLOOR || !std[i].is_finite() {
                self.excluded += 1;
            } else {
                self.scores.push((mean[i] - reference[i]) / std[i]);
            }
        }
        Ok(())
    }

    pub fn abs(&self) -> Vec<f64> {
        self.scores.iter().map(|z| z.abs()).collect()
    }
}

/// Z-scores of one estimate, see [`ZScores::add`].
pub fn zscores(mean: &DVector<f64>, std: &DVector<f64>, reference: &DVector<f64>) -> Result<ZScores> {
    let mut z = ZScores::default();
    z.add(mean, std, reference)?;
    Ok(z)
}

/// CDF of the Chi(1) distribution, the law of `|Z|` for standard normal `Z`.
pub fn chi1_cdf(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        erf(x / std::f64::consts::SQRT_2)
    }
}

/// One-sample Kolmogorov–Smirnov statistic of `samples` against Chi(1).
pub fn ks_chi1(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    let mut x = samples.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    x.iter().enumerate().fold(0.0, |d, (i, &v)| {
        let f = chi1_cdf(v);
        d.max(((i + 1) as f64 / n - f).max(f - i as f64 / n))
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistogramBin {
    pub lo: f64,
    /// `f64::INFINITY` for the overflow bin.
    pub hi: f64,
    pub count: usize,
    /// Count expected under Chi(1).
    pub expected: f64,
}

/// Histogram of `|z|` over `bins` equal bins on `[0, max_abs]` plus an
/// overflow bin.
pub fn chi1_histogram(abs_scores: &[f64], bins: usize, max_abs: f64) -> Vec<HistogramBin> {
    let width = max_abs / bins as f64;
    let total = abs_scores.len() as f64;
    let mut out: Vec<HistogramBin> = (0..=bins)
        .map(|b| {
            let lo = b as f64 * width;
            let hi = if b == bins { f64::INFINITY } else { lo + width };
            let upper = if b == bins { 1.0 } else { chi1_cdf(hi) };
            HistogramBin { lo, hi, count: 0, expected: total * (upper - chi1_cdf(lo)) }
        })
        .collect();
    for &z in abs_scores {
        let b = ((z / width).floor() as usize).min(bins);
        out[b].count += 1;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

/// Mean, sample standard deviation, min and max of the finite values.
pub fn spread(values: &[f64]) -> Spread {
    let v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return Spread { mean: f64::NAN, std: f64::NAN, min: f64::NAN, max: f64::NAN };
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    Spread {
        mean,
        std,
        min: v.iter().copied().fold(f64::INFINITY, f64::min),
        max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rrkf::linalg::{gaussian_vector, seeded_rng};

    fn random_vectors(count: usize, n: usize, seed: u64) -> Vec<DVector<f64>> {
        let mut rng = seeded_rng(seed, 0);
        (0..count).map(|_| gaussian_vector(&mut rng, n)).collect()
    }

    #[test]
    fn rmse_of_identical_inputs_is_zero() {
        let a = random_vectors(5, 4, 1);
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn rmse_of_constant_offset_is_the_offset() {
        let a = random_vectors(5, 4, 2);
        let b: Vec<DVector<f64>> = a.iter().map(|v| v.add_scalar(0.75)).collect();
        assert!((rmse(&b, &a).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn rmse_matches_a_flattened_recomputation() {
        let a = random_vectors(7, 6, 3);
        let b = random_vectors(7, 6, 4);
        let flat: Vec<f64> = a.iter().zip(&b).flat_map(|(x, y)| x.iter().zip(y.iter()).map(|(p, q)| (p - q) * (p - q))).collect();
        let oracle = (flat.iter().sum::<f64>() / flat.len() as f64).sqrt();
        assert!((rmse(&a, &b).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn rmse_rejects_shape_mismatch() {
        assert!(rmse(&random_vectors(3, 2, 0), &random_vectors(2, 2, 0)).is_err());
        assert!(rmse(&random_vectors(1, 2, 0), &random_vectors(1, 3, 0)).is_err());
    }

    #[test]
    fn covariance_metric_trivial_cases() {
        let l = DMatrix::from_fn(5, 2, |i, j| (i + 2 * j) as f64 * 0.3 - 0.5);
        let sigma = &l * l.transpose();
        assert!(cov_rel_frobenius(std::slice::from_ref(&l), std::slice::from_ref(&sigma)).unwrap() < 1e-15);
        let doubled = &l * std::f64::consts::SQRT_2;
        assert!((cov_rel_frobenius(&[doubled], &[sigma]).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn covariance_metric_matches_entrywise_recomputation() {
        let factors: Vec<DMatrix<f64>> = (0..4).map(|s| DMatrix::from_column_slice(6, 3, random_vectors(1, 18, s)[0].as_slice())).collect();
        let refs: Vec<DMatrix<f64>> = (0..4)
            .map(|s| {
                let b = DMatrix::from_column_slice(6, 6, random_vectors(1, 36, 100 + s)[0].as_slice());
                &b * b.transpose()
            })
            .collect();
        let mut oracle = 0.0;
        for (f, r) in factors.iter().zip(&refs) {
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..6 {
                for j in 0..6 {
                    let lij: f64 = (0..3).map(|k| f[(i, k)] * f[(j, k)]).sum();
                    num += (lij - r[(i, j)]).powi(2);
                    den += r[(i, j)].powi(2);
                }
            }
            oracle += (num / den).sqrt() / 4.0;
        }
        assert!((cov_rel_frobenius(&factors, &refs).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn zero_reference_steps_are_excluded() {
        let f = DMatrix::from_element(3, 1, 1.0);
        let mut acc = MetricAccumulator::default();
        acc.add_cov(&f, &DMatrix::zeros(3, 3)).unwrap();
        acc.add_cov(&f, &(&f * f.transpose())).unwrap();
        assert_eq!(acc.excluded_steps, 1);
        assert_eq!(acc.cov_rel_frobenius(), 0.0);
    }

    #[test]
    fn zscore_trivial_cases() {
        let mean = DVector::from_vec(vec![3.0, 1.0]);
        let z = zscores(&mean, &DVector::from_element(2, 1.0), &mean).unwrap();
        assert_eq!(z.scores, vec![0.0, 0.0]);
        let z = zscores(&DVector::from_vec(vec![1.0, -2.0]), &DVector::from_element(2, 1.0), &DVector::zeros(2)).unwrap();
        assert_eq!(z.scores, vec![1.0, -2.0]);
        let z = zscores(&DVector::from_vec(vec![1.0, 1.0]), &DVector::from_vec(vec![1e-13, 2.0]), &DVector::zeros(2)).unwrap();
        assert_eq!((z.scores.len(), z.excluded), (1, 1));
    }

    #[test]
    fn ks_statistic_is_small_under_the_null() {
        let draws = random_vectors(1, 100_000, 11)[0].iter().map(|z| z.abs()).collect::<Vec<_>>();
        let d = ks_chi1(&draws);
        assert!(d < 0.01, "{d}");
        let inflated: Vec<f64> = draws.iter().map(|z| 2.0 * z).collect();
        assert!(ks_chi1(&inflated) > 0.2);
    }

    #[test]
    fn chi1_cdf_known_values() {
        // P(|Z| ≤ 1) and P(|Z| ≤ 1.959964) for a standard normal.
        assert!((chi1_cdf(1.0) - 0.682_689_492_137_085_9).abs() < 1e-12, "{:e}", chi1_cdf(1.0) - 0.682_689_492_137_085_9);
        assert!((chi1_cdf(1.959_963_984_540_054) - 0.95).abs() < 1e-12);
    }

    #[test]
    fn histogram_counts_everything() {
        let x = vec![0.1, 0.2, 1.5, 7.0];
        let h = chi1_histogram(&x, 5, 5.0);
        assert_eq!(h.len(), 6);
        assert_eq!(h.iter().map(|b| b.count).sum::<usize>(), 4);
        assert_eq!(h[5].count, 1);
        assert!((h.iter().map(|b| b.expected).sum::<f64>() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn spread_statistics() {
        let s = spread(&[1.0, 2.0, 3.0, f64::NAN]);
        assert_eq!((s.mean, s.min, s.max), (2.0, 1.0, 3.0));
        assert!((s.std - 1.0).abs() < 1e-15);
    }
}
