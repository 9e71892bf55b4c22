//! Benchmark problems: linear advection, separable spatio-temporal Matérn
//! priors, and a small-rank subspace system.

pub mod advection;
pub mod data;
pub mod matern;
pub mod random;
pub mod subspace;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::baselines::{
    DenseGaussian, DenseTransitionSource, Ensemble, ExactDenseDynamics, ExactNoiseDynamics, FixedDenseDynamics,
};
use crate::dlra::DlraConfig;
use crate::error::{Error, Result};
use crate::filter::{ContinuousDynamics, DiscreteDynamics, ObservationStep, SqrtGaussian, TransitionSource};
use crate::linalg::{gaussian_matrix, seeded_rng, truncated_svd, LowRankFactor};
use crate::operator::Op;
use crate::sde::LtiSdeModel;

pub use advection::{build_advection, AdvectionScenario};
pub use data::{export_series, generate_on_model_data, import_series, observe, SeriesPoint};
pub use matern::{build_matern, MaternProblem, MaternScenario, Smoothness};
pub use random::{random_stable_problem, RandomSystemSpec};
pub use subspace::{build_subspace_problem, SubspaceProblem, SubspaceScenario};

/// How a problem moves its state between observation times.
#[derive(Debug, Clone)]
pub enum Dynamics {
    /// A continuous-time prior discretized per step; the reduced-rank filter
    /// gets its process noise from the low-rank Lyapunov integrator.
    Continuous(Arc<LtiSdeModel>),
    /// A fixed discrete transition with an exact process-noise factor.
    Discrete { phi: Op, q_sqrt: Option<LowRankFactor> },
}

impl Dynamics {
    pub fn n(&self) -> usize {
        match self {
            Dynamics::Continuous(m) => m.n(),
            Dynamics::Discrete { phi, .. } => phi.in_dim(),
        }
    }

    pub fn reduced_rank_source(&self, rank: usize, config: DlraConfig, seed: u64) -> Box<dyn TransitionSource + Send> {
        match self {
            Dynamics::Continuous(m) => Box::new(ContinuousDynamics::new(m.clone(), rank, config, seed)),
            Dynamics::Discrete { phi, q_sqrt } => Box::new(DiscreteDynamics { phi: phi.clone(), q_sqrt: q_sqrt.clone() }),
        }
    }

    /// Transitions with the exact process noise as a full factor, for the
    /// ensemble filters, which sample it.
    pub fn sampling_source(&self, cap: usize) -> Result<Box<dyn TransitionSource + Send>> {
        Ok(match self {
            Dynamics::Continuous(m) => Box::new(ExactNoiseDynamics::new(m.clone(), cap)?),
            Dynamics::Discrete { phi, q_sqrt } => Box::new(DiscreteDynamics { phi: phi.clone(), q_sqrt: q_sqrt.clone() }),
        })
    }

    pub fn dense_source(&self, cap: usize) -> Result<Box<dyn DenseTransitionSource + Send>> {
        let n = self.n();
        if n > cap {
            return Err(Error::DenseCapExceeded { n, cap });
        }
        Ok(match self {
            Dynamics::Continuous(m) => Box::new(ExactDenseDynamics::new(m.clone(), cap)?),
            Dynamics::Discrete { phi, q_sqrt } => Box::new(FixedDenseDynamics {
                phi: phi.clone(),
                q: q_sqrt.as_ref().map(|q| Arc::new(q.outer())),
            }),
        })
    }
}

/// Initial distribution in whichever form keeps it cheap.
#[derive(Debug, Clone)]
pub enum InitialDistribution {
    /// `N(mean, F Fᵀ)`.
    Factored { mean: DVector<f64>, factor: DMatrix<f64> },
    /// An ensemble whose members are `basis · coeffs[:, j]`; the moments are
    /// the sample moments of all members.
    Ensemble { basis: DMatrix<f64>, coeffs: DMatrix<f64> },
    /// Zero mean, covariance `temporal ⊗ spatial` given by both eigensystems.
    Kronecker {
        temporal_values: DVector<f64>,
        temporal_vectors: DMatrix<f64>,
        spatial_values: DVector<f64>,
        spatial_vectors: DMatrix<f64>,
    },
}

impl InitialDistribution {
    pub fn n(&self) -> usize {
        match self {
            InitialDistribution::Factored { mean, .. } => mean.len(),
            InitialDistribution::Ensemble { basis, .. } => basis.nrows(),
            InitialDistribution::Kronecker { temporal_values, spatial_values, .. } => {
                temporal_values.len() * spatial_values.len()
            }
        }
    }

    pub fn mean(&self) -> DVector<f64> {
        match self {
            InitialDistribution::Factored { mean, .. } => mean.clone(),
            InitialDistribution::Ensemble { basis, coeffs } => basis * coeffs.column_mean(),
            InitialDistribution::Kronecker { .. } => DVector::zeros(self.n()),
        }
    }

    /// Rank-`rank` factor of the initial covariance from its leading
    /// eigenpairs, zero-padded when the covariance has lower rank.
    pub fn reduced_rank(&self, rank: usize) -> Result<SqrtGaussian> {
        let n = self.n();
        if rank == 0 || rank > n {
            return Err(Error::RankTooLarge { rank, max: n });
        }
        let factor = match self {
            InitialDistribution::Factored { factor, .. } => {
                let k = rank.min(factor.ncols()).min(n);
                truncated_svd(factor, k)?.scaled_left()
            }
            InitialDistribution::Ensemble { basis, coeffs } => {
                let (q, core) = ensemble_core(basis, coeffs);
                let eig = core.symmetric_eigen();
                let order = descending(&eig.eigenvalues);
                let k = rank.min(order.len());
                let mut f = DMatrix::zeros(n, k);
                for (j, &i) in order.iter().take(k).enumerate() {
                    let s = eig.eigenvalues[i].max(0.0).sqrt();
                    f.set_column(j, &(&q * eig.eigenvectors.column(i) * s));
                }
                f
            }
            InitialDistribution::Kronecker { temporal_values, temporal_vectors, spatial_values, spatial_vectors } => {
                let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(n);
                for (a, &ta) in temporal_values.iter().enumerate() {
                    for (i, &si) in spatial_values.iter().enumerate() {
                        pairs.push((ta.max(0.0) * si.max(0.0), a, i));
                    }
                }
                pairs.sort_by(|x, y| y.0.total_cmp(&x.0));
                let nx = spatial_values.len();
                let mut f = DMatrix::zeros(n, rank);
                for (j, &(value, a, i)) in pairs.iter().take(rank).enumerate() {
                    let s = value.sqrt();
                    let p = temporal_vectors.column(a);
                    let q = spatial_vectors.column(i);
                    for b in 0..p.len() {
                        f.view_mut((b * nx, j), (nx, 1)).copy_from(&(q * (p[b] * s)));
                    }
                }
                f
            }
        };
        let factor = LowRankFactor::new(factor.resize_horizontally(rank, 0.0))?;
        SqrtGaussian::new(self.mean(), factor)
    }

    pub fn dense(&self, cap: usize) -> Result<DenseGaussian> {
        let n = self.n();
        if n > cap {
            return Err(Error::DenseCapExceeded { n, cap });
        }
        let cov = match self {
            InitialDistribution::Factored { factor, .. } => factor * factor.transpose(),
            InitialDistribution::Ensemble { basis, coeffs } => {
                let (q, core) = ensemble_core(basis, coeffs);
                &q * core * q.transpose()
            }
            InitialDistribution::Kronecker { temporal_values, temporal_vectors, spatial_values, spatial_vectors } => {
                let t = temporal_vectors * DMatrix::from_diagonal(temporal_values) * temporal_vectors.transpose();
                let s = spatial_vectors * DMatrix::from_diagonal(spatial_values) * spatial_vectors.transpose();
                t.kronecker(&s)
            }
        };
        DenseGaussian::new(self.mean(), cov)
    }

    /// `size`-member initial ensemble. Stored ensembles contribute their
    /// first `size` members; otherwise members are drawn with `seed`.
    pub fn ensemble(&self, size: usize, seed: u64) -> Result<Ensemble> {
        let n = self.n();
        let members = match self {
            InitialDistribution::Ensemble { basis, coeffs } => {
                if size > coeffs.ncols() {
                    return Err(Error::InvalidArgument(format!(
                        "ensemble size {size} exceeds the {} stored members",
                        coeffs.ncols()
                    )));
                }
                basis * coeffs.columns(0, size)
            }
            InitialDistribution::Factored { mean, factor } => {
                let z = gaussian_matrix(&mut seeded_rng(seed, 0x1e), factor.ncols(), size);
                let mut x = factor * z;
                for mut c in x.column_iter_mut() {
                    c += mean;
                }
                x
            }
            InitialDistribution::Kronecker { temporal_values, temporal_vectors, spatial_values, spatial_vectors } => {
                let mut rng = seeded_rng(seed, 0x1e);
                let t_sqrt = sqrt_columns(temporal_vectors, temporal_values);
                let s_sqrt = sqrt_columns(spatial_vectors, spatial_values);
                let mut x = DMatrix::zeros(n, size);
                for j in 0..size {
                    let z = gaussian_matrix(&mut rng, spatial_values.len(), temporal_values.len());
                    let sample = &s_sqrt * z * t_sqrt.transpose();
                    x.set_column(j, &DVector::from_column_slice(sample.as_slice()));
                }
                x
            }
        };
        Ensemble::new(members)
    }
}

/// `V diag(sqrt(max(w, 0)))`.
pub(crate) fn sqrt_columns(vectors: &DMatrix<f64>, values: &DVector<f64>) -> DMatrix<f64> {
    let mut out = vectors.clone();
    for (mut c, &w) in out.column_iter_mut().zip(values.iter()) {
        c *= w.max(0.0).sqrt();
    }
    out
}

fn descending(values: &DVector<f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    idx
}

/// Orthonormal basis `Q` of the ensemble span and the sample covariance
/// expressed in it, so the covariance is `Q core Qᵀ`.
fn ensemble_core(basis: &DMatrix<f64>, coeffs: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let count = coeffs.ncols();
    let mean = coeffs.column_mean();
    let mut centered = coeffs.clone();
    for mut c in centered.column_iter_mut() {
        c -= &mean;
    }
    let qr = basis.clone().qr();
    let (q, r) = (qr.q(), qr.r());
    let reduced = r * centered;
    let core = &reduced * reduced.transpose() / (count.max(2) - 1) as f64;
    (q, core)
}

/// A fully specified filtering problem.
#[derive(Debug, Clone)]
pub struct Problem {
    pub dynamics: Dynamics,
    pub init: InitialDistribution,
    pub times: Vec<f64>,
    pub observations: Vec<ObservationStep>,
    /// Ground-truth state at each of `times`.
    pub truth: Vec<DVector<f64>>,
}

impl Problem {
    pub fn n(&self) -> usize {
        self.dynamics.n()
    }

    pub fn steps(&self) -> usize {
        self.times.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ensemble_init_matches_member_statistics() {
        let basis = gaussian_matrix(&mut seeded_rng(1, 0), 12, 4);
        let coeffs = gaussian_matrix(&mut seeded_rng(2, 0), 4, 9);
        let init = InitialDistribution::Ensemble { basis: basis.clone(), coeffs: coeffs.clone() };
        let members = Ensemble::new(&basis * &coeffs).unwrap();
        let dense = init.dense(100).unwrap();
        assert!((dense.cov.clone() - members.sample_cov()).norm() < 1e-10 * dense.cov.norm());
        assert!((dense.mean.clone() - members.mean()).norm() < 1e-12);
        let full = init.reduced_rank(4).unwrap();
        assert!((full.covariance() - &dense.cov).norm() < 1e-10 * dense.cov.norm());
        let padded = init.reduced_rank(6).unwrap();
        assert_eq!(padded.rank(), 6);
        assert!((padded.covariance() - &dense.cov).norm() < 1e-10 * dense.cov.norm());
    }

    #[test]
    fn kronecker_init_truncation_keeps_largest_products() {
        let t = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let s = DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.1, 0.5, 1.0, 0.5, 0.1, 0.5, 1.0]);
        let te = t.clone().symmetric_eigen();
        let se = s.clone().symmetric_eigen();
        let init = InitialDistribution::Kronecker {
            temporal_values: te.eigenvalues.clone(),
            temporal_vectors: te.eigenvectors.clone(),
            spatial_values: se.eigenvalues.clone(),
            spatial_vectors: se.eigenvectors.clone(),
        };
        let full = t.kronecker(&s);
        assert!((init.dense(10).unwrap().cov - &full).norm() < 1e-12);
        let r = 3;
        let approx = init.reduced_rank(r).unwrap().covariance();
        let oracle = truncated_svd(&full, r).unwrap().reconstruct();
        assert!((approx - oracle).norm() < 1e-10);
    }
}
