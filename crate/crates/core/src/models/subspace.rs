//! A high-dimensional system whose uncertainty lives in a small subspace.
//!
//! The state is `x = W z + (complement)` with orthonormal `W` (`n × k`).
//! Inside the span the dynamics are a stable `k × k` SDE, and both the
//! initial covariance and the process noise are supported on the span, so
//! every covariance of the filter has rank at most `k`.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::seq::index::sample;

use super::{data::observe, Dynamics, InitialDistribution, Problem};
use crate::error::{Error, Result};
use crate::filter::ObservationModel;
use crate::linalg::{gaussian_matrix, gaussian_vector, psd_sqrt, random_orthonormal, seeded_rng, LowRankFactor};
use crate::operator::{Op, SelectionOperator, SubspaceOperator};
use crate::sde::dense_lyapunov_solution;

#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceScenario {
    pub n: usize,
    /// Dimension of the span carrying all uncertainty.
    pub true_rank: usize,
    /// Observed components, drawn once.
    pub m: usize,
    pub noise_std: f64,
    pub dt: f64,
    /// Number of transitions; the problem has `steps + 1` times.
    pub steps: usize,
    /// Decay rate of the complement of the span.
    pub complement_rate: f64,
    pub seed: u64,
}

impl Default for SubspaceScenario {
    fn default() -> Self {
        Self { n: 1000, true_rank: 7, m: 50, noise_std: 0.1, dt: 0.1, steps: 20, complement_rate: 1.0, seed: 0 }
    }
}

/// The built problem plus its reduced description.
#[derive(Debug, Clone)]
pub struct SubspaceProblem {
    pub problem: Problem,
    pub basis: DMatrix<f64>,
    /// Reduced drift and diffusion Gram inside the span.
    pub drift: DMatrix<f64>,
    pub gram: DMatrix<f64>,
}

pub fn build_subspace_problem(s: &SubspaceScenario) -> Result<SubspaceProblem> {
    let k = s.true_rank;
    if k == 0 || k > s.n || s.m == 0 || s.m > s.n || !(s.noise_std > 0.0) || !(s.dt > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "subspace problem needs 0 < true_rank, m <= n and positive noise and dt (n = {}, rank = {}, m = {})",
            s.n, k, s.m
        )));
    }
    let mut rng = seeded_rng(s.seed, 0x5b);
    let basis = random_orthonormal(s.n, k, s.seed ^ 0x5b5b)?;

    // Stable reduced drift: negative definite symmetric part plus rotation.
    let g = gaussian_matrix(&mut rng, k, k);
    let skew = (&g - g.transpose()) * 0.5;
    let h = gaussian_matrix(&mut rng, k, k);
    let drift = skew - (&h * h.transpose() / k as f64) - DMatrix::identity(k, k) * 0.2;
    let b = gaussian_matrix(&mut rng, k, k);
    let gram = &b * b.transpose() / k as f64;

    let phi_red = (&drift * s.dt).exp();
    let q_red = dense_lyapunov_solution(&drift, &gram, &DMatrix::zeros(k, k), s.dt);
    let (q_red_sqrt, _) = psd_sqrt(&q_red);
    let phi: Op = Arc::new(SubspaceOperator::new(basis.clone(), phi_red, (-s.complement_rate * s.dt).exp())?);
    let q_sqrt = LowRankFactor::new(&basis * &q_red_sqrt)?;

    let init_core = gaussian_matrix(&mut rng, k, k);
    let init_factor = &basis * &init_core;
    let mean = gaussian_vector(&mut rng, s.n) * 0.1;

    let times: Vec<f64> = (0..=s.steps).map(|l| l as f64 * s.dt).collect();
    let mut truth = vec![&mean + &init_factor * gaussian_vector(&mut rng, k)];
    for l in 1..times.len() {
        let next = phi.apply(&truth[l - 1]) + q_sqrt.matrix() * gaussian_vector(&mut rng, k);
        truth.push(next);
    }

    let mut idx = sample(&mut seeded_rng(s.seed, 0x5c), s.n, s.m).into_vec();
    idx.sort_unstable();
    let obs = Arc::new(ObservationModel::isotropic(Arc::new(SelectionOperator::new(s.n, idx)?), s.noise_std)?);
    let observations = observe(&times, &truth, &vec![Some(obs); times.len()], s.seed)?;

    Ok(SubspaceProblem {
        problem: Problem {
            dynamics: Dynamics::Discrete { phi, q_sqrt: Some(q_sqrt) },
            init: InitialDistribution::Factored { mean, factor: init_factor },
            times,
            observations,
            truth,
        },
        basis,
        drift,
        gram,
    })
}
