//! Seeded random stable continuous-time systems for equivalence checks.

use std::sync::Arc;

use nalgebra::DMatrix;

use super::{data::generate_on_model_data, Dynamics, InitialDistribution, Problem};
use crate::error::Result;
use crate::filter::ObservationModel;
use crate::linalg::{gaussian_matrix, gaussian_vector, seeded_rng};
use crate::operator::DenseOperator;
use crate::sde::{LtiSdeModel, DEFAULT_DENSE_CAP};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomSystemSpec {
    pub n: usize,
    pub m: usize,
    /// Number of measurement times.
    pub steps: usize,
    pub dt: f64,
    pub noise_std: f64,
    pub seed: u64,
}

/// Drift with negative definite symmetric part, full-rank diffusion, dense
/// Gaussian measurement matrix and a full-rank initial covariance.
pub fn random_stable_problem(s: &RandomSystemSpec) -> Result<Problem> {
    let n = s.n;
    let mut rng = seeded_rng(s.seed, 0x7a);
    let g = gaussian_matrix(&mut rng, n, n);
    let h = gaussian_matrix(&mut rng, n, n);
    let drift = (&g - g.transpose()) * 0.5 - &h * h.transpose() / n as f64 - DMatrix::identity(n, n) * 0.1;
    let b = gaussian_matrix(&mut rng, n, n);
    let gram = &b * b.transpose() / n as f64;
    let model = Arc::new(LtiSdeModel::new(DenseOperator::arc(drift), DenseOperator::arc(gram), n)?);

    let c = gaussian_matrix(&mut rng, s.m, n) / (n as f64).sqrt();
    let obs = Arc::new(ObservationModel::isotropic(DenseOperator::arc(c), s.noise_std)?);
    let init_factor = gaussian_matrix(&mut rng, n, n) / (n as f64).sqrt();
    let mean = gaussian_vector(&mut rng, n);
    let x0 = &mean + &init_factor * gaussian_vector(&mut rng, n);

    let times: Vec<f64> = (0..s.steps).map(|l| l as f64 * s.dt).collect();
    let models = vec![Some(obs); times.len()];
    let (truth, observations) = generate_on_model_data(&model, x0, &times, &models, DEFAULT_DENSE_CAP, s.seed)?;
    Ok(Problem {
        dynamics: Dynamics::Continuous(model),
        init: InitialDistribution::Factored { mean, factor: init_factor },
        times,
        observations,
        truth,
    })
}
