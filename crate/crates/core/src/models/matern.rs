//! Separable spatio-temporal Matérn priors `GP(0, k_t ⊗ k_x)` in state-space
//! form. The temporal process is a companion-form SDE of order `d`; space
//! enters through a dense Gram matrix over the grid points. States are
//! ordered `i_t · n_x + i_x`, so block `i_t` holds the `i_t`-th time
//! derivative of the field.

use std::sync::Arc;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;

use super::{data::observe, sqrt_columns, Dynamics, InitialDistribution, Problem};
use crate::error::{Error, Result};
use crate::filter::ObservationModel;
use crate::linalg::{gaussian_matrix, psd_sqrt, seeded_rng, symmetrize};
use crate::operator::{DenseOperator, KroneckerOperator, Op, ScaledIdentity, SelectionOperator};
use crate::sde::LtiSdeModel;

/// Jitter added to a spatial Gram matrix with negative eigenvalues, relative
/// to its mean diagonal.
pub const SPATIAL_JITTER: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Smoothness {
    Half,
    ThreeHalves,
    FiveHalves,
}

impl Smoothness {
    pub fn nu(self) -> f64 {
        match self {
            Smoothness::Half => 0.5,
            Smoothness::ThreeHalves => 1.5,
            Smoothness::FiveHalves => 2.5,
        }
    }

    /// State dimension of the temporal SDE, `ν + 1/2`.
    pub fn order(self) -> usize {
        match self {
            Smoothness::Half => 1,
            Smoothness::ThreeHalves => 2,
            Smoothness::FiveHalves => 3,
        }
    }

    pub fn from_nu(nu: f64) -> Result<Self> {
        match nu {
            0.5 => Ok(Smoothness::Half),
            1.5 => Ok(Smoothness::ThreeHalves),
            2.5 => Ok(Smoothness::FiveHalves),
            other => Err(Error::InvalidArgument(format!("Matérn smoothness must be 0.5, 1.5 or 2.5, got {other}"))),
        }
    }
}

/// Which times of the simulation grid carry data.
#[derive(Debug, Clone, PartialEq)]
pub enum DataTimes {
    All,
    /// This many distinct grid times drawn uniformly.
    Random(usize),
}

/// Which field components are measured at a data time.
#[derive(Debug, Clone, PartialEq)]
pub enum Observed {
    /// Every grid location.
    Full,
    /// This many distinct locations, drawn afresh at each data time.
    Random(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaternScenario {
    /// Grid points, one row each, in one or two dimensions.
    pub spatial_grid: DMatrix<f64>,
    pub smoothness: Smoothness,
    pub lengthscale_t: f64,
    pub lengthscale_x: f64,
    pub scale_t: f64,
    pub scale_x: f64,
    pub noise_std: f64,
    pub start: f64,
    pub dt: f64,
    /// Simulation grid size; times are `start + l · dt`.
    pub steps: usize,
    pub data_times: DataTimes,
    pub observed: Observed,
    pub seed: u64,
}

impl MaternScenario {
    fn validate(&self) -> Result<()> {
        let positive = [self.lengthscale_t, self.lengthscale_x, self.scale_t, self.scale_x, self.noise_std, self.dt];
        if positive.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument("Matérn lengthscales, scales, noise and dt must be positive".into()));
        }
        let nx = self.spatial_grid.nrows();
        if nx == 0 || self.spatial_grid.ncols() == 0 || self.steps == 0 {
            return Err(Error::InvalidArgument("Matérn scenario needs grid points and at least one time".into()));
        }
        if let DataTimes::Random(k) = self.data_times {
            if k == 0 || k > self.steps {
                return Err(Error::InvalidArgument(format!("cannot draw {k} data times from {} grid times", self.steps)));
            }
        }
        if let Observed::Random(k) = self.observed {
            if k == 0 || k > nx {
                return Err(Error::InvalidArgument(format!("cannot observe {k} of {nx} locations")));
            }
        }
        Ok(())
    }
}

/// `lo, lo + step, …` up to `hi` inclusive, one point per row.
pub fn grid_1d(lo: f64, hi: f64, step: f64) -> DMatrix<f64> {
    let count = ((hi - lo) / step).round() as usize + 1;
    DMatrix::from_fn(count, 1, |i, _| lo + i as f64 * step)
}

/// Tensor grid of [`grid_1d`] with itself, first coordinate fastest.
pub fn grid_2d(lo: f64, hi: f64, step: f64) -> DMatrix<f64> {
    let axis = grid_1d(lo, hi, step);
    let k = axis.nrows();
    DMatrix::from_fn(k * k, 2, |i, j| if j == 0 { axis[i % k] } else { axis[i / k] })
}

/// Drift `A_t` and diffusion Gram `q L Lᵀ` of the temporal Matérn SDE with
/// variance `scale` and lengthscale `ell`; `λ = √(2ν) / ℓ`.
pub fn temporal_sde(smoothness: Smoothness, ell: f64, scale: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let lam = (2.0 * smoothness.nu()).sqrt() / ell;
    let d = smoothness.order();
    let (a, q) = match smoothness {
        Smoothness::Half => (DMatrix::from_element(1, 1, -lam), 2.0 * scale * lam),
        Smoothness::ThreeHalves => (
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -lam * lam, -2.0 * lam]),
            4.0 * scale * lam.powi(3),
        ),
        Smoothness::FiveHalves => (
            DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, -lam.powi(3), -3.0 * lam * lam, -3.0 * lam]),
            16.0 / 3.0 * scale * lam.powi(5),
        ),
    };
    let mut g = DMatrix::zeros(d, d);
    g[(d - 1, d - 1)] = q;
    (a, g)
}

/// Solve `A X + X Aᵀ + G = 0` through the vectorized linear system; meant
/// for small `A`.
pub fn stationary_covariance(a: &DMatrix<f64>, g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = a.nrows();
    let eye = DMatrix::identity(d, d);
    let op = eye.kronecker(a) + a.kronecker(&eye);
    let rhs = -DVector::from_column_slice(g.as_slice());
    let vec = op
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::InvalidArgument("drift has eigenvalues summing to zero; no stationary covariance".into()))?;
    Ok(symmetrize(&DMatrix::from_column_slice(d, d, vec.as_slice())))
}

/// Matérn kernel of the given smoothness at distance `r`.
pub fn matern_kernel(smoothness: Smoothness, ell: f64, scale: f64, r: f64) -> f64 {
    match smoothness {
        Smoothness::Half => scale * (-r / ell).exp(),
        Smoothness::ThreeHalves => {
            let s = 3f64.sqrt() * r / ell;
            scale * (1.0 + s) * (-s).exp()
        }
        Smoothness::FiveHalves => {
            let s = 5f64.sqrt() * r / ell;
            scale * (1.0 + s + s * s / 3.0) * (-s).exp()
        }
    }
}

pub fn spatial_gram(points: &DMatrix<f64>, smoothness: Smoothness, ell: f64, scale: f64) -> DMatrix<f64> {
    let n = points.nrows();
    DMatrix::from_fn(n, n, |i, j| {
        let r = (points.row(i) - points.row(j)).norm();
        matern_kernel(smoothness, ell, scale, r)
    })
}

/// A built Matérn problem together with the pieces of its Kronecker
/// structure.
#[derive(Debug, Clone)]
pub struct MaternProblem {
    pub problem: Problem,
    pub model: Arc<LtiSdeModel>,
    pub temporal_drift: DMatrix<f64>,
    pub temporal_gram: DMatrix<f64>,
    pub temporal_stationary: DMatrix<f64>,
    pub spatial: Arc<DMatrix<f64>>,
    pub spatial_values: DVector<f64>,
    pub spatial_vectors: DMatrix<f64>,
    /// Jitter added to the spatial Gram matrix, if any.
    pub jitter: Option<f64>,
    /// Simulation grid and the state on it, including times without data.
    pub grid_times: Vec<f64>,
    pub grid_truth: Vec<DVector<f64>>,
}

impl MaternProblem {
    pub fn n(&self) -> usize {
        self.problem.n()
    }

    /// Stationary covariance `Σ_t ⊗ K_x`.
    pub fn stationary_dense(&self) -> DMatrix<f64> {
        self.temporal_stationary.kronecker(self.spatial.as_ref())
    }

    /// Fraction of the stationary spectrum captured by the top `r`
    /// eigenvalues.
    pub fn spectrum_fraction(&self, r: usize) -> f64 {
        let t = self.temporal_stationary.clone().symmetric_eigen().eigenvalues;
        let mut products: Vec<f64> = t
            .iter()
            .flat_map(|&a| self.spatial_values.iter().map(move |&b| a.max(0.0) * b.max(0.0)))
            .collect();
        products.sort_by(|a, b| b.total_cmp(a));
        let total: f64 = products.iter().sum();
        products.iter().take(r).sum::<f64>() / total
    }
}

/// Temporal transition `e^{A_t Δt}` and exact temporal noise
/// `Σ_t − e^{A_t Δt} Σ_t e^{A_tᵀ Δt}`, valid because the process starts
/// stationary.
fn temporal_step(a: &DMatrix<f64>, stationary: &DMatrix<f64>, dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let phi = (a * dt).exp();
    let q = symmetrize(&(stationary - &phi * stationary * phi.transpose()));
    (phi, q)
}

pub fn build_matern(s: &MaternScenario) -> Result<MaternProblem> {
    s.validate()?;
    let nx = s.spatial_grid.nrows();
    let d = s.smoothness.order();
    let (a_t, g_t) = temporal_sde(s.smoothness, s.lengthscale_t, s.scale_t);
    let sigma_t = stationary_covariance(&a_t, &g_t)?;

    let mut k_x = spatial_gram(&s.spatial_grid, s.smoothness, s.lengthscale_x, s.scale_x);
    let mut eig = k_x.clone().symmetric_eigen();
    let mut jitter = None;
    if eig.eigenvalues.min() < 0.0 {
        let j = SPATIAL_JITTER * k_x.trace() / nx as f64;
        warn!("spatial Gram matrix has eigenvalue {:.3e}; adding jitter {j:.3e}", eig.eigenvalues.min());
        for i in 0..nx {
            k_x[(i, i)] += j;
        }
        eig.eigenvalues.add_scalar_mut(j);
        jitter = Some(j);
    }
    let spatial = Arc::new(k_x);

    let identity: Op = Arc::new(ScaledIdentity::identity(nx));
    let drift: Op = Arc::new(KroneckerOperator::new(a_t.clone(), identity.clone())?);
    let gram: Op = Arc::new(KroneckerOperator::new(g_t.clone(), Arc::new(DenseOperator(spatial.as_ref().clone())))?);
    let (a_phi, id_phi) = (a_t.clone(), identity.clone());
    let (a_q, s_q, k_q) = (a_t.clone(), sigma_t.clone(), spatial.clone());
    let model = LtiSdeModel::new(drift, gram, nx)?
        .with_transition(Arc::new(move |dt| {
            let phi = (&a_phi * dt).exp();
            Ok(Arc::new(KroneckerOperator::new(phi, id_phi.clone())?) as Op)
        }))
        .with_exact_noise(Arc::new(move |dt| Ok(temporal_step(&a_q, &s_q, dt).1.kronecker(k_q.as_ref()))));
    let model = Arc::new(model);

    // Ground truth on the simulation grid from a stationary draw.
    let grid_times: Vec<f64> = (0..s.steps).map(|l| s.start + l as f64 * s.dt).collect();
    let mut rng = seeded_rng(s.seed, 0x3a);
    let s_sqrt = sqrt_columns(&eig.eigenvectors, &eig.eigenvalues);
    let t_eig = sigma_t.clone().symmetric_eigen();
    let t_sqrt = sqrt_columns(&t_eig.eigenvectors, &t_eig.eigenvalues);
    let (phi_t, q_t) = temporal_step(&a_t, &sigma_t, s.dt);
    let (q_t_sqrt, _) = psd_sqrt(&q_t);
    let mut state = &s_sqrt * gaussian_matrix(&mut rng, nx, d) * t_sqrt.transpose();
    let mut grid_truth = Vec::with_capacity(s.steps);
    grid_truth.push(DVector::from_column_slice(state.as_slice()));
    for _ in 1..s.steps {
        let noise = &s_sqrt * gaussian_matrix(&mut rng, nx, d) * q_t_sqrt.transpose();
        state = &state * phi_t.transpose() + noise;
        grid_truth.push(DVector::from_column_slice(state.as_slice()));
    }

    let data_idx: Vec<usize> = match s.data_times {
        DataTimes::All => (0..s.steps).collect(),
        DataTimes::Random(k) => {
            let mut idx = sample(&mut seeded_rng(s.seed, 0x71), s.steps, k).into_vec();
            idx.sort_unstable();
            idx
        }
    };
    let times: Vec<f64> = data_idx.iter().map(|&i| grid_times[i]).collect();
    let truth: Vec<DVector<f64>> = data_idx.iter().map(|&i| grid_truth[i].clone()).collect();

    let n = nx * d;
    let models = match s.observed {
        Observed::Full => {
            let c = Arc::new(SelectionOperator::new(n, (0..nx).collect())?);
            let obs = Arc::new(ObservationModel::isotropic(c, s.noise_std)?);
            vec![Some(obs); times.len()]
        }
        Observed::Random(k) => {
            let mut rng = seeded_rng(s.seed, 0xc0);
            (0..times.len())
                .map(|_| {
                    let mut idx = sample(&mut rng, nx, k).into_vec();
                    idx.sort_unstable();
                    let c = Arc::new(SelectionOperator::new(n, idx)?);
                    Ok(Some(Arc::new(ObservationModel::isotropic(c, s.noise_std)?)))
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    let observations = observe(&times, &truth, &models, s.seed)?;

    let init = InitialDistribution::Kronecker {
        temporal_values: t_eig.eigenvalues.clone(),
        temporal_vectors: t_eig.eigenvectors.clone(),
        spatial_values: eig.eigenvalues.clone(),
        spatial_vectors: eig.eigenvectors.clone(),
    };
    let problem = Problem { dynamics: Dynamics::Continuous(model.clone()), init, times, observations, truth };
    Ok(MaternProblem {
        problem,
        model,
        temporal_drift: a_t,
        temporal_gram: g_t,
        temporal_stationary: sigma_t,
        spatial,
        spatial_values: eig.eigenvalues,
        spatial_vectors: eig.eigenvectors,
        jitter,
        grid_times,
        grid_truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::{dense_lyapunov_solution, discretize_transition, exact_process_noise};

    fn scenario(grid: DMatrix<f64>, smoothness: Smoothness, ell_x: f64) -> MaternScenario {
        MaternScenario {
            spatial_grid: grid,
            smoothness,
            lengthscale_t: 0.8,
            lengthscale_x: ell_x,
            scale_t: 1.3,
            scale_x: 0.7,
            noise_std: 0.1,
            start: 0.1,
            dt: 0.1,
            steps: 4,
            data_times: DataTimes::All,
            observed: Observed::Full,
            seed: 1,
        }
    }

    #[test]
    fn ou_closed_form() {
        let (ell, var) = (0.5, 2.0);
        let (a, g) = temporal_sde(Smoothness::Half, ell, var);
        assert!((a[(0, 0)] + 1.0 / ell).abs() < 1e-15);
        let s = stationary_covariance(&a, &g).unwrap();
        assert!((s[(0, 0)] - var).abs() < 1e-12);
    }

    #[test]
    fn temporal_stationary_variances_match_kernel_scale() {
        for sm in [Smoothness::Half, Smoothness::ThreeHalves, Smoothness::FiveHalves] {
            let (ell, var) = (0.7, 1.9);
            let (a, g) = temporal_sde(sm, ell, var);
            let s = stationary_covariance(&a, &g).unwrap();
            assert!((s[(0, 0)] - var).abs() < 1e-10 * var, "{sm:?}");
            let residual = &a * &s + &s * a.transpose() + &g;
            assert!(residual.norm() < 1e-10 * g.norm());
            // The field's stationary autocovariance is the Matérn kernel:
            // Cov(f(t + τ), f(t)) = [e^{Aτ} Σ]_{00}.
            for tau in [0.1, 0.5, 1.3] {
                let k = ((&a * tau).exp() * &s)[(0, 0)];
                assert!((k - matern_kernel(sm, ell, var, tau)).abs() < 1e-10, "{sm:?} τ = {tau}");
            }
        }
    }

    #[test]
    fn sweep_grid_has_441_points() {
        let g = grid_2d(0.0, 2.0, 0.1);
        assert_eq!(g.nrows(), 441);
        assert_eq!(grid_1d(0.0, 20.0, 0.1).nrows(), 201);
    }

    #[test]
    fn kronecker_stationary_covariance_solves_dense_lyapunov() {
        let p = build_matern(&scenario(grid_1d(0.0, 1.0, 0.1), Smoothness::ThreeHalves, 0.3)).unwrap();
        let n = p.n();
        assert_eq!(n, 22);
        let a = p.model.drift().to_dense();
        let g = p.model.diffusion_gram().to_dense();
        let sigma = p.stationary_dense();
        let eye = DMatrix::identity(n, n);
        let op = eye.kronecker(&a) + a.kronecker(&eye);
        let vec = op.lu().solve(&-DVector::from_column_slice(g.as_slice())).unwrap();
        let oracle = DMatrix::from_column_slice(n, n, vec.as_slice());
        assert!((&sigma - &oracle).norm() < 1e-8 * oracle.norm());
        let init = p.problem.init.dense(100).unwrap().cov;
        assert!((init - &oracle).norm() < 1e-8 * oracle.norm());
    }

    #[test]
    fn structured_transition_and_noise_match_dense_forms() {
        let p = build_matern(&scenario(grid_2d(0.0, 1.0, 0.25), Smoothness::FiveHalves, 0.4)).unwrap();
        let dt = 0.13;
        let a = p.model.drift().to_dense();
        let phi = discretize_transition(&p.model, dt).unwrap().to_dense();
        assert!((&phi - (&a * dt).exp()).norm() < 1e-10 * phi.norm());
        let q = exact_process_noise(&p.model, dt, 512).unwrap();
        let n = p.n();
        let oracle = dense_lyapunov_solution(&a, &p.model.diffusion_gram().to_dense(), &DMatrix::zeros(n, n), dt);
        assert!((&q - &oracle).norm() < 1e-8 * oracle.norm());
    }

    #[test]
    fn kronecker_operators_match_dense_products() {
        let p = build_matern(&scenario(grid_1d(0.0, 1.0, 0.05), Smoothness::ThreeHalves, 0.2)).unwrap();
        let x = gaussian_matrix(&mut seeded_rng(4, 0), p.n(), 3);
        let a = p.temporal_drift.kronecker(&DMatrix::identity(21, 21));
        let g = p.temporal_gram.kronecker(p.spatial.as_ref());
        assert!((p.model.drift().apply_mat(&x) - &a * &x).norm() < 1e-10 * x.norm());
        assert!((p.model.diffusion_gram().apply_mat(&x) - &g * &x).norm() < 1e-10 * (&g * &x).norm());
    }

    #[test]
    fn spectrum_fraction_grows_with_spatial_lengthscale() {
        let grid = grid_2d(0.0, 2.0, 0.2);
        let fractions: Vec<f64> = [0.01, 0.1, 0.25, 1.0]
            .iter()
            .map(|&ell| {
                let mut s = scenario(grid.clone(), Smoothness::Half, ell);
                s.steps = 1;
                build_matern(&s).unwrap().spectrum_fraction(10)
            })
            .collect();
        for w in fractions.windows(2) {
            assert!(w[1] > w[0], "{fractions:?}");
        }
    }

    #[test]
    fn random_data_times_and_components() {
        let mut s = scenario(grid_1d(0.0, 2.0, 0.1), Smoothness::Half, 0.5);
        s.steps = 50;
        s.data_times = DataTimes::Random(10);
        s.observed = Observed::Random(7);
        let p = build_matern(&s).unwrap();
        assert_eq!(p.problem.times.len(), 10);
        assert!(p.problem.times.windows(2).all(|w| w[1] > w[0]));
        assert!(p.problem.observations.iter().all(|o| o.model.m() == 7 && o.y.is_some()));
        for (t, x) in p.problem.times.iter().zip(&p.problem.truth) {
            let i = p.grid_times.iter().position(|g| g == t).unwrap();
            assert_eq!(x, &p.grid_truth[i]);
        }
    }

    #[test]
    fn coincident_points_trigger_jitter() {
        let grid = DMatrix::from_column_slice(6, 1, &[0.0, 0.0, 0.0, 1e-9, 1e-9, 1e-9]);
        let p = build_matern(&scenario(grid, Smoothness::FiveHalves, 1.0)).unwrap();
        if let Some(j) = p.jitter {
            assert!(j > 0.0);
            assert!(p.spatial_values.min() > -j);
        }
        assert!(p.problem.init.dense(100).is_ok());
    }
}
