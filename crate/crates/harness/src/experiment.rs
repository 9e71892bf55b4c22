//! Scenario runs: the dense Kalman filter once per problem as the oracle,
//! then every (method, rank, seed) cell in a work pool.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use rrkf::baselines::{dense_kf_pass, dense_rts_pass, DenseKalmanFilter, EnsembleFilter, EnsembleKind};
use rrkf::dlra::DlraConfig;
use rrkf::filter::{filter_pass, RrkfStepper};
use rrkf::models::{build_advection, build_matern, build_subspace_problem, Problem};
use rrkf::smoother::smooth_pass;

use crate::config::{ExperimentConfig, Method, ScenarioKind};
use crate::error::{HarnessError, Result};
use crate::metrics::{MetricAccumulator, ZScores};
use crate::output;

/// One problem instance of a scenario.
#[derive(Debug, Clone)]
pub struct PreparedScenario {
    /// `scenario` or `scenario:variant`, the first column of the results.
    pub label: String,
    pub kind: ScenarioKind,
    pub problem: Problem,
    pub oracle: Option<Oracle>,
}

/// Dense Kalman filter output kept for the metrics: means at every step,
/// covariances at the metric steps.
#[derive(Debug, Clone)]
pub struct Oracle {
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<Option<DMatrix<f64>>>,
    pub total_loglik: f64,
    pub wall_ms: f64,
    /// RTS means and marginal standard deviations (Z-score runs only).
    pub smoothed: Option<(Vec<DVector<f64>>, Vec<DVector<f64>>)>,
}

/// Settings shared by all cells of a run.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub dlra: DlraConfig,
    pub dense_cap: usize,
    pub metric_stride: usize,
    /// Smooth and compute Z-scores against the truth.
    pub zscores: bool,
    /// Record the singular values of every reduced-rank factor.
    pub singular_values: bool,
    pub keep_final_factor: bool,
}

impl RunOptions {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            dlra: cfg.dlra_config(),
            dense_cap: cfg.dense_cap,
            metric_stride: cfg.metric_stride(),
            zscores: cfg.scenario == ScenarioKind::Zscore,
            singular_values: cfg.scenario == ScenarioKind::RankCollapse,
            keep_final_factor: cfg.dump_factors,
        }
    }

    fn is_metric_step(&self, l: usize, steps: usize) -> bool {
        l.is_multiple_of(self.metric_stride) || l + 1 == steps
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Cell {
    pub method: Method,
    pub rank: usize,
    pub seed: u64,
}

/// One line of `results.csv`.
#[derive(Debug, Clone, Serialize)]
pub struct MetricRow {
    pub scenario: String,
    pub method: Method,
    pub rank: usize,
    pub seed: u64,
    pub rmse_mean_vs_kf: f64,
    pub cov_rel_frob_vs_kf: f64,
    pub total_loglik: f64,
    pub wall_ms: f64,
    /// Empty on success.
    pub error: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FactorStage {
    Predicted,
    Corrected,
}

#[derive(Debug, Clone)]
pub struct SingularValueRecord {
    pub step: usize,
    pub stage: FactorStage,
    pub values: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub row: MetricRow,
    pub max_step_rmse_ratio: f64,
    pub max_step_cov: f64,
    pub zscores: Option<ZScores>,
    pub singular_values: Vec<SingularValueRecord>,
    pub final_factor: Option<DMatrix<f64>>,
}

impl CellOutcome {
    fn failed(label: &str, cell: &Cell, message: String) -> Self {
        Self {
            row: MetricRow {
                scenario: label.to_string(),
                method: cell.method,
                rank: cell.rank,
                seed: cell.seed,
                rmse_mean_vs_kf: f64::NAN,
                cov_rel_frob_vs_kf: f64::NAN,
                total_loglik: f64::NAN,
                wall_ms: f64::NAN,
                error: message,
            },
            max_step_rmse_ratio: f64::NAN,
            max_step_cov: f64::NAN,
            zscores: None,
            singular_values: Vec::new(),
            final_factor: None,
        }
    }

    pub fn is_failure(&self) -> bool {
        !self.row.error.is_empty()
    }
}

/// Build the problem instances of a (non-benchmark) scenario.
pub fn prepare_problems(cfg: &ExperimentConfig) -> Result<Vec<(String, Problem)>> {
    let name = cfg.scenario.name();
    Ok(match cfg.scenario {
        ScenarioKind::Advection => vec![(name.to_string(), build_advection(&cfg.advection_scenario(None))?)],
        ScenarioKind::RankCollapse => vec![(name.to_string(), build_subspace_problem(&cfg.subspace_scenario())?.problem)],
        ScenarioKind::MaternSweep | ScenarioKind::Zscore => cfg
            .matern_scenarios(None)?
            .into_iter()
            .map(|(variant, s)| Ok((format!("{name}:{variant}"), build_matern(&s)?.problem)))
            .collect::<Result<Vec<_>>>()?,
        ScenarioKind::RuntimeBest | ScenarioKind::RuntimeWorst => {
            return Err(HarnessError::config("scenario", format!("`{name}` is a benchmark; use the bench command")))
        }
    })
}

/// Run the dense Kalman filter (and RTS smoother for Z-score runs) once.
/// `None` when the state dimension exceeds the cap.
pub fn build_oracle(problem: &Problem, opts: &RunOptions) -> Result<Option<Oracle>> {
    let n = problem.n();
    if n > opts.dense_cap {
        warn!("state dimension {n} exceeds the dense cap {}; no Kalman filter reference", opts.dense_cap);
        return Ok(None);
    }
    let steps = problem.observations.len();
    let mut source = problem.dynamics.dense_source(opts.dense_cap)?;
    let init = problem.init.dense(opts.dense_cap)?;
    if opts.zscores {
        let start = Instant::now();
        let trace = dense_kf_pass(source.as_mut(), &problem.observations, init, opts.dense_cap)?;
        let smoothed = dense_rts_pass(&trace)?;
        let wall_ms = ms(start.elapsed());
        let means = trace.records.iter().map(|r| r.corrected.mean.clone()).collect();
        let covs = trace
            .records
            .iter()
            .enumerate()
            .map(|(l, r)| opts.is_metric_step(l, steps).then(|| r.corrected.cov.clone()))
            .collect();
        let smoothed = smoothed.into_iter().map(|g| (g.mean, g.cov.diagonal().map(|v| v.max(0.0).sqrt()))).unzip();
        return Ok(Some(Oracle { means, covs, total_loglik: trace.total_loglik, wall_ms, smoothed: Some(smoothed) }));
    }
    let mut kf = DenseKalmanFilter::new(init, opts.dense_cap)?;
    let mut wall = Duration::ZERO;
    let mut means = Vec::with_capacity(steps);
    let mut covs = Vec::with_capacity(steps);
    for (l, obs) in problem.observations.iter().enumerate() {
        let start = Instant::now();
        let rec = kf.step(source.as_mut(), obs)?;
        wall += start.elapsed();
        means.push(rec.corrected.mean);
        covs.push(opts.is_metric_step(l, steps).then_some(rec.corrected.cov));
    }
    Ok(Some(Oracle { means, covs, total_loglik: kf.total_loglik(), wall_ms: ms(wall), smoothed: None }))
}

pub fn prepare(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<PreparedScenario>> {
    prepare_problems(cfg)?
        .into_iter()
        .map(|(label, problem)| {
            info!("{label}: n = {}, {} steps; running the dense reference", problem.n(), problem.steps());
            let oracle = build_oracle(&problem, opts)?;
            Ok(PreparedScenario { label, kind: cfg.scenario, problem, oracle })
        })
        .collect()
}

/// Cells for one problem: the reduced-rank filter at every rank (plus
/// `r = n` when requested), the Kalman filter once, and every ensemble
/// method at every rank and seed.
pub fn plan_cells(cfg: &ExperimentConfig, n: usize) -> Vec<Cell> {
    let mut cells = Vec::new();
    let ranks: Vec<usize> = cfg.ranks().into_iter().filter(|&r| r <= n).collect();
    for method in cfg.methods() {
        match method {
            Method::Rrkf => {
                let mut rs = ranks.clone();
                if cfg.full_rank() && !rs.contains(&n) {
                    rs.push(n);
                }
                cells.extend(rs.into_iter().map(|rank| Cell { method, rank, seed: cfg.seed }));
            }
            Method::Kf => cells.push(Cell { method, rank: n, seed: cfg.seed }),
            Method::Enkf | Method::Etkf => {
                for &rank in ranks.iter().filter(|&&r| r >= 2) {
                    cells.extend((0..cfg.seeds as u64).map(|s| Cell { method, rank, seed: cfg.seed + s }));
                }
            }
        }
    }
    cells.sort();
    cells
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

struct Tally {
    acc: MetricAccumulator,
    zscores: Option<ZScores>,
    singular_values: Vec<SingularValueRecord>,
}

impl Tally {
    fn new(opts: &RunOptions) -> Self {
        Self { acc: MetricAccumulator::default(), zscores: opts.zscores.then(ZScores::default), singular_values: Vec::new() }
    }

    fn compare(&mut self, oracle: Option<&Oracle>, l: usize, mean: &DVector<f64>, factor: impl FnOnce() -> DMatrix<f64>) -> Result<()> {
        if let Some(o) = oracle {
            self.acc.add_mean(mean, &o.means[l])?;
            if let Some(c) = &o.covs[l] {
                self.acc.add_cov(&factor(), c)?;
            }
        }
        Ok(())
    }
}

fn run_rrkf(prep: &PreparedScenario, cell: &Cell, opts: &RunOptions) -> Result<(Tally, f64, f64, DMatrix<f64>)> {
    let p = &prep.problem;
    let oracle = prep.oracle.as_ref();
    let init = p.init.reduced_rank(cell.rank)?;
    let mut source = p.dynamics.reduced_rank_source(cell.rank, opts.dlra, cell.seed);
    let mut tally = Tally::new(opts);
    if opts.zscores {
        let start = Instant::now();
        let trace = filter_pass(source.as_mut(), &p.observations, init, cell.rank)?;
        let smoothed = smooth_pass(&trace)?;
        let wall = ms(start.elapsed());
        for (l, rec) in trace.records.iter().enumerate() {
            tally.compare(oracle, l, &rec.corrected.mean, || rec.corrected.factor.matrix().clone())?;
        }
        let z = tally.zscores.as_mut().expect("Z-score run");
        for (g, truth) in smoothed.iter().zip(&p.truth) {
            z.add(&g.mean, &g.factor.marginal_variances().map(f64::sqrt), truth)?;
        }
        let last = trace.records.last().map(|r| r.corrected.factor.matrix().clone()).unwrap_or_default();
        return Ok((tally, trace.total_loglik, wall, last));
    }
    let mut stepper = RrkfStepper::new(init, cell.rank)?;
    let mut wall = Duration::ZERO;
    let mut last = DMatrix::zeros(0, 0);
    for (l, obs) in p.observations.iter().enumerate() {
        let start = Instant::now();
        let rec = stepper.step(source.as_mut(), obs)?;
        wall += start.elapsed();
        tally.compare(oracle, l, &rec.corrected.mean, || rec.corrected.factor.matrix().clone())?;
        if opts.singular_values {
            for (stage, f) in [(FactorStage::Predicted, &rec.predicted.factor), (FactorStage::Corrected, &rec.corrected.factor)] {
                tally.singular_values.push(SingularValueRecord { step: l, stage, values: f.singular_values() });
            }
        }
        if l + 1 == p.observations.len() {
            last = rec.corrected.factor.into_matrix();
        }
    }
    Ok((tally, stepper.total_loglik(), ms(wall), last))
}

fn run_ensemble(prep: &PreparedScenario, cell: &Cell, opts: &RunOptions) -> Result<(Tally, f64, f64, DMatrix<f64>)> {
    let p = &prep.problem;
    let oracle = prep.oracle.as_ref();
    let kind = if cell.method == Method::Enkf { EnsembleKind::Stochastic } else { EnsembleKind::Transform };
    let init = p.init.ensemble(cell.rank, cell.seed)?;
    let mut source = p.dynamics.sampling_source(opts.dense_cap)?;
    let mut filter = EnsembleFilter::new(kind, init, cell.seed);
    let mut tally = Tally::new(opts);
    let mut wall = Duration::ZERO;
    for (l, obs) in p.observations.iter().enumerate() {
        let start = Instant::now();
        filter.step(source.as_mut(), obs)?;
        wall += start.elapsed();
        let ens = filter.ensemble();
        let mean = ens.mean();
        tally.compare(oracle, l, &mean, || ens.anomalies())?;
        if let Some(z) = tally.zscores.as_mut() {
            let std = ens.anomalies().row_iter().map(|r| r.norm()).collect::<Vec<_>>();
            z.add(&mean, &DVector::from_vec(std), &p.truth[l])?;
        }
    }
    Ok((tally, filter.total_loglik(), ms(wall), filter.ensemble().anomalies()))
}

fn run_kf(prep: &PreparedScenario, opts: &RunOptions) -> Result<(Tally, f64, f64, DMatrix<f64>)> {
    let oracle = prep
        .oracle
        .as_ref()
        .ok_or(HarnessError::Core(rrkf::Error::DenseCapExceeded { n: prep.problem.n(), cap: opts.dense_cap }))?;
    let mut tally = Tally {
        acc: MetricAccumulator::default(),
        zscores: oracle.smoothed.as_ref().map(|_| ZScores::default()),
        singular_values: Vec::new(),
    };
    for (l, mean) in oracle.means.iter().enumerate() {
        tally.acc.add_mean(mean, mean)?;
        if let Some(c) = &oracle.covs[l] {
            tally.acc.add_cov(&rrkf::linalg::psd_sqrt(c).0, c)?;
        }
    }
    if let (Some(z), Some((means, stds))) = (tally.zscores.as_mut(), &oracle.smoothed) {
        for ((m, s), truth) in means.iter().zip(stds).zip(&prep.problem.truth) {
            z.add(m, s, truth)?;
        }
    }
    Ok((tally, oracle.total_loglik, oracle.wall_ms, DMatrix::zeros(0, 0)))
}

/// Run one cell. Failures are recorded in the row, never propagated.
pub fn run_cell(prep: &PreparedScenario, cell: &Cell, opts: &RunOptions) -> CellOutcome {
    let result = match cell.method {
        Method::Rrkf => run_rrkf(prep, cell, opts),
        Method::Kf => run_kf(prep, opts),
        Method::Enkf | Method::Etkf => run_ensemble(prep, cell, opts),
    };
    match result {
        Ok((tally, loglik, wall_ms, last)) => {
            let has_oracle = prep.oracle.is_some();
            CellOutcome {
                row: MetricRow {
                    scenario: prep.label.clone(),
                    method: cell.method,
                    rank: cell.rank,
                    seed: cell.seed,
                    rmse_mean_vs_kf: if has_oracle { tally.acc.rmse() } else { f64::NAN },
                    cov_rel_frob_vs_kf: if has_oracle { tally.acc.cov_rel_frobenius() } else { f64::NAN },
                    total_loglik: loglik,
                    wall_ms,
                    error: String::new(),
                },
                max_step_rmse_ratio: tally.acc.max_step_rmse_ratio,
                max_step_cov: tally.acc.max_step_cov,
                zscores: tally.zscores,
                singular_values: tally.singular_values,
                final_factor: opts.keep_final_factor.then_some(last),
            }
        }
        Err(e) => {
            warn!("{} {} r = {} seed = {}: {e}", prep.label, cell.method, cell.rank, cell.seed);
            CellOutcome::failed(&prep.label, cell, e.to_string())
        }
    }
}

/// Run cells in parallel; the output order is the input order.
pub fn run_cells(prep: &PreparedScenario, cells: &[Cell], opts: &RunOptions) -> Vec<CellOutcome> {
    let done = std::sync::atomic::AtomicUsize::new(0);
    cells
        .par_iter()
        .map(|c| {
            let start = Instant::now();
            let out = run_cell(prep, c, opts);
            let k = done.fetch_add(1, std::sync::atomic::Ordering::Relaxed) + 1;
            info!(
                "{}: {} r = {} seed {} done in {:.1} s ({k}/{})",
                prep.label,
                c.method,
                c.rank,
                c.seed,
                start.elapsed().as_secs_f64(),
                cells.len()
            );
            out
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub outcomes: Vec<CellOutcome>,
    pub failures: usize,
    pub output_dir: PathBuf,
}

/// Execute the scenario grid of `cfg` and write the result files.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let opts = RunOptions::from_config(cfg);
    let prepared = prepare(cfg, &opts)?;
    let mut outcomes = Vec::new();
    for prep in &prepared {
        let cells = plan_cells(cfg, prep.problem.n());
        info!("{}: {} cells", prep.label, cells.len());
        outcomes.extend(run_cells(prep, &cells, &opts));
    }
    let failures = outcomes.iter().filter(|o| o.is_failure()).count();
    let dir = cfg.output_dir.clone();
    output::write_experiment(&dir, cfg, &outcomes)?;
    Ok(ExperimentReport { outcomes, failures, output_dir: dir })
}
