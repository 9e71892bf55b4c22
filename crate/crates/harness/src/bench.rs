//! Runtime scaling in the state dimension.

use std::fs;
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use serde::Serialize;

use rrkf::filter::filter_pass;
use rrkf::models::{build_advection, build_matern, Problem};

use crate::config::{ExperimentConfig, ScenarioKind};
use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Serialize)]
pub struct BenchPoint {
    pub n: usize,
    pub times_ms: Vec<f64>,
    pub median_ms: f64,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub scenario: ScenarioKind,
    pub rank: usize,
    pub points: Vec<BenchPoint>,
    /// Least-squares slope of `log(median)` against `log(n)`.
    pub slope: f64,
    pub band: [f64; 2],
    pub warnings: Vec<String>,
}

impl BenchReport {
    pub fn within_band(&self) -> bool {
        self.slope >= self.band[0] && self.slope <= self.band[1]
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        k if k % 2 == 1 => v[k / 2],
        k => 0.5 * (v[k / 2 - 1] + v[k / 2]),
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let k = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / k, ly.iter().sum::<f64>() / k);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// The benchmark problem at size `n` (grid cells for the best case,
/// spatial points for the worst case).
pub fn bench_problem(cfg: &ExperimentConfig, n: usize) -> Result<Problem> {
    match cfg.scenario {
        ScenarioKind::RuntimeBest => Ok(build_advection(&cfg.advection_scenario(Some(n)))?),
        ScenarioKind::RuntimeWorst => {
            let (_, s) = cfg.matern_scenarios(Some(n))?.into_iter().next().expect("one lengthscale at least");
            Ok(build_matern(&s)?.problem)
        }
        other => Err(HarnessError::config("scenario", format!("`{}` is not a benchmark", other.name()))),
    }
}

/// Wall time of one filter pass in milliseconds; problem construction and
/// the initial factor are outside the timed region.
pub fn time_filter(problem: &Problem, cfg: &ExperimentConfig, rank: usize) -> Result<f64> {
    let init = problem.init.reduced_rank(rank)?;
    let mut source = problem.dynamics.reduced_rank_source(rank, cfg.dlra_config(), cfg.seed);
    let start = Instant::now();
    let trace = filter_pass(source.as_mut(), &problem.observations, init, rank)?;
    let elapsed = start.elapsed().as_secs_f64() * 1e3;
    std::hint::black_box(trace.total_loglik);
    Ok(elapsed)
}

/// Upper bound on repetitions added to reach the timed-work floor.
pub const MAX_REPETITIONS: usize = 200;

pub fn run_scaling_benchmark(cfg: &ExperimentConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let band = match cfg.scenario {
        ScenarioKind::RuntimeBest => cfg.tolerances.best_slope,
        ScenarioKind::RuntimeWorst => cfg.tolerances.worst_slope,
        other => return Err(HarnessError::config("scenario", format!("`{}` is not a benchmark", other.name()))),
    };
    let rank = cfg.ranks()[0];
    let mut points = Vec::new();
    let mut warnings = Vec::new();
    for n in cfg.runtime_sizes() {
        let problem = bench_problem(cfg, n)?;
        // One untimed warm-up pass.
        time_filter(&problem, cfg, rank)?;
        // Short passes are repeated beyond the minimum until enough timed
        // work has accumulated for a stable median.
        let mut times_ms = Vec::new();
        while times_ms.len() < cfg.repetitions()
            || (times_ms.iter().sum::<f64>() < cfg.min_total_ms() && times_ms.len() < MAX_REPETITIONS)
        {
            times_ms.push(time_filter(&problem, cfg, rank)?);
        }
        let median_ms = median(&times_ms);
        info!("{} n = {}: median {median_ms:.3} ms", cfg.scenario.name(), problem.n());
        if median_ms < cfg.tolerances.timer_floor_ms {
            let w = format!("n = {}: median {median_ms:.3} ms is below the timer floor", problem.n());
            warn!("{w}");
            warnings.push(w);
        }
        points.push(BenchPoint { n: problem.n(), times_ms, median_ms });
    }
    let ns: Vec<f64> = points.iter().map(|p| p.n as f64).collect();
    let ms: Vec<f64> = points.iter().map(|p| p.median_ms).collect();
    let slope = loglog_slope(&ns, &ms);
    Ok(BenchReport { scenario: cfg.scenario, rank, points, slope, band, warnings })
}

#[derive(Serialize)]
struct TimingRow<'a> {
    scenario: &'a str,
    n: usize,
    repetition: usize,
    wall_ms: f64,
}

#[derive(Serialize)]
struct BenchManifest<'a> {
    library_version: &'static str,
    scenario: &'a str,
    rank: usize,
    slope: f64,
    band: [f64; 2],
    within_band: bool,
    sizes: Vec<usize>,
    median_ms: Vec<f64>,
    warnings: &'a [String],
    config: &'a ExperimentConfig,
}

pub const TIMINGS_FILE: &str = "bench_timings.csv";
pub const BENCH_MANIFEST_FILE: &str = "bench_manifest.toml";

pub fn write_bench(dir: &Path, cfg: &ExperimentConfig, report: &BenchReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    let name = report.scenario.name();
    let mut w = csv::Writer::from_path(dir.join(TIMINGS_FILE))?;
    for p in &report.points {
        for (repetition, &wall_ms) in p.times_ms.iter().enumerate() {
            w.serialize(TimingRow { scenario: name, n: p.n, repetition, wall_ms })?;
        }
    }
    w.flush()?;
    let manifest = BenchManifest {
        library_version: rrkf::VERSION,
        scenario: name,
        rank: report.rank,
        slope: report.slope,
        band: report.band,
        within_band: report.within_band(),
        sizes: report.points.iter().map(|p| p.n).collect(),
        median_ms: report.points.iter().map(|p| p.median_ms).collect(),
        warnings: &report.warnings,
        config: cfg,
    };
    let text = toml::to_string(&manifest).map_err(|e| HarnessError::Parse(e.to_string()))?;
    fs::write(dir.join(BENCH_MANIFEST_FILE), text)?;
    Ok(())
}
