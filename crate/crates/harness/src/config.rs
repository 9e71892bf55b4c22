//! Experiment configuration, read from TOML.
//!
//! Top-level keys select the scenario, methods, ranks and seeds; per-scenario
//! tables (`[advection]`, `[matern]`, `[subspace]`, `[runtime]`, `[zscore]`)
//! override problem parameters. Every problem key is optional and falls back
//! to a scenario-specific default, so a config can be as short as
//! `scenario = "advection"`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rrkf::dlra::{DlraConfig, KStepSolver};
use rrkf::models::matern::{grid_1d, grid_2d, DataTimes, Observed};
use rrkf::models::{AdvectionScenario, MaternScenario, Smoothness, SubspaceScenario};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Advection,
    MaternSweep,
    RuntimeBest,
    RuntimeWorst,
    RankCollapse,
    Zscore,
}

impl ScenarioKind {
    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Advection => "advection",
            ScenarioKind::MaternSweep => "matern_sweep",
            ScenarioKind::RuntimeBest => "runtime_best",
            ScenarioKind::RuntimeWorst => "runtime_worst",
            ScenarioKind::RankCollapse => "rank_collapse",
            ScenarioKind::Zscore => "zscore",
        }
    }

    pub fn is_benchmark(self) -> bool {
        matches!(self, ScenarioKind::RuntimeBest | ScenarioKind::RuntimeWorst)
    }
}

/// Declaration order is the row order of the result tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Rrkf,
    Kf,
    Enkf,
    Etkf,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Rrkf, Method::Kf, Method::Enkf, Method::Etkf];

    pub fn name(self) -> &'static str {
        match self {
            Method::Rrkf => "rrkf",
            Method::Kf => "kf",
            Method::Enkf => "enkf",
            Method::Etkf => "etkf",
        }
    }

    pub fn is_ensemble(self) -> bool {
        matches!(self, Method::Enkf | Method::Etkf)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| HarnessError::config("methods", format!("unknown method `{s}`; expected rrkf, kf, enkf or etkf")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KSolverChoice {
    #[default]
    Rk4,
    Exponential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DlraSection {
    /// BUG steps per filter step.
    pub substeps: usize,
    pub k_solver: KSolverChoice,
    /// Runge–Kutta steps per BUG step when `k_solver = "rk4"`.
    pub rk4_steps: usize,
}

impl Default for DlraSection {
    fn default() -> Self {
        Self { substeps: 1, k_solver: KSolverChoice::Rk4, rk4_steps: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    /// Accepted log–log slope band of the best-case benchmark.
    pub best_slope: [f64; 2],
    /// Accepted log–log slope band of the worst-case benchmark.
    pub worst_slope: [f64; 2],
    /// Median wall times below this are flagged as timer-limited.
    pub timer_floor_ms: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { best_slope: [0.8, 1.3], worst_slope: [1.7, 2.4], timer_floor_ms: 1.0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdvectionSection {
    pub n: Option<usize>,
    pub velocity: Option<f64>,
    pub dt: Option<f64>,
    pub dx: Option<f64>,
    pub obs_every: Option<usize>,
    pub obs_count: Option<usize>,
    pub noise_std: Option<f64>,
    pub steps: Option<usize>,
    pub ensemble_size: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaternSection {
    /// Spatial dimension of the grid, 1 or 2.
    pub dims: Option<usize>,
    /// Interval (per axis) covered by the grid.
    pub domain: Option<[f64; 2]>,
    pub dx: Option<f64>,
    /// Smoothness ν ∈ {0.5, 1.5, 2.5} of both kernels.
    pub nu: Option<f64>,
    pub lengthscale_t: Option<f64>,
    /// One problem per entry.
    pub lengthscales_x: Option<Vec<f64>>,
    pub scale_t: Option<f64>,
    pub scale_x: Option<f64>,
    pub noise_std: Option<f64>,
    pub start: Option<f64>,
    pub dt: Option<f64>,
    /// Temporal grid points.
    pub steps: Option<usize>,
    /// Random data times drawn from the grid; absent means all.
    pub data_times: Option<usize>,
    /// Random locations observed per data time; absent means all.
    pub observed: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SubspaceSection {
    pub n: Option<usize>,
    pub true_rank: Option<usize>,
    pub m: Option<usize>,
    pub noise_std: Option<f64>,
    pub dt: Option<f64>,
    pub steps: Option<usize>,
    pub complement_rate: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RuntimeSection {
    /// State dimensions to time.
    pub sizes: Option<Vec<usize>>,
    /// Minimum timed passes per size.
    pub repetitions: Option<usize>,
    /// Further passes are timed until their total reaches this many
    /// milliseconds.
    pub min_total_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ZscoreSection {
    /// Histogram bins of `|z|` over `[0, max_abs]`; larger values go to an
    /// overflow row.
    pub bins: usize,
    pub max_abs: f64,
}

impl Default for ZscoreSection {
    fn default() -> Self {
        Self { bins: 40, max_abs: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: ScenarioKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub methods: Option<Vec<Method>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ranks: Option<Vec<usize>>,
    /// Also run the reduced-rank filter at `r = n`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub full_rank: Option<bool>,
    /// Ensemble runs per (method, rank).
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    /// Base seed: problem data, DLRA bases and ensemble seeds derive from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dlra: DlraSection,
    /// Largest state dimension for which the dense Kalman filter runs.
    #[serde(default = "default_dense_cap")]
    pub dense_cap: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Covariance errors are evaluated every this many filter steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric_stride: Option<usize>,
    /// Write the final corrected factor of every run.
    #[serde(default)]
    pub dump_factors: bool,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub advection: AdvectionSection,
    #[serde(default)]
    pub matern: MaternSection,
    #[serde(default)]
    pub subspace: SubspaceSection,
    #[serde(default)]
    pub runtime: RuntimeSection,
    #[serde(default)]
    pub zscore: ZscoreSection,
}

fn default_seeds() -> usize {
    20
}

fn default_dense_cap() -> usize {
    rrkf::sde::DEFAULT_DENSE_CAP
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

/// Default spatial lengthscales of the sweep.
pub const SWEEP_LENGTHSCALES: [f64; 4] = [0.01, 0.1, 0.25, 1.0];

impl ExperimentConfig {
    /// A config with every optional key at its scenario default.
    pub fn for_scenario(scenario: ScenarioKind) -> Self {
        Self {
            scenario,
            methods: None,
            ranks: None,
            full_rank: None,
            seeds: default_seeds(),
            seed: 0,
            dlra: DlraSection::default(),
            dense_cap: default_dense_cap(),
            output_dir: default_output_dir(),
            metric_stride: None,
            dump_factors: false,
            tolerances: Tolerances::default(),
            advection: AdvectionSection::default(),
            matern: MaternSection::default(),
            subspace: SubspaceSection::default(),
            runtime: RuntimeSection::default(),
            zscore: ZscoreSection::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::config("--config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn methods(&self) -> Vec<Method> {
        let mut m = self.methods.clone().unwrap_or_else(|| match self.scenario {
            ScenarioKind::RankCollapse => vec![Method::Rrkf, Method::Kf],
            ScenarioKind::RuntimeBest | ScenarioKind::RuntimeWorst => vec![Method::Rrkf],
            _ => Method::ALL.to_vec(),
        });
        m.sort();
        m.dedup();
        m
    }

    /// Ranks in ascending order, without the optional `r = n` run.
    pub fn ranks(&self) -> Vec<usize> {
        let mut r = self.ranks.clone().unwrap_or_else(|| match self.scenario {
            ScenarioKind::Advection => vec![20, 35, 51],
            ScenarioKind::MaternSweep => vec![10, 50, 150],
            ScenarioKind::RuntimeBest | ScenarioKind::RuntimeWorst => vec![5],
            ScenarioKind::RankCollapse => vec![3, 7, 11],
            ScenarioKind::Zscore => vec![10, 50],
        });
        r.sort_unstable();
        r.dedup();
        r
    }

    pub fn full_rank(&self) -> bool {
        self.full_rank
            .unwrap_or(matches!(self.scenario, ScenarioKind::MaternSweep | ScenarioKind::Zscore))
    }

    pub fn metric_stride(&self) -> usize {
        self.metric_stride.unwrap_or(match self.scenario {
            ScenarioKind::Advection => 20,
            _ => 1,
        })
    }

    pub fn dlra_config(&self) -> DlraConfig {
        DlraConfig {
            substeps: self.dlra.substeps,
            k_solver: match self.dlra.k_solver {
                KSolverChoice::Rk4 => KStepSolver::Rk4 { steps: self.dlra.rk4_steps },
                KSolverChoice::Exponential => KStepSolver::Exponential,
            },
            reuse_basis: true,
        }
    }

    pub fn runtime_sizes(&self) -> Vec<usize> {
        let mut sizes = self.runtime.sizes.clone().unwrap_or_else(|| match self.scenario {
            ScenarioKind::RuntimeWorst => (8..=11).map(|k| 1usize << k).collect(),
            _ => (10..=14).map(|k| 1usize << k).collect(),
        });
        sizes.sort_unstable();
        sizes.dedup();
        sizes
    }

    pub fn repetitions(&self) -> usize {
        self.runtime.repetitions.unwrap_or(5)
    }

    pub fn min_total_ms(&self) -> f64 {
        self.runtime.min_total_ms.unwrap_or(2000.0)
    }

    /// Advection problem; `n` overrides the configured grid size.
    pub fn advection_scenario(&self, n: Option<usize>) -> AdvectionScenario {
        let a = &self.advection;
        let base = AdvectionScenario::default();
        let bench = self.scenario == ScenarioKind::RuntimeBest;
        AdvectionScenario {
            n: n.or(a.n).unwrap_or(base.n),
            velocity: a.velocity.unwrap_or(base.velocity),
            dt: a.dt.unwrap_or(base.dt),
            dx: a.dx.unwrap_or(base.dx),
            obs_every: a.obs_every.unwrap_or(base.obs_every),
            obs_count: a.obs_count.unwrap_or(if bench { 100 } else { base.obs_count }),
            noise_std: a.noise_std.unwrap_or(base.noise_std),
            steps: a.steps.unwrap_or(if bench { 100 } else { base.steps }),
            ensemble_size: a.ensemble_size,
            seed: self.seed,
        }
    }

    fn matern_defaults(&self) -> MaternDefaults {
        match self.scenario {
            ScenarioKind::Zscore => MaternDefaults {
                dims: 1,
                domain: [0.0, 20.0],
                dx: 0.1,
                lengthscale_t: 1.0,
                lengthscales_x: vec![1.0],
                start: 0.0,
                steps: 501,
                data_times: Some(100),
                observed: Some(150),
            },
            ScenarioKind::RuntimeWorst => MaternDefaults {
                dims: 1,
                domain: [0.0, 10.0],
                dx: 0.1,
                lengthscale_t: 1.0,
                lengthscales_x: vec![1.0],
                start: 0.0,
                steps: 101,
                data_times: Some(20),
                observed: Some(100),
            },
            _ => MaternDefaults {
                dims: 2,
                domain: [0.0, 2.0],
                dx: 0.1,
                lengthscale_t: 1.0,
                lengthscales_x: SWEEP_LENGTHSCALES.to_vec(),
                start: 0.1,
                steps: 100,
                data_times: None,
                observed: None,
            },
        }
    }

    fn smoothness(&self) -> Result<Smoothness> {
        Smoothness::from_nu(self.matern.nu.unwrap_or(0.5)).map_err(|e| HarnessError::config("matern.nu", e.to_string()))
    }

    fn matern_grid(&self, points: Option<usize>) -> DMatrix {
        let d = self.matern_defaults();
        let [lo, hi] = self.matern.domain.unwrap_or(d.domain);
        if let Some(n) = points {
            let step = if n > 1 { (hi - lo) / (n - 1) as f64 } else { 1.0 };
            return nalgebra::DMatrix::from_fn(n, 1, |i, _| lo + i as f64 * step);
        }
        let dx = self.matern.dx.unwrap_or(d.dx);
        match self.matern.dims.unwrap_or(d.dims) {
            2 => grid_2d(lo, hi, dx),
            _ => grid_1d(lo, hi, dx),
        }
    }

    /// One Matérn problem per spatial lengthscale, labelled `lx=<value>`.
    /// `points` replaces the grid by that many equidistant points on the
    /// domain interval.
    pub fn matern_scenarios(&self, points: Option<usize>) -> Result<Vec<(String, MaternScenario)>> {
        let d = self.matern_defaults();
        let m = &self.matern;
        let grid = self.matern_grid(points);
        let smoothness = self.smoothness()?;
        let lengthscales = m.lengthscales_x.clone().unwrap_or(d.lengthscales_x.clone());
        Ok(lengthscales
            .into_iter()
            .map(|lx| {
                let s = MaternScenario {
                    spatial_grid: grid.clone(),
                    smoothness,
                    lengthscale_t: m.lengthscale_t.unwrap_or(d.lengthscale_t),
                    lengthscale_x: lx,
                    scale_t: m.scale_t.unwrap_or(1.0),
                    scale_x: m.scale_x.unwrap_or(1.0),
                    noise_std: m.noise_std.unwrap_or(0.1),
                    start: m.start.unwrap_or(d.start),
                    dt: m.dt.unwrap_or(0.1),
                    steps: m.steps.unwrap_or(d.steps),
                    data_times: match m.data_times.or(d.data_times) {
                        Some(k) => DataTimes::Random(k),
                        None => DataTimes::All,
                    },
                    observed: match m.observed.or(d.observed) {
                        Some(k) => Observed::Random(k),
                        None => Observed::Full,
                    },
                    seed: self.seed,
                };
                (format!("lx={lx}"), s)
            })
            .collect())
    }

    pub fn subspace_scenario(&self) -> SubspaceScenario {
        let s = &self.subspace;
        let base = SubspaceScenario::default();
        SubspaceScenario {
            n: s.n.unwrap_or(base.n),
            true_rank: s.true_rank.unwrap_or(base.true_rank),
            m: s.m.unwrap_or(base.m),
            noise_std: s.noise_std.unwrap_or(base.noise_std),
            dt: s.dt.unwrap_or(base.dt),
            steps: s.steps.unwrap_or(base.steps),
            complement_rate: s.complement_rate.unwrap_or(base.complement_rate),
            seed: self.seed,
        }
    }

    /// State dimension of the scenario (the smallest one for benchmarks).
    pub fn state_dim(&self) -> Result<usize> {
        Ok(match self.scenario {
            ScenarioKind::Advection => self.advection_scenario(None).n,
            ScenarioKind::RuntimeBest | ScenarioKind::RuntimeWorst => {
                self.runtime_sizes().first().copied().unwrap_or(0) * if self.scenario == ScenarioKind::RuntimeWorst {
                    self.smoothness()?.order()
                } else {
                    1
                }
            }
            ScenarioKind::RankCollapse => self.subspace_scenario().n,
            ScenarioKind::MaternSweep | ScenarioKind::Zscore => {
                self.matern_grid(None).nrows() * self.smoothness()?.order()
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods().is_empty() {
            return Err(HarnessError::config("methods", "at least one method is required"));
        }
        let ranks = self.ranks();
        if ranks.is_empty() && !self.full_rank() {
            return Err(HarnessError::config("ranks", "at least one rank is required"));
        }
        if ranks.contains(&0) {
            return Err(HarnessError::config("ranks", "ranks must be positive"));
        }
        if self.seeds == 0 {
            return Err(HarnessError::config("seeds", "need at least one seed"));
        }
        if self.dlra.substeps == 0 || self.dlra.rk4_steps == 0 {
            return Err(HarnessError::config("dlra", "substeps and rk4_steps must be positive"));
        }
        if self.metric_stride == Some(0) {
            return Err(HarnessError::config("metric_stride", "must be positive"));
        }
        if self.zscore.bins == 0 || !(self.zscore.max_abs > 0.0) {
            return Err(HarnessError::config("zscore", "bins and max_abs must be positive"));
        }
        let n = self.state_dim()?;
        if let Some(&r) = ranks.iter().find(|&&r| r > n) {
            return Err(HarnessError::config("ranks", format!("rank {r} exceeds the state dimension {n}")));
        }
        if self.scenario == ScenarioKind::Advection {
            let a = self.advection_scenario(None);
            let members = a.ensemble_size.unwrap_or(a.n);
            let methods = self.methods();
            if methods.iter().any(|m| m.is_ensemble()) && ranks.iter().any(|&r| r > members) {
                return Err(HarnessError::config(
                    "advection.ensemble_size",
                    format!("ensemble runs need at least {} stored members, have {members}", ranks.last().unwrap()),
                ));
            }
        }
        if self.scenario.is_benchmark() {
            let sizes = self.runtime_sizes();
            if sizes.len() < 2 {
                return Err(HarnessError::config("runtime.sizes", "a slope needs at least two distinct sizes"));
            }
            if self.repetitions() == 0 {
                return Err(HarnessError::config("runtime.repetitions", "must be positive"));
            }
            if !(self.min_total_ms() >= 0.0 && self.min_total_ms().is_finite()) {
                return Err(HarnessError::config("runtime.min_total_ms", "must be finite and non-negative"));
            }
            if ranks.len() != 1 {
                return Err(HarnessError::config("ranks", "benchmarks take exactly one rank"));
            }
        }
        if let Some(l) = &self.matern.lengthscales_x {
            if l.is_empty() || l.iter().any(|v| !(*v > 0.0)) {
                return Err(HarnessError::config("matern.lengthscales_x", "need at least one positive lengthscale"));
            }
        }
        if let Some(d) = self.matern.dims {
            if d != 1 && d != 2 {
                return Err(HarnessError::config("matern.dims", "must be 1 or 2"));
            }
        }
        Ok(())
    }
}

type DMatrix = nalgebra::DMatrix<f64>;

struct MaternDefaults {
    dims: usize,
    domain: [f64; 2],
    dx: f64,
    lengthscale_t: f64,
    lengthscales_x: Vec<f64>,
    start: f64,
    steps: usize,
    data_times: Option<usize>,
    observed: Option<usize>,
}

/// Parse a comma-separated list such as `5,10,20`.
pub fn parse_list<T: FromStr>(text: &str, field: &str) -> Result<Vec<T>> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse().map_err(|_| HarnessError::config(field, format!("cannot parse `{s}`"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_scenario_defaults() {
        let cfg = ExperimentConfig::from_toml_str("scenario = \"advection\"").unwrap();
        assert_eq!(cfg.methods(), Method::ALL.to_vec());
        assert_eq!(cfg.ranks(), vec![20, 35, 51]);
        assert_eq!(cfg.seeds, 20);
        assert_eq!(cfg.advection_scenario(None).n, 1024);
        assert_eq!(cfg.metric_stride(), 20);
    }

    #[test]
    fn sweep_grid_has_441_points() {
        let cfg = ExperimentConfig::for_scenario(ScenarioKind::MaternSweep);
        let scenarios = cfg.matern_scenarios(None).unwrap();
        assert_eq!(scenarios.len(), 4);
        assert_eq!(scenarios[0].1.spatial_grid.nrows(), 441);
        assert_eq!(cfg.state_dim().unwrap(), 441);
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_location() {
        let err = ExperimentConfig::from_toml_str("scenario = \"advection\"\n\n[advection]\nwidth = 3\n").unwrap_err();
        let text = err.to_string();
        assert!(text.contains("width") && text.contains("line 4"), "{text}");
    }

    #[test]
    fn oversized_rank_names_the_field() {
        let err = ExperimentConfig::from_toml_str("scenario = \"rank_collapse\"\nranks = [2000]\n").unwrap_err();
        assert!(matches!(err, HarnessError::Config { ref field, .. } if field == "ranks"), "{err}");
    }

    #[test]
    fn single_size_benchmark_is_rejected() {
        let err =
            ExperimentConfig::from_toml_str("scenario = \"runtime_best\"\n[runtime]\nsizes = [1024]\n").unwrap_err();
        assert!(matches!(err, HarnessError::Config { ref field, .. } if field == "runtime.sizes"));
    }

    #[test]
    fn empty_method_list_is_rejected() {
        assert!(ExperimentConfig::from_toml_str("scenario = \"zscore\"\nmethods = []\n").is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let mut cfg = ExperimentConfig::for_scenario(ScenarioKind::Zscore);
        cfg.ranks = Some(vec![4, 8]);
        cfg.matern.lengthscales_x = Some(vec![0.5]);
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn lists_parse() {
        assert_eq!(parse_list::<usize>("5, 10,20", "ranks").unwrap(), vec![5, 10, 20]);
        assert_eq!(parse_list::<Method>("rrkf,etkf", "methods").unwrap(), vec![Method::Rrkf, Method::Etkf]);
        assert!(parse_list::<Method>("rrkf,ukf", "methods").is_err());
    }
}
