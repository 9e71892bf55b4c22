//! Result files of an experiment run.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::config::{ExperimentConfig, Method};
use crate::error::{HarnessError, Result};
use crate::experiment::{CellOutcome, MetricRow};
use crate::metrics::{chi1_histogram, ks_chi1, spread, Spread};

pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const MANIFEST_FILE: &str = "run_manifest.toml";
pub const ZSCORE_SUMMARY_FILE: &str = "zscore_summary.csv";
pub const ZSCORE_HISTOGRAM_FILE: &str = "zscore_histogram.csv";
pub const SINGULAR_VALUES_FILE: &str = "singular_values.csv";
pub const FACTORS_DIR: &str = "factors";

/// Rows sorted by scenario (in run order), method, rank and seed.
pub fn sorted_rows(outcomes: &[CellOutcome]) -> Vec<&MetricRow> {
    let mut order: Vec<&str> = Vec::new();
    for o in outcomes {
        if !order.contains(&o.row.scenario.as_str()) {
            order.push(&o.row.scenario);
        }
    }
    let mut rows: Vec<&MetricRow> = outcomes.iter().map(|o| &o.row).collect();
    rows.sort_by_key(|r| (order.iter().position(|s| *s == r.scenario), r.method, r.rank, r.seed));
    rows
}

pub fn write_results(path: &Path, outcomes: &[CellOutcome]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in sorted_rows(outcomes) {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub scenario: String,
    pub method: Method,
    pub rank: usize,
    pub count: usize,
    pub failures: usize,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub rmse_min: f64,
    pub rmse_max: f64,
    pub cov_mean: f64,
    pub cov_std: f64,
    pub cov_min: f64,
    pub cov_max: f64,
    pub loglik_mean: f64,
    pub loglik_std: f64,
    pub wall_ms_mean: f64,
    pub wall_ms_std: f64,
}

/// Aggregate over seeds for every (scenario, method, rank).
pub fn summarize(outcomes: &[CellOutcome]) -> Vec<SummaryRow> {
    let mut groups: Vec<((String, Method, usize), Vec<&MetricRow>)> = Vec::new();
    for row in sorted_rows(outcomes) {
        let key = (row.scenario.clone(), row.method, row.rank);
        match groups.last_mut() {
            Some((k, rows)) if *k == key => rows.push(row),
            _ => groups.push((key, vec![row])),
        }
    }
    groups
        .into_iter()
        .map(|((scenario, method, rank), rows)| {
            let ok: Vec<&&MetricRow> = rows.iter().filter(|r| r.error.is_empty()).collect();
            let pick = |f: fn(&MetricRow) -> f64| -> Spread { spread(&ok.iter().map(|r| f(r)).collect::<Vec<_>>()) };
            let (rmse, cov, ll, wall) =
                (pick(|r| r.rmse_mean_vs_kf), pick(|r| r.cov_rel_frob_vs_kf), pick(|r| r.total_loglik), pick(|r| r.wall_ms));
            SummaryRow {
                scenario,
                method,
                rank,
                count: rows.len(),
                failures: rows.len() - ok.len(),
                rmse_mean: rmse.mean,
                rmse_std: rmse.std,
                rmse_min: rmse.min,
                rmse_max: rmse.max,
                cov_mean: cov.mean,
                cov_std: cov.std,
                cov_min: cov.min,
                cov_max: cov.max,
                loglik_mean: ll.mean,
                loglik_std: ll.std,
                wall_ms_mean: wall.mean,
                wall_ms_std: wall.std,
            }
        })
        .collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct ZscoreSummaryRow {
    pub scenario: String,
    pub method: Method,
    pub rank: usize,
    pub seed: u64,
    pub count: usize,
    pub excluded: usize,
    pub ks_chi1: f64,
    pub mean_abs: f64,
}

pub fn zscore_summary(outcomes: &[CellOutcome]) -> Vec<ZscoreSummaryRow> {
    let mut rows: Vec<ZscoreSummaryRow> = outcomes
        .iter()
        .filter_map(|o| {
            let z = o.zscores.as_ref()?;
            let abs = z.abs();
            Some(ZscoreSummaryRow {
                scenario: o.row.scenario.clone(),
                method: o.row.method,
                rank: o.row.rank,
                seed: o.row.seed,
                count: abs.len(),
                excluded: z.excluded,
                ks_chi1: ks_chi1(&abs),
                mean_abs: spread(&abs).mean,
            })
        })
        .collect();
    rows.sort_by(|a, b| (&a.scenario, a.method, a.rank, a.seed).cmp(&(&b.scenario, b.method, b.rank, b.seed)));
    rows
}

#[derive(Debug, Clone, Serialize)]
pub struct ZscoreHistogramRow {
    pub scenario: String,
    pub method: Method,
    pub rank: usize,
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: usize,
    pub expected: f64,
}

/// `|z|` histograms pooled over seeds, with the Chi(1) expectation.
pub fn zscore_histograms(outcomes: &[CellOutcome], bins: usize, max_abs: f64) -> Vec<ZscoreHistogramRow> {
    let mut pooled: BTreeMap<(String, Method, usize), Vec<f64>> = BTreeMap::new();
    for o in outcomes {
        if let Some(z) = &o.zscores {
            pooled.entry((o.row.scenario.clone(), o.row.method, o.row.rank)).or_default().extend(z.abs());
        }
    }
    pooled
        .into_iter()
        .flat_map(|((scenario, method, rank), abs)| {
            chi1_histogram(&abs, bins, max_abs).into_iter().map(move |b| ZscoreHistogramRow {
                scenario: scenario.clone(),
                method,
                rank,
                bin_lo: b.lo,
                bin_hi: b.hi,
                count: b.count,
                expected: b.expected,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
struct SingularValueRow<'a> {
    scenario: &'a str,
    rank: usize,
    step: usize,
    stage: crate::experiment::FactorStage,
    index: usize,
    value: f64,
}

fn write_singular_values(path: &Path, outcomes: &[CellOutcome]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut sorted: Vec<&CellOutcome> = outcomes.iter().filter(|o| !o.singular_values.is_empty()).collect();
    sorted.sort_by_key(|o| o.row.rank);
    for o in sorted {
        for rec in &o.singular_values {
            for (index, &value) in rec.values.iter().enumerate() {
                w.serialize(SingularValueRow { scenario: &o.row.scenario, rank: o.row.rank, step: rec.step, stage: rec.stage, index, value })?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Matrix as CSV without a header, one row per line.
pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for row in m.row_iter() {
        w.write_record(row.iter().map(|v| format!("{v:?}")))?;
    }
    w.flush()?;
    Ok(())
}

fn file_stem(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect()
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    library_version: &'static str,
    harness_version: &'static str,
    threads: usize,
    seed: u64,
    ensemble_seeds: Vec<u64>,
    rows: usize,
    failures: usize,
    files: Vec<String>,
    config: &'a ExperimentConfig,
}

pub fn write_manifest(path: &Path, cfg: &ExperimentConfig, outcomes: &[CellOutcome], files: Vec<String>) -> Result<()> {
    let manifest = Manifest {
        library_version: rrkf::VERSION,
        harness_version: env!("CARGO_PKG_VERSION"),
        threads: rayon::current_num_threads(),
        seed: cfg.seed,
        ensemble_seeds: (0..cfg.seeds as u64).map(|s| cfg.seed + s).collect(),
        rows: outcomes.len(),
        failures: outcomes.iter().filter(|o| o.is_failure()).count(),
        files,
        config: cfg,
    };
    let text = toml::to_string(&manifest).map_err(|e| HarnessError::Parse(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

/// Write every output of a run into `dir`.
pub fn write_experiment(dir: &Path, cfg: &ExperimentConfig, outcomes: &[CellOutcome]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut files = vec![RESULTS_FILE.to_string(), SUMMARY_FILE.to_string()];
    write_results(&dir.join(RESULTS_FILE), outcomes)?;
    write_csv(&dir.join(SUMMARY_FILE), &summarize(outcomes))?;
    if outcomes.iter().any(|o| o.zscores.is_some()) {
        write_csv(&dir.join(ZSCORE_SUMMARY_FILE), &zscore_summary(outcomes))?;
        write_csv(&dir.join(ZSCORE_HISTOGRAM_FILE), &zscore_histograms(outcomes, cfg.zscore.bins, cfg.zscore.max_abs))?;
        files.extend([ZSCORE_SUMMARY_FILE.to_string(), ZSCORE_HISTOGRAM_FILE.to_string()]);
    }
    if outcomes.iter().any(|o| !o.singular_values.is_empty()) {
        write_singular_values(&dir.join(SINGULAR_VALUES_FILE), outcomes)?;
        files.push(SINGULAR_VALUES_FILE.to_string());
    }
    let factors: Vec<&CellOutcome> = outcomes.iter().filter(|o| o.final_factor.as_ref().is_some_and(|f| f.ncols() > 0)).collect();
    if !factors.is_empty() {
        let fdir = dir.join(FACTORS_DIR);
        fs::create_dir_all(&fdir)?;
        for o in factors {
            let r = &o.row;
            let name = format!("{}_{}_r{}_s{}.csv", file_stem(&r.scenario), r.method, r.rank, r.seed);
            write_matrix(&fdir.join(&name), o.final_factor.as_ref().expect("filtered"))?;
            files.push(format!("{FACTORS_DIR}/{name}"));
        }
    }
    files.push(MANIFEST_FILE.to_string());
    write_manifest(&dir.join(MANIFEST_FILE), cfg, outcomes, files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::MetricRow;

    fn outcome(scenario: &str, method: Method, rank: usize, seed: u64, cov: f64, error: &str) -> CellOutcome {
        CellOutcome {
            row: MetricRow {
                scenario: scenario.into(),
                method,
                rank,
                seed,
                rmse_mean_vs_kf: 0.5,
                cov_rel_frob_vs_kf: cov,
                total_loglik: -1.0,
                wall_ms: 1.0,
                error: error.into(),
            },
            max_step_rmse_ratio: 0.0,
            max_step_cov: 0.0,
            zscores: None,
            singular_values: Vec::new(),
            final_factor: None,
        }
    }

    #[test]
    fn rows_sort_by_scenario_order_method_rank_and_seed() {
        let outcomes = vec![
            outcome("b", Method::Etkf, 5, 2, 0.1, ""),
            outcome("b", Method::Rrkf, 5, 0, 0.1, ""),
            outcome("a", Method::Etkf, 5, 1, 0.1, ""),
            outcome("b", Method::Etkf, 5, 1, 0.1, ""),
            outcome("a", Method::Rrkf, 3, 0, 0.1, ""),
        ];
        let keys: Vec<_> = sorted_rows(&outcomes).iter().map(|r| (r.scenario.clone(), r.method, r.seed)).collect();
        assert_eq!(
            keys,
            vec![
                ("b".into(), Method::Rrkf, 0),
                ("b".into(), Method::Etkf, 1),
                ("b".into(), Method::Etkf, 2),
                ("a".into(), Method::Rrkf, 0),
                ("a".into(), Method::Etkf, 1),
            ]
        );
    }

    #[test]
    fn summary_skips_failed_rows_in_statistics() {
        let outcomes = vec![
            outcome("s", Method::Enkf, 4, 0, 0.2, ""),
            outcome("s", Method::Enkf, 4, 1, 0.4, ""),
            outcome("s", Method::Enkf, 4, 2, f64::NAN, "boom"),
        ];
        let s = summarize(&outcomes);
        assert_eq!(s.len(), 1);
        assert_eq!((s[0].count, s[0].failures), (3, 1));
        assert!((s[0].cov_mean - 0.3).abs() < 1e-15);
        assert_eq!((s[0].cov_min, s[0].cov_max), (0.2, 0.4));
    }

    #[test]
    fn results_file_has_the_documented_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(RESULTS_FILE);
        write_results(&path, &[outcome("s", Method::Kf, 4, 0, 0.0, "")]).unwrap();
        let text = fs::read_to_string(path).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "scenario,method,rank,seed,rmse_mean_vs_kf,cov_rel_frob_vs_kf,total_loglik,wall_ms,error"
        );
        assert!(text.lines().nth(1).unwrap().starts_with("s,kf,4,0,"));
    }

    #[test]
    fn file_stems_are_filesystem_safe() {
        assert_eq!(file_stem("matern_sweep:lx=0.25"), "matern_sweep_lx_0.25");
    }
}
