//! Export of the generated measurements and ground truth.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rrkf::models::data::observed_series;
use rrkf::models::{export_series, Problem};

use crate::bench::bench_problem;
use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::experiment::prepare_problems;

fn problems(cfg: &ExperimentConfig) -> Result<Vec<(String, Problem)>> {
    if cfg.scenario.is_benchmark() {
        return cfg
            .runtime_sizes()
            .into_iter()
            .map(|n| Ok((format!("{}:n={n}", cfg.scenario.name()), bench_problem(cfg, n)?)))
            .collect();
    }
    prepare_problems(cfg)
}

fn stem(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect()
}

/// Write `<label>_observations.csv` and `<label>_truth.csv` for every
/// problem of the scenario; returns the written paths.
pub fn export_data(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (label, p) in problems(cfg)? {
        let obs_path = dir.join(format!("{}_observations.csv", stem(&label)));
        export_series(BufWriter::new(File::create(&obs_path)?), &observed_series(&p.observations))?;
        let truth: Vec<_> = p.times.iter().copied().zip(p.truth.iter().cloned()).collect();
        let truth_path = dir.join(format!("{}_truth.csv", stem(&label)));
        export_series(BufWriter::new(File::create(&truth_path)?), &truth)?;
        written.extend([obs_path, truth_path]);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ScenarioKind;
    use rrkf::models::import_series;
    use std::io::BufReader;

    #[test]
    fn exported_observations_round_trip() {
        let mut cfg = ExperimentConfig::for_scenario(ScenarioKind::RankCollapse);
        cfg.subspace.n = Some(40);
        cfg.subspace.steps = Some(4);
        cfg.subspace.m = Some(10);
        let dir = tempfile::tempdir().unwrap();
        let paths = export_data(&cfg, dir.path()).unwrap();
        assert_eq!(paths.len(), 2);
        let back = import_series(BufReader::new(File::open(&paths[0]).unwrap())).unwrap();
        let p = &prepare_problems(&cfg).unwrap()[0].1;
        assert_eq!(back, observed_series(&p.observations));
        let truth = import_series(BufReader::new(File::open(&paths[1]).unwrap())).unwrap();
        assert_eq!(truth.len(), p.steps());
        assert_eq!(truth[0].1, p.truth[0]);
    }
}
