use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL_ADVECTION: &str = r#"
scenario = "advection"
ranks = [5, 12]
seeds = 3
seed = 11
metric_stride = 5

[advection]
n = 128
steps = 30
obs_count = 8
"#;

fn rrkf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rrkf")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

/// results.csv without the wall-clock column.
fn without_wall_time(path: &Path) -> Vec<String> {
    let text = fs::read_to_string(path).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let wall = header.iter().position(|h| *h == "wall_ms").unwrap();
    text.lines()
        .map(|l| l.split(',').enumerate().filter(|(i, _)| *i != wall).map(|(_, f)| f).collect::<Vec<_>>().join(","))
        .collect()
}

#[test]
fn run_is_reproducible_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_ADVECTION);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let out_a = rrkf(&["run", "--config", &cfg, "--out", a.to_str().unwrap(), "--threads", "1"]);
    assert!(out_a.status.success(), "{}", String::from_utf8_lossy(&out_a.stderr));
    let out_b = rrkf(&["run", "--config", &cfg, "--out", b.to_str().unwrap(), "--threads", "3"]);
    assert!(out_b.status.success(), "{}", String::from_utf8_lossy(&out_b.stderr));

    let rows = without_wall_time(&a.join("results.csv"));
    assert_eq!(rows, without_wall_time(&b.join("results.csv")));
    // rrkf at two ranks, kf once, two ensembles at two ranks with three seeds.
    assert_eq!(rows.len(), 1 + 2 + 1 + 2 * 2 * 3);
    assert!(rows[1].starts_with("advection,rrkf,5,11,"));
    let kf: Vec<&str> = rows[3].split(',').collect();
    assert_eq!(&kf[..4], ["advection", "kf", "128", "11"]);
    assert_eq!(kf[4].parse::<f64>().unwrap(), 0.0);
    assert!(kf[5].parse::<f64>().unwrap() < 1e-10, "{}", rows[3]);
    assert!(rows[4].starts_with("advection,enkf,5,11,"));
    assert!(rows.iter().skip(1).all(|r| r.ends_with(',')), "no row should carry an error");
    for file in ["summary.csv", "run_manifest.toml"] {
        assert!(a.join(file).exists(), "{file} missing");
    }
    let manifest = fs::read_to_string(a.join("run_manifest.toml")).unwrap();
    assert!(manifest.contains("ensemble_seeds = [11, 12, 13]"), "{manifest}");
}

#[test]
fn command_line_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_ADVECTION);
    let out = dir.path().join("o");
    let res = rrkf(&["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--rank", "7", "--method", "rrkf", "--seed", "4"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let rows = without_wall_time(&out.join("results.csv"));
    assert_eq!(rows.len(), 2);
    assert!(rows[1].starts_with("advection,rrkf,7,4,"));
}

#[test]
fn invalid_configs_exit_with_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad_key = write_config(dir.path(), "scenario = \"advection\"\nrankz = [3]\n");
    let res = rrkf(&["run", "--config", &bad_key]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("rankz"));

    let too_large = write_config(dir.path(), "scenario = \"advection\"\nranks = [5000]\n");
    let res = rrkf(&["run", "--config", &too_large]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("exceeds the state dimension"));

    let res = rrkf(&["run", "--scenario", "runtime_best"]);
    assert_eq!(res.status.code(), Some(1));
    let res = rrkf(&["run", "--scenario", "nonsense"]);
    assert!(!res.status.success());
}

#[test]
fn dense_reference_beyond_the_cap_marks_rows_as_failed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("dense_cap = 64\nmethods = [\"rrkf\", \"kf\"]\n{SMALL_ADVECTION}"));
    let out = dir.path().join("o");
    let res = rrkf(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2), "{}", String::from_utf8_lossy(&res.stderr));
    let rows = without_wall_time(&out.join("results.csv"));
    let kf = rows.iter().find(|r| r.starts_with("advection,kf,")).unwrap();
    assert!(kf.contains("exceeds the configured cap"), "{kf}");
    let rrkf_row = rows.iter().find(|r| r.starts_with("advection,rrkf,5,")).unwrap();
    assert!(rrkf_row.contains("NaN") && rrkf_row.ends_with(','), "{rrkf_row}");
}

#[test]
fn export_and_bench_write_their_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let res = rrkf(&["export-data", "--scenario", "rank_collapse", "--out", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(out.join("rank_collapse_observations.csv").exists());
    assert!(out.join("rank_collapse_truth.csv").exists());

    let cfg = write_config(
        dir.path(),
        "scenario = \"runtime_best\"\n[runtime]\nsizes = [128, 256]\nrepetitions = 2\nmin_total_ms = 0.0\n[advection]\nsteps = 10\n",
    );
    let bench = dir.path().join("bench");
    let res = rrkf(&["bench", "--config", &cfg, "--out", bench.to_str().unwrap()]);
    assert_ne!(res.status.code(), Some(1), "{}", String::from_utf8_lossy(&res.stderr));
    let timings = fs::read_to_string(bench.join("bench_timings.csv")).unwrap();
    assert_eq!(timings.lines().count(), 1 + 2 * 2);
    assert!(bench.join("bench_manifest.toml").exists());
}

#[test]
fn verify_runs_selected_criteria() {
    let res = rrkf(&["verify", "--only", "7"]);
    assert!(res.status.success());
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert!(stdout.contains("criterion  7 [PASS]"), "{stdout}");
    assert!(stdout.contains("1 of 1 criteria passed"));
}
