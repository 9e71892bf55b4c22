use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use rrkf_harness::acceptance::run_criteria;
use rrkf_harness::bench::{run_scaling_benchmark, write_bench};
use rrkf_harness::config::{parse_list, ExperimentConfig, Method, ScenarioKind};
use rrkf_harness::experiment::run_experiment;
use rrkf_harness::export::export_data;

/// Rank-reduced Kalman filter experiments.
#[derive(Debug, Parser)]
#[command(name = "rrkf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario grid and write results.csv with its companions.
    Run(RunArgs),
    /// Time filter passes over a range of state dimensions.
    Bench(RunArgs),
    /// Check the acceptance criteria.
    Verify(VerifyArgs),
    /// Write the generated measurements and ground truth as CSV.
    ExportData(RunArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scenario to run with default settings when no config is given.
    #[arg(long, value_parser = parse_scenario)]
    scenario: Option<ScenarioKind>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    threads: Option<usize>,
    /// Comma-separated ranks (overrides the config).
    #[arg(long)]
    rank: Option<String>,
    /// Comma-separated methods out of rrkf, kf, enkf, etkf (overrides the config).
    #[arg(long)]
    method: Option<String>,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// Comma-separated criterion numbers; all when omitted.
    #[arg(long)]
    only: Option<String>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    threads: Option<usize>,
}

fn parse_scenario(s: &str) -> Result<ScenarioKind, String> {
    toml::Value::String(s.to_string())
        .try_into()
        .map_err(|_| format!("unknown scenario `{s}`; expected advection, matern_sweep, runtime_best, runtime_worst, rank_collapse or zscore"))
}

impl RunArgs {
    fn config(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match (&self.config, self.scenario) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, Some(s)) => ExperimentConfig::for_scenario(s),
            (None, None) => anyhow::bail!("either --config or --scenario is required"),
        };
        if let Some(s) = self.scenario {
            cfg.scenario = s;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(r) = &self.rank {
            cfg.ranks = Some(parse_list::<usize>(r, "--rank")?);
        }
        if let Some(m) = &self.method {
            cfg.methods = Some(parse_list::<Method>(m, "--method")?);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn init_threads(threads: Option<usize>) -> anyhow::Result<()> {
    if let Some(t) = threads {
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global().context("cannot configure the thread pool")?;
    }
    Ok(())
}

/// 0 on success, 2 when some rows or criteria failed, 1 on errors.
fn execute(cli: Cli) -> anyhow::Result<u8> {
    match cli.command {
        Command::Run(args) => {
            init_threads(args.threads)?;
            let cfg = args.config()?;
            if cfg.scenario.is_benchmark() {
                anyhow::bail!("`{}` is a benchmark scenario; use `rrkf bench`", cfg.scenario.name());
            }
            let report = run_experiment(&cfg)?;
            println!(
                "{} rows ({} failed) written to {}",
                report.outcomes.len(),
                report.failures,
                report.output_dir.display()
            );
            Ok(if report.failures > 0 { 2 } else { 0 })
        }
        Command::Bench(args) => {
            init_threads(args.threads)?;
            let cfg = args.config()?;
            let report = run_scaling_benchmark(&cfg)?;
            write_bench(&cfg.output_dir, &cfg, &report)?;
            for p in &report.points {
                println!("n = {:>6}: median {:.3} ms", p.n, p.median_ms);
            }
            println!(
                "log-log slope {:.3} (band [{}, {}]): {}",
                report.slope,
                report.band[0],
                report.band[1],
                if report.within_band() { "within band" } else { "outside band" }
            );
            Ok(if report.within_band() { 0 } else { 2 })
        }
        Command::Verify(args) => {
            init_threads(args.threads)?;
            let ids = match &args.only {
                Some(s) => parse_list::<usize>(s, "--only")?,
                None => Vec::new(),
            };
            let reports = run_criteria(&ids, |r| println!("{r}"));
            let failed = reports.iter().filter(|r| !r.passed).count();
            println!("{} of {} criteria passed", reports.len() - failed, reports.len());
            Ok(if failed > 0 { 2 } else { 0 })
        }
        Command::ExportData(args) => {
            let cfg = args.config()?;
            for path in export_data(&cfg, &cfg.output_dir)? {
                println!("{}", path.display());
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
