//! `aim` — run one intersection simulation or a comparison grid.
//!
//! ```text
//! aim run     --algo ddswa --sigma 0.1 --out-dir out/
//! aim compare --algo ddswa,fifo,signal --sigma 0.1,0.3 --trials 20 --out-dir out/
//! ```
//!
//! `--config` points at a TOML file with the run template; every flag
//! overrides the corresponding field. `run` writes `report.json`,
//! `vehicles.csv`, `rounds.csv`, and `arrivals.csv`; `compare` writes
//! `report.json` plus `figs/*.csv`, one file per metric.

use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use aim_core::config::{Algorithm, RunConfig};
use aim_core::engine;
use aim_core::harness::{self, ComparisonSpec, RatePattern};

#[derive(Parser)]
#[command(name = "aim", about = "Autonomous intersection management simulator", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a single configured run.
    Run(RunArgs),
    /// Run an algorithm × arrival-rate comparison grid.
    Compare(CompareArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// TOML run template; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed for the arrival streams.
    #[arg(long)]
    seed: Option<u64>,
    /// Sample step, s.
    #[arg(long)]
    dt: Option<f64>,
    /// Largest batch the exhaustive search accepts before refusing.
    #[arg(long)]
    max_batch: Option<usize>,
    /// Where to write reports; stdout-only when omitted.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl CommonArgs {
    fn base_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)
                .with_context(|| format!("loading config {}", path.display()))?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(dt) = self.dt {
            cfg.dt = dt;
        }
        if let Some(max_batch) = self.max_batch {
            cfg.max_batch = max_batch;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Coordination algorithm: ddswa, fifo, combined, or signal.
    #[arg(long)]
    algo: Option<Algorithm>,
    /// Uniform arrival rate applied to every lane, veh/s.
    #[arg(long)]
    sigma: Option<f64>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated algorithms.
    #[arg(long, value_delimiter = ',', default_value = "ddswa,fifo")]
    algo: Vec<Algorithm>,
    /// Comma-separated arrival-rate grid, veh/s/lane.
    #[arg(long, value_delimiter = ',', default_value = "0.05")]
    sigma: Vec<f64>,
    /// Seeded repetitions per cell.
    #[arg(long, default_value_t = 20)]
    trials: u32,
    /// Lane-rate pattern: uniform, or alternating (σ, σ/2, ...).
    #[arg(long, default_value = "uniform")]
    pattern: String,
    /// Weight profile: throughput, inhomogeneous, or comfort.
    #[arg(long)]
    profile: Option<String>,
    /// Fixed-time cycles simulated per trial.
    #[arg(long, default_value_t = 10)]
    cycles: u32,
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let mut cfg = args.common.base_config()?;
    if let Some(algo) = args.algo {
        cfg.algorithm = algo;
    }
    if let Some(sigma) = args.sigma {
        cfg.set_uniform_rate(sigma);
    }
    let out = engine::run(&cfg).context("simulation failed")?;
    let crossed = out.vehicles.iter().filter(|v| v.crossed).count();
    println!(
        "{}: {:.1} s simulated, {} admitted, {} crossed, {} planning events, safety {}",
        cfg.algorithm.name(),
        out.duration,
        out.vehicles.len(),
        crossed,
        out.rounds.len(),
        if out.safety.passed() { "pass" } else { "FAIL" }
    );
    if let Some(ttc) = harness::avg_ttc(&out.vehicles) {
        println!("avg time to cross: {ttc:.3} s");
    }
    if let Some(obj) = harness::avg_objective(&out.vehicles) {
        println!("avg objective: {obj:.3}");
    }
    if let Some(dir) = &args.common.out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), out.canonical_json())?;
        fs::write(dir.join("vehicles.csv"), out.vehicles_csv())?;
        fs::write(dir.join("rounds.csv"), out.rounds_csv())?;
        fs::write(dir.join("arrivals.csv"), out.arrivals.to_csv())?;
        println!("wrote report.json, vehicles.csv, rounds.csv, arrivals.csv to {}", dir.display());
    }
    Ok(())
}

fn cmd_compare(args: &CompareArgs) -> Result<()> {
    let pattern = match args.pattern.as_str() {
        "uniform" => RatePattern::Uniform,
        "alternating" => RatePattern::Alternating,
        other => anyhow::bail!("unknown pattern {other:?} (expected uniform or alternating)"),
    };
    let spec = ComparisonSpec {
        base: args.common.base_config()?,
        algorithms: args.algo.clone(),
        sigmas: args.sigma.clone(),
        trials: args.trials,
        pattern,
        profile: args.profile.clone(),
        cycles: args.cycles,
    };
    let report = harness::run_comparison(&spec).context("comparison failed")?;
    println!("algorithm  sigma    trials  avg_ttc   avg_obj    realized  refused");
    for cell in &report.cells {
        let f = |v: Option<f64>| v.map_or_else(|| "-".into(), |x| format!("{x:.3}"));
        println!(
            "{:<10} {:<8} {:<7} {:<9} {:<10} {:<9} {}",
            cell.algorithm.name(),
            cell.sigma,
            cell.trials,
            f(cell.avg_ttc),
            f(cell.avg_objective),
            f(cell.realized_rate),
            cell.refused
        );
    }
    if let Some(dir) = &args.common.out_dir {
        harness::write_report(&report, dir).context("writing report")?;
        println!("wrote report.json and figs/*.csv to {}", dir.display());
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run(args) => cmd_run(&args),
        Command::Compare(args) => cmd_compare(&args),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn example_configs_load_and_echo() {
        let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs");
        for name in ["default.toml", "heavy-signal.toml", "combined-exact.toml"] {
            let cfg = RunConfig::load(format!("{dir}/{name}"))
                .unwrap_or_else(|e| panic!("{name}: {e}"));
            let echoed = RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
            assert_eq!(cfg, echoed, "{name} does not round-trip");
        }
        let default = RunConfig::load(format!("{dir}/default.toml")).unwrap();
        assert_eq!(default, RunConfig::default(), "default.toml drifted from the built-ins");
    }

    #[test]
    fn flags_parse_into_overrides() {
        let cli = Cli::parse_from([
            "aim", "compare", "--algo", "ddswa,signal", "--sigma", "0.1,0.3", "--trials", "5",
            "--seed", "9", "--dt", "0.1", "--max-batch", "4", "--pattern", "alternating",
        ]);
        let Command::Compare(args) = cli.command else { panic!("expected compare") };
        assert_eq!(args.algo, vec![Algorithm::Ddswa, Algorithm::Signal]);
        assert_eq!(args.sigma, vec![0.1, 0.3]);
        assert_eq!(args.trials, 5);
        assert_eq!(args.pattern, "alternating");
        let cfg = args.common.base_config().unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.max_batch, 4);
    }
}
