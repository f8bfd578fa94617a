mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cbrl_core::experiments::{builtin_grid, run_sweep, run_training, RunRecord, SweepOptions, TOOL_VERSION};
use cbrl_core::Error;

/// Chaos-based reinforcement learning experiments.
#[derive(Parser, Debug)]
#[command(name = "cbrl", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML scenario file; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the total number of training steps.
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one seed and write its run record.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        dump_trajectories: bool,
        #[arg(long)]
        dump_reservoir: bool,
    },
    /// Run a built-in grid over several seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// One of: g, lr-grid, gauss-sigma, ou, random-scale, rsv-size, rsv-conn.
        #[arg(long)]
        grid: String,
        /// Seed list such as `0,1,2` or a range `0..10`; defaults to the config.
        #[arg(long)]
        seeds: Option<String>,
        /// Worker threads; 0 uses every core.
        #[arg(long, default_value_t = 0)]
        workers: usize,
    },
    /// Derive analysis tables from run records.
    Analyze {
        #[arg(long, value_enum)]
        kind: AnalysisKind,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Principal components kept by `pca`.
        #[arg(long, default_value_t = 2)]
        components: usize,
        /// Run record files or directories containing them.
        #[arg(required = true)]
        records: Vec<PathBuf>,
    },
    /// Re-run a test battery from a record's final parameters.
    Replay {
        record: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Battery step whose goal is used; defaults to the record's last battery.
        #[arg(long)]
        step: Option<u64>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AnalysisKind {
    Curves,
    Weights,
    Pca,
    Divergence,
}

fn parse_seeds(spec: &str) -> Result<Vec<u64>, Error> {
    let bad = || Error::Config(format!("cannot parse seed list {spec:?}"));
    if let Some((a, b)) = spec.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        return if a < b { Ok((a..b).collect()) } else { Err(bad()) };
    }
    spec.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect()
}

fn prepare_out(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))
}

fn load_scenario(common: &Common) -> Result<cbrl_core::experiments::ScenarioConfig, Error> {
    let mut sc = config::load(common.config.as_deref(), config::env_overrides(std::env::vars()))?;
    if let Some(steps) = common.steps {
        sc.total_steps = steps;
    }
    sc.resolve()
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Train { common, seed, dump_trajectories, dump_reservoir } => {
            let mut sc = load_scenario(&common)?;
            sc.dump.trajectories |= dump_trajectories;
            sc.dump.reservoir |= dump_reservoir;
            prepare_out(&common.out)?;
            let record = run_training(&sc, seed)?;
            output::write_run(&common.out, &record)?;
            let last = record.final_battery().map(|b| b.mean_steps).unwrap_or(f64::NAN);
            eprintln!("seed {seed}: success={} final mean steps {last:.1}", record.success);
            if let Some(msg) = &record.failure {
                eprintln!("numeric failure: {msg}");
                return Ok(ExitCode::from(1));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep { common, grid, seeds, workers } => {
            let sc = load_scenario(&common)?;
            let seeds = match seeds {
                Some(s) => parse_seeds(&s)?,
                None => sc.seeds.clone(),
            };
            let cells = builtin_grid(&grid, &sc)?;
            prepare_out(&common.out)?;
            let cache = common.out.join("cache");
            prepare_out(&cache)?;
            let opts = SweepOptions { workers, cache_dir: Some(cache) };
            let table = run_sweep(&cells, &seeds, &opts)?;
            output::write_sweep(&common.out, &grid, &sc, &seeds, &table)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Analyze { kind, out, components, records } => {
            let records = load_records(&records)?;
            prepare_out(&out)?;
            match kind {
                AnalysisKind::Curves => output::write_curves(&out, &records)?,
                AnalysisKind::Weights => output::write_weights(&out, &records)?,
                AnalysisKind::Pca => output::write_pca(&out, &records, components)?,
                AnalysisKind::Divergence => output::write_divergence(&out, &records)?,
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Replay { record, out, step } => {
            let rec = RunRecord::read_json(&record)?;
            prepare_out(&out)?;
            output::write_replay(&out, &rec, step)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn load_records(paths: &[PathBuf]) -> Result<Vec<RunRecord>, Error> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| Error::Io(format!("{}: {e}", p.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    f.extension().is_some_and(|x| x == "json")
                        && f.file_name().is_some_and(|n| n.to_string_lossy().starts_with("run-"))
                })
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        return Err(Error::Config("no run records found".into()));
    }
    files.iter().map(|f| RunRecord::read_json(f)).collect()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{TOOL_VERSION}: {e}");
            ExitCode::from(match e {
                Error::Numeric(_) => 1,
                _ => 2,
            })
        }
    }
}
