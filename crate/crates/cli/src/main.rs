use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};

use bcr_core::harness::{
    compare_report, evaluate_checkpoint, expand_matrix, load_artifacts, run_matrix, run_one, save_trajectories,
    selftest, AlgorithmRuns, ExperimentConfig, HarnessError, RunOptions,
};
use bcr_core::ppo::Algorithm;
use clap::{Args, Parser, Subcommand};

static CANCEL: AtomicBool = AtomicBool::new(false);

#[derive(Parser)]
#[command(name = "bcr", version, about = "Behavior- and context-aware reward PPO for human-AI coordination")]
struct Cli {
    /// Print per-epoch progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Preset name (e.g. exploration_bcr) or path to a TOML config.
    #[arg(long, default_value = "exploration_bcr")]
    config: String,
    /// Dotted `key=value` override, repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output root for run directories.
    #[arg(long, env = "BCR_OUT_ROOT", default_value = "runs")]
    out: PathBuf,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig, HarnessError> {
        ExperimentConfig::load(&self.config)?.with_overrides(&self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one algorithm for one seed, then evaluate it.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        algorithm: Option<String>,
    },
    /// Evaluate a saved checkpoint.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the evaluation episodes as NDJSON to this file.
        #[arg(long, value_name = "PATH")]
        record_trajectory: Option<PathBuf>,
    },
    /// Run every (algorithm, seed) pair and write a comparison report.
    Matrix {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated seeds; defaults to the config's list.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Comma-separated algorithms; defaults to all five.
        #[arg(long, value_delimiter = ',')]
        algorithms: Vec<String>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Summarize the runs found under an output root.
    Report {
        #[arg(long, env = "BCR_OUT_ROOT", default_value = "runs")]
        out: PathBuf,
        /// Preset or TOML supplying the report settings.
        #[arg(long, default_value = "exploration_bcr")]
        config: String,
    },
    /// Print the resolved configuration as TOML.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Check the intrinsic reward terms against closed forms.
    Selftest,
}

fn parse_algorithms(names: &[String]) -> Result<Vec<Algorithm>, HarnessError> {
    if names.is_empty() {
        return Ok(Algorithm::ALL.to_vec());
    }
    names
        .iter()
        .map(|n| Algorithm::parse(n).ok_or_else(|| HarnessError::Config(format!("unknown algorithm {n:?}"))))
        .collect()
}

fn announce(cfg: &ExperimentConfig) {
    println!(
        "config_hash={} env={} algorithm={} seed={}",
        cfg.hash(),
        cfg.env,
        cfg.algorithm,
        cfg.training.seed
    );
}

fn write_report(out: &std::path::Path, cfg: &ExperimentConfig) -> Result<(), HarnessError> {
    let artifacts = load_artifacts(out)?;
    let groups = AlgorithmRuns::group(&artifacts);
    let report = compare_report(&groups, &cfg.report)?;
    report.write(out)?;
    print!("{}", report.to_text());
    Ok(())
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Train { cfg, seed, algorithm } => {
            let base = cfg.resolve()?;
            let algo = match algorithm {
                Some(a) => parse_algorithms(&[a])?[0],
                None => base.algorithm,
            };
            let run_cfg = base.for_run(algo, seed.unwrap_or(base.seeds[0]));
            announce(&run_cfg);
            let mut opts = RunOptions::new(&cfg.out);
            opts.cancel = Some(&CANCEL);
            opts.verbose = cli.verbose;
            let art = run_one(&run_cfg, &opts)?;
            let last = art.metrics.last().map_or(0.0, |m| m.mean_sparse);
            println!(
                "run_dir={} epochs={} cancelled={} last_sparse={last:.3} eval_mean={}",
                art.dir.display(),
                art.summary.epochs_completed,
                art.summary.cancelled,
                art.eval.map_or("n/a".to_string(), |e| format!("{:.3}", e.mean_sparse))
            );
        }
        Command::Eval {
            cfg,
            checkpoint,
            episodes,
            seed,
            record_trajectory,
        } => {
            let base = cfg.resolve()?;
            let run_cfg = base.for_run(base.algorithm, seed.unwrap_or(base.seeds[0]));
            announce(&run_cfg);
            let n = episodes.unwrap_or(run_cfg.eval_episodes);
            let (result, trajs) = evaluate_checkpoint(&run_cfg, &checkpoint, n, record_trajectory.is_some())?;
            if let Some(path) = record_trajectory {
                save_trajectories(&path, &trajs)?;
            }
            println!(
                "episodes={} mean_sparse={:.4} std_sparse={:.4}",
                result.episodes, result.mean_sparse, result.std_sparse
            );
        }
        Command::Matrix {
            cfg,
            seeds,
            algorithms,
            workers,
        } => {
            let mut base = cfg.resolve()?;
            if !seeds.is_empty() {
                base.seeds = seeds;
            }
            let algos = parse_algorithms(&algorithms)?;
            let configs = expand_matrix(&base, &algos);
            for c in &configs {
                announce(c);
            }
            let mut opts = RunOptions::new(&cfg.out);
            opts.cancel = Some(&CANCEL);
            opts.verbose = cli.verbose;
            opts.workers = workers;
            let results = run_matrix(&configs, &opts);
            let mut failures = 0;
            for r in &results {
                if let Err(f) = r {
                    failures += 1;
                    eprintln!("run {} seed {} failed ({}): {}", f.algorithm, f.seed, f.error.kind(), f.error);
                }
            }
            if failures < results.len() {
                write_report(&cfg.out, &base)?;
            }
            if failures > 0 {
                let msg = format!("{failures} of {} runs failed", results.len());
                let diverged = results
                    .iter()
                    .any(|r| matches!(r, Err(f) if matches!(f.error, HarnessError::Divergence(_))));
                return Err(if diverged {
                    HarnessError::Divergence(msg)
                } else {
                    HarnessError::Run(msg)
                });
            }
        }
        Command::Report { out, config } => {
            let cfg = ExperimentConfig::load(&config)?;
            write_report(&out, &cfg)?;
        }
        Command::Config { cfg } => {
            let c = cfg.resolve()?;
            println!("# config_hash = {}", c.hash());
            print!("{}", c.to_toml());
        }
        Command::Selftest => {
            let r = selftest();
            for l in &r.lines {
                println!("{l}");
            }
            if !r.passed {
                return Err(HarnessError::Run("selftest failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let _ = ctrlc::set_handler(|| {
        if CANCEL.swap(true, Ordering::SeqCst) {
            std::process::exit(130);
        }
        eprintln!("interrupt: finishing the current epoch, press again to abort");
    });
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
