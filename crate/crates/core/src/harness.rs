//! Experiment configuration, multi-seed run orchestration and reporting.
//!
//! A run writes `<out>/<env>-<algorithm>/seed-<seed>/` containing the
//! resolved `config.toml`, an append-only `metrics.jsonl`, `checkpoints/`,
//! `eval.json` and a `run.json` summary carrying the config hash.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::env::{CoordinationEnv, EnvError, EnvKind, Trajectory};
use crate::exploration::{ExplorationConfig, ExplorationEnv};
use crate::human::{HumanConfig, HumanError, HumanKind, HumanModel};
use crate::kitchen::{KitchenConfig, MiniKitchenEnv};
use crate::nn::{checkpoint, NnError, PolicyParameters};
use crate::ppo::{evaluate, train, Algorithm, EpochMetrics, EvalResult, PpoError, TrainingConfig};
use crate::reward::{entropy_term, log_intrinsic, BcrConfig, ProbGuard};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("{0}")]
    Run(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl HarnessError {
    /// Process exit code for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Divergence(_) => 3,
            _ => 1,
        }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Config(_) => "config",
            HarnessError::Divergence(_) => "divergence",
            HarnessError::Run(_) => "run",
            HarnessError::Io { .. } => "io",
        }
    }
}

impl From<PpoError> for HarnessError {
    fn from(e: PpoError) -> Self {
        match e {
            PpoError::Divergence { .. } | PpoError::Nn(NnError::Divergence(_)) => {
                HarnessError::Divergence(e.to_string())
            }
            PpoError::Contract(_) | PpoError::Reward(_) | PpoError::Human(_) => HarnessError::Config(e.to_string()),
            other => HarnessError::Run(other.to_string()),
        }
    }
}

impl From<EnvError> for HarnessError {
    fn from(e: EnvError) -> Self {
        match e {
            EnvError::Layout(_) | EnvError::Generation(_) => HarnessError::Config(e.to_string()),
            other => HarnessError::Run(other.to_string()),
        }
    }
}

impl From<HumanError> for HarnessError {
    fn from(e: HumanError) -> Self {
        HarnessError::Config(e.to_string())
    }
}

/// Construction failures stem from the configuration (sizes, layout files).
fn env_config_error(e: EnvError) -> HarnessError {
    HarnessError::Config(format!("environment: {e}"))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reference maximum used by the plateau rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConvergenceReference {
    /// Maximum moving average over the whole curve.
    FullCurve,
    /// Maximum moving average up to the epoch being tested.
    Running,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    /// Fraction of final epochs forming the final window.
    pub final_window_fraction: f64,
    pub ma_window: usize,
    pub threshold: f64,
    pub reference: ConvergenceReference,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            final_window_fraction: 0.1,
            ma_window: 10,
            threshold: 0.9,
            reference: ConvergenceReference::FullCurve,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub algorithm: Algorithm,
    pub env: EnvKind,
    pub seeds: Vec<u64>,
    pub eval_episodes: usize,
    pub training: TrainingConfig,
    pub bcr: BcrConfig,
    pub human: HumanConfig,
    pub exploration: ExplorationConfig,
    pub kitchen: KitchenConfig,
    pub report: ReportConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            version: CONFIG_VERSION,
            algorithm: Algorithm::Bcr,
            env: EnvKind::Exploration,
            seeds: vec![1, 2, 3, 4, 5],
            eval_episodes: 2000,
            training: TrainingConfig::default(),
            bcr: BcrConfig::default(),
            human: HumanConfig::default(),
            exploration: ExplorationConfig::default(),
            kitchen: KitchenConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

/// Names accepted by [`preset`]: `<env>_<algorithm>` with dashes turned
/// into underscores, e.g. `exploration_bcr`, `kitchen_ppo_baseline`.
pub fn preset_names() -> Vec<String> {
    let mut v = Vec::new();
    for env in ["exploration", "kitchen"] {
        for a in Algorithm::ALL {
            v.push(format!("{env}_{}", a.name().replace('-', "_")));
        }
    }
    v
}

/// Tuned exploration setup: short discount, larger steps and more reuse per
/// epoch than the generic PPO defaults; smaller intrinsic coefficients for
/// the small board.
fn exploration_base() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.training.gamma = 0.9;
    c.training.learning_rate = 1e-3;
    c.training.minibatch_size = 100;
    c.training.sgd_passes = 6;
    c.bcr.lambda_ai = 0.2;
    c.bcr.lambda_human = 0.01;
    c.bcr.n_threshold = 50;
    c
}

fn kitchen_base() -> ExperimentConfig {
    let mut c = exploration_base();
    c.env = EnvKind::MiniKitchen;
    c.human = HumanConfig {
        kind: HumanKind::KitchenScripted,
        period: 1,
        ..HumanConfig::default()
    };
    c.training.gamma = 0.99;
    c
}

pub fn preset(name: &str) -> Option<ExperimentConfig> {
    let (env, algo) = name.split_once('_')?;
    let algorithm = Algorithm::parse(&algo.replace('_', "-"))?;
    let mut c = match env {
        "exploration" => exploration_base(),
        "kitchen" => kitchen_base(),
        _ => return None,
    };
    c.algorithm = algorithm;
    Some(c)
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let c: ExperimentConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// A preset name or a path to a TOML file.
    pub fn load(source: &str) -> Result<Self, HarnessError> {
        if let Some(c) = preset(source) {
            return Ok(c);
        }
        let path = Path::new(source);
        if !path.exists() {
            return Err(HarnessError::Config(format!(
                "no preset or file named {source:?} (presets: {})",
                preset_names().join(", ")
            )));
        }
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.version != CONFIG_VERSION {
            return Err(HarnessError::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("seeds must not be empty".into()));
        }
        self.training.validate()?;
        self.bcr.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        let r = &self.report;
        if !(r.final_window_fraction > 0.0 && r.final_window_fraction <= 1.0) || r.ma_window == 0 {
            return Err(HarnessError::Config("report window settings out of range".into()));
        }
        if !(r.threshold > 0.0 && r.threshold <= 1.0) {
            return Err(HarnessError::Config("report.threshold must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Applies `key=value` overrides addressed by dotted paths. Keys must
    /// already exist; values are parsed as TOML, falling back to a string.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self, HarnessError> {
        let mut root = toml::Value::try_from(self).map_err(|e| HarnessError::Config(e.to_string()))?;
        for ov in overrides {
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("override {ov:?} is not key=value")))?;
            let key = key.trim();
            let value = parse_override_value(raw.trim());
            let mut node = &mut root;
            let parts: Vec<&str> = key.split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let table = node
                    .as_table_mut()
                    .ok_or_else(|| HarnessError::Config(format!("unknown config key {key}")))?;
                let entry = table
                    .get_mut(*part)
                    .ok_or_else(|| HarnessError::Config(format!("unknown config key {key}")))?;
                if i + 1 == parts.len() {
                    *entry = coerce(entry, value.clone());
                }
                node = entry;
            }
        }
        let text = toml::to_string(&root).map_err(|e| HarnessError::Config(e.to_string()))?;
        let cfg = Self::from_toml(&text)?;
        Ok(cfg)
    }

    /// The configuration of one `(algorithm, seed)` run.
    pub fn for_run(&self, algorithm: Algorithm, seed: u64) -> Self {
        let mut c = self.clone();
        c.algorithm = algorithm;
        c.seeds = vec![seed];
        c.training.seed = seed;
        c
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes to JSON");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn run_dir(&self, out_root: &Path) -> PathBuf {
        out_root
            .join(format!("{}-{}", self.env.name(), self.algorithm.name()))
            .join(format!("seed-{}", self.training.seed))
    }

    fn human_model(&self, env: &dyn CoordinationEnvDescriptor) -> Result<HumanModel, HarnessError> {
        Ok(HumanModel::new(self.human.clone(), env.describe())?)
    }
}

trait CoordinationEnvDescriptor {
    fn describe(&self) -> crate::env::EnvDescriptor;
}

impl<E: CoordinationEnv> CoordinationEnvDescriptor for E {
    fn describe(&self) -> crate::env::EnvDescriptor {
        self.descriptor()
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn coerce(existing: &toml::Value, new: toml::Value) -> toml::Value {
    match (existing, new) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (_, v) => v,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub algorithm: Algorithm,
    pub env: EnvKind,
    pub seed: u64,
    pub epochs_completed: usize,
    pub cancelled: bool,
    pub eval_mean_sparse: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct RunArtifact {
    pub summary: RunSummary,
    pub dir: PathBuf,
    pub metrics: Vec<EpochMetrics>,
    pub eval: Option<EvalResult>,
    pub params: Option<PolicyParameters>,
}

impl RunArtifact {
    pub fn sparse_curve(&self) -> Vec<f64> {
        self.metrics.iter().map(|m| m.mean_sparse).collect()
    }
}

/// Knobs for executing runs.
#[derive(Clone, Debug)]
pub struct RunOptions<'a> {
    pub out_root: PathBuf,
    pub workers: usize,
    pub cancel: Option<&'a AtomicBool>,
    pub verbose: bool,
    /// Write `trajectories.jsonl` with the evaluation episodes.
    pub record_trajectories: bool,
}

impl<'a> RunOptions<'a> {
    pub fn new(out_root: impl Into<PathBuf>) -> Self {
        RunOptions {
            out_root: out_root.into(),
            workers: 1,
            cancel: None,
            verbose: false,
            record_trajectories: false,
        }
    }
}

struct MetricsWriter {
    file: BufWriter<File>,
    path: PathBuf,
    interval: usize,
    ckpt_dir: PathBuf,
    verbose: bool,
    label: String,
}

impl crate::ppo::TrainObserver for MetricsWriter {
    fn on_epoch(&mut self, m: &EpochMetrics, params: &PolicyParameters) -> Result<(), PpoError> {
        let line = serde_json::to_string(m).expect("metrics serialize");
        let io = |e: std::io::Error| PpoError::Contract(format!("writing {}: {e}", self.path.display()));
        writeln!(self.file, "{line}").map_err(io)?;
        self.file.flush().map_err(io)?;
        if self.interval > 0 && (m.epoch + 1) % self.interval == 0 {
            let path = self.ckpt_dir.join(format!("epoch-{:05}.ckpt", m.epoch + 1));
            checkpoint::save(params, &path)?;
        }
        if self.verbose {
            eprintln!(
                "{} epoch {} sparse {:.2} stage {:.2} k=({:.3},{:.3},{:.3})",
                self.label, m.epoch, m.mean_sparse, m.mean_stage, m.k_ext, m.k_ai, m.k_human
            );
        }
        Ok(())
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text + "\n").map_err(io_err(path))
}

/// Trains and evaluates one fully resolved configuration.
pub fn run_one(cfg: &ExperimentConfig, opts: &RunOptions<'_>) -> Result<RunArtifact, HarnessError> {
    cfg.validate()?;
    match cfg.env {
        EnvKind::Exploration => {
            let mut env = ExplorationEnv::new(cfg.exploration.clone()).map_err(env_config_error)?;
            run_with_env(&mut env, cfg, opts)
        }
        EnvKind::MiniKitchen => {
            let mut env = MiniKitchenEnv::new(cfg.kitchen.clone()).map_err(env_config_error)?;
            run_with_env(&mut env, cfg, opts)
        }
    }
}

fn run_with_env<E: CoordinationEnv + Clone>(
    env: &mut E,
    cfg: &ExperimentConfig,
    opts: &RunOptions<'_>,
) -> Result<RunArtifact, HarnessError> {
    let human = cfg.human_model(env)?;
    let dir = cfg.run_dir(&opts.out_root);
    let ckpt_dir = dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(io_err(&ckpt_dir))?;
    let cfg_path = dir.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml()).map_err(io_err(&cfg_path))?;
    let metrics_path = dir.join("metrics.jsonl");
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(&metrics_path)
        .map_err(io_err(&metrics_path))?;
    let mut writer = MetricsWriter {
        file: BufWriter::new(file),
        path: metrics_path,
        interval: cfg.training.checkpoint_interval,
        ckpt_dir: ckpt_dir.clone(),
        verbose: opts.verbose,
        label: format!("[{} seed {}]", cfg.algorithm, cfg.training.seed),
    };
    let hash = cfg.hash();
    let outcome = train(
        env,
        &human,
        cfg.algorithm,
        &cfg.training,
        &cfg.bcr,
        &mut writer,
        opts.cancel,
    );
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => {
            let err = HarnessError::from(e);
            let failed = serde_json::json!({
                "config_hash": hash,
                "status": "failed",
                "error": err.to_string(),
            });
            write_json(&dir.join("run.json"), &failed)?;
            return Err(err);
        }
    };
    checkpoint::save(&outcome.params, &ckpt_dir.join("final.ckpt")).map_err(|e| HarnessError::Run(e.to_string()))?;
    let eval = if outcome.cancelled || cfg.eval_episodes == 0 {
        None
    } else {
        let (result, trajectories) = evaluate(
            env,
            &outcome.params,
            &human,
            cfg.eval_episodes,
            eval_seed(cfg.training.seed),
            cfg.bcr.lambda_sparse,
            opts.record_trajectories,
        )?;
        write_json(&dir.join("eval.json"), &result)?;
        if opts.record_trajectories {
            write_trajectories(&dir.join("trajectories.jsonl"), &trajectories)?;
        }
        Some(result)
    };
    let summary = RunSummary {
        config_hash: hash,
        algorithm: cfg.algorithm,
        env: cfg.env,
        seed: cfg.training.seed,
        epochs_completed: outcome.metrics.len(),
        cancelled: outcome.cancelled,
        eval_mean_sparse: eval.as_ref().map(|e| e.mean_sparse),
    };
    write_json(&dir.join("run.json"), &summary)?;
    Ok(RunArtifact {
        summary,
        dir,
        metrics: outcome.metrics,
        eval,
        params: Some(outcome.params),
    })
}

/// Evaluation episodes never share seeds with training episodes.
pub fn eval_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

fn write_trajectories(path: &Path, trajectories: &[Trajectory]) -> Result<(), HarnessError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for t in trajectories {
        t.write_to(&mut w).map_err(|e| HarnessError::Run(e.to_string()))?;
    }
    w.flush().map_err(io_err(path))
}

/// Evaluates a saved checkpoint under `cfg`.
pub fn evaluate_checkpoint(
    cfg: &ExperimentConfig,
    ckpt: &Path,
    episodes: usize,
    record: bool,
) -> Result<(EvalResult, Vec<Trajectory>), HarnessError> {
    let params = checkpoint::load(ckpt).map_err(|e| HarnessError::Config(format!("{}: {e}", ckpt.display())))?;
    fn go<E: CoordinationEnv>(
        env: &mut E,
        cfg: &ExperimentConfig,
        params: &PolicyParameters,
        episodes: usize,
        record: bool,
    ) -> Result<(EvalResult, Vec<Trajectory>), HarnessError> {
        let human = cfg.human_model(env)?;
        let d = env.descriptor();
        if params.obs_len() != d.obs_len || params.action_count() != d.action_count {
            return Err(HarnessError::Config("checkpoint does not fit the configured environment".into()));
        }
        Ok(evaluate(
            env,
            params,
            &human,
            episodes,
            eval_seed(cfg.training.seed),
            cfg.bcr.lambda_sparse,
            record,
        )?)
    }
    match cfg.env {
        EnvKind::Exploration => go(&mut ExplorationEnv::new(cfg.exploration.clone()).map_err(env_config_error)?, cfg, &params, episodes, record),
        EnvKind::MiniKitchen => go(&mut MiniKitchenEnv::new(cfg.kitchen.clone()).map_err(env_config_error)?, cfg, &params, episodes, record),
    }
}

/// Writes evaluation trajectories for the CLI.
pub fn save_trajectories(path: &Path, trajectories: &[Trajectory]) -> Result<(), HarnessError> {
    write_trajectories(path, trajectories)
}

/// One entry per `(algorithm, seed)` in the order given.
pub fn expand_matrix(base: &ExperimentConfig, algorithms: &[Algorithm]) -> Vec<ExperimentConfig> {
    algorithms
        .iter()
        .flat_map(|&a| base.seeds.iter().map(move |&s| base.for_run(a, s)))
        .collect()
}

#[derive(Debug)]
pub struct RunFailure {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub error: HarnessError,
}

/// Runs every configuration on up to `opts.workers` threads. Results come
/// back in input order; a failed run does not stop the others.
pub fn run_matrix(configs: &[ExperimentConfig], opts: &RunOptions<'_>) -> Vec<Result<RunArtifact, RunFailure>> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<RunArtifact, RunFailure>>>> =
        configs.iter().map(|_| Mutex::new(None)).collect();
    let workers = opts.workers.clamp(1, configs.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cfg) = configs.get(i) else { break };
                let result = run_one(cfg, opts).map_err(|error| RunFailure {
                    algorithm: cfg.algorithm,
                    seed: cfg.training.seed,
                    error,
                });
                *slots[i].lock().unwrap() = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every slot filled"))
        .collect()
}

/// Reads back the run directories under `out_root`.
pub fn load_artifacts(out_root: &Path) -> Result<Vec<RunArtifact>, HarnessError> {
    let mut dirs = Vec::new();
    let groups = fs::read_dir(out_root).map_err(io_err(out_root))?;
    for g in groups {
        let g = g.map_err(io_err(out_root))?.path();
        if !g.is_dir() {
            continue;
        }
        for s in fs::read_dir(&g).map_err(io_err(&g))? {
            let s = s.map_err(io_err(&g))?.path();
            if s.join("run.json").is_file() && s.join("metrics.jsonl").is_file() {
                dirs.push(s);
            }
        }
    }
    dirs.sort();
    let mut out = Vec::new();
    for dir in dirs {
        let run_path = dir.join("run.json");
        let text = fs::read_to_string(&run_path).map_err(io_err(&run_path))?;
        let Ok(summary) = serde_json::from_str::<RunSummary>(&text) else {
            continue; // failed run
        };
        let mpath = dir.join("metrics.jsonl");
        let f = File::open(&mpath).map_err(io_err(&mpath))?;
        let mut metrics = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(io_err(&mpath))?;
            if line.trim().is_empty() {
                continue;
            }
            metrics.push(
                serde_json::from_str(&line).map_err(|e| HarnessError::Run(format!("{}: {e}", mpath.display())))?,
            );
        }
        let epath = dir.join("eval.json");
        let eval = if epath.is_file() {
            let t = fs::read_to_string(&epath).map_err(io_err(&epath))?;
            serde_json::from_str(&t).ok()
        } else {
            None
        };
        out.push(RunArtifact {
            summary,
            dir,
            metrics,
            eval,
            params: None,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub mean: Vec<f64>,
    /// Sample standard deviation across runs (0 for a single run).
    pub std: Vec<f64>,
}

pub fn aggregate(curves: &[Vec<f64>]) -> Result<Aggregate, HarnessError> {
    let first = curves
        .first()
        .ok_or_else(|| HarnessError::Config("nothing to aggregate".into()))?;
    if curves.iter().any(|c| c.len() != first.len()) {
        return Err(HarnessError::Config("curves have different lengths".into()));
    }
    let n = curves.len() as f64;
    let mut mean = vec![0.0; first.len()];
    let mut std = vec![0.0; first.len()];
    for i in 0..first.len() {
        let m = curves.iter().map(|c| c[i]).sum::<f64>() / n;
        mean[i] = m;
        if curves.len() > 1 {
            std[i] = (curves.iter().map(|c| (c[i] - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        }
    }
    Ok(Aggregate { mean, std })
}

/// Trailing moving average; entry `k` covers epochs `k..k+window`.
pub fn moving_average(curve: &[f64], window: usize) -> Vec<f64> {
    curve.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
}

/// First epoch whose trailing moving average reaches `threshold` times the
/// reference maximum.
pub fn detect_convergence(
    curve: &[f64],
    window: usize,
    threshold: f64,
    reference: ConvergenceReference,
) -> Result<usize, HarnessError> {
    if window == 0 || curve.len() < window {
        return Err(HarnessError::Config(format!(
            "curve of {} epochs is shorter than the {window}-epoch window",
            curve.len()
        )));
    }
    let ma = moving_average(curve, window);
    let full_max = ma.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut running = f64::NEG_INFINITY;
    for (k, &v) in ma.iter().enumerate() {
        running = running.max(v);
        let reference = match reference {
            ConvergenceReference::FullCurve => full_max,
            ConvergenceReference::Running => running,
        };
        if v >= threshold * reference {
            return Ok(k + window - 1);
        }
    }
    Ok(curve.len() - 1)
}

/// Number of final epochs in the final window (at least one).
pub fn final_window_len(epochs: usize, fraction: f64) -> usize {
    ((epochs as f64 * fraction).ceil() as usize).clamp(1, epochs.max(1))
}

/// Per-algorithm inputs to a comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct AlgorithmRuns {
    pub algorithm: Algorithm,
    pub seeds: Vec<u64>,
    pub curves: Vec<Vec<f64>>,
    pub eval_means: Vec<f64>,
}

impl AlgorithmRuns {
    pub fn group(artifacts: &[RunArtifact]) -> Vec<AlgorithmRuns> {
        let mut map: BTreeMap<Algorithm, AlgorithmRuns> = BTreeMap::new();
        let mut sorted: Vec<&RunArtifact> = artifacts.iter().collect();
        sorted.sort_by_key(|a| (a.summary.algorithm, a.summary.seed));
        for a in sorted {
            let e = map.entry(a.summary.algorithm).or_insert_with(|| AlgorithmRuns {
                algorithm: a.summary.algorithm,
                seeds: Vec::new(),
                curves: Vec::new(),
                eval_means: Vec::new(),
            });
            e.seeds.push(a.summary.seed);
            e.curves.push(a.sparse_curve());
            if let Some(ev) = &a.eval {
                e.eval_means.push(ev.mean_sparse);
            }
        }
        map.into_values().collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlgorithmRow {
    pub algorithm: Algorithm,
    pub seeds: Vec<u64>,
    /// Mean sparse reward over the final window, per seed.
    pub seed_final_means: Vec<f64>,
    pub final_mean: f64,
    /// Sample std over every `(seed, epoch)` value in the final window.
    pub final_std: f64,
    pub convergence_epoch: usize,
    pub eval_mean: Option<f64>,
    pub aggregate: Aggregate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub baseline: Algorithm,
    /// `100 · (reference − baseline) / |baseline|`; `None` when the baseline is 0.
    pub uplift_pct: Option<f64>,
    /// `100 · (1 − e_reference / e_baseline)`; `None` when `e_baseline` is 0.
    pub efficiency_gain_pct: Option<f64>,
    pub final_mean_diff: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub reference: Algorithm,
    pub final_window: usize,
    pub rows: Vec<AlgorithmRow>,
    pub comparisons: Vec<Comparison>,
}

pub fn uplift_pct(reference: f64, baseline: f64) -> Option<f64> {
    (baseline != 0.0).then(|| 100.0 * (reference - baseline) / baseline.abs())
}

pub fn efficiency_gain_pct(reference_epoch: usize, baseline_epoch: usize) -> Option<f64> {
    (baseline_epoch != 0).then(|| 100.0 * (1.0 - reference_epoch as f64 / baseline_epoch as f64))
}

fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Summary statistics of every algorithm plus the reference algorithm's
/// uplift over each other one. The reference is BCR when present.
pub fn compare_report(groups: &[AlgorithmRuns], cfg: &ReportConfig) -> Result<Report, HarnessError> {
    if groups.is_empty() {
        return Err(HarnessError::Config("no runs to report".into()));
    }
    let mut groups: Vec<&AlgorithmRuns> = groups.iter().collect();
    groups.sort_by_key(|g| g.algorithm);
    let epochs = groups[0].curves.first().map_or(0, |c| c.len());
    let fw = final_window_len(epochs, cfg.final_window_fraction);
    let mut rows = Vec::new();
    for g in &groups {
        let agg = aggregate(&g.curves)?;
        if agg.mean.len() != epochs {
            return Err(HarnessError::Config("algorithms ran for different epoch counts".into()));
        }
        let seed_final_means: Vec<f64> = g
            .curves
            .iter()
            .map(|c| c[epochs - fw..].iter().sum::<f64>() / fw as f64)
            .collect();
        let window_values: Vec<f64> = g.curves.iter().flat_map(|c| c[epochs - fw..].iter().copied()).collect();
        rows.push(AlgorithmRow {
            algorithm: g.algorithm,
            seeds: g.seeds.clone(),
            final_mean: seed_final_means.iter().sum::<f64>() / seed_final_means.len() as f64,
            final_std: sample_std(&window_values),
            seed_final_means,
            convergence_epoch: detect_convergence(&agg.mean, cfg.ma_window.min(epochs.max(1)), cfg.threshold, cfg.reference)?,
            eval_mean: (!g.eval_means.is_empty()).then(|| g.eval_means.iter().sum::<f64>() / g.eval_means.len() as f64),
            aggregate: agg,
        });
    }
    let reference = if rows.iter().any(|r| r.algorithm == Algorithm::Bcr) {
        Algorithm::Bcr
    } else {
        rows[0].algorithm
    };
    let rref = rows.iter().find(|r| r.algorithm == reference).unwrap().clone();
    let comparisons = rows
        .iter()
        .filter(|r| r.algorithm != reference)
        .map(|r| Comparison {
            baseline: r.algorithm,
            uplift_pct: uplift_pct(rref.final_mean, r.final_mean),
            efficiency_gain_pct: efficiency_gain_pct(rref.convergence_epoch, r.convergence_epoch),
            final_mean_diff: rref.final_mean - r.final_mean,
        })
        .collect();
    Ok(Report {
        reference,
        final_window: fw,
        rows,
        comparisons,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.2}"))
}

impl Report {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "final window: last {} epochs", self.final_window);
        let _ = writeln!(
            s,
            "{:<18} {:>6} {:>12} {:>10} {:>12} {:>10}",
            "algorithm", "seeds", "final_mean", "final_std", "convergence", "eval_mean"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<18} {:>6} {:>12.3} {:>10.3} {:>12} {:>10}",
                r.algorithm.name(),
                r.seeds.len(),
                r.final_mean,
                r.final_std,
                r.convergence_epoch,
                opt(r.eval_mean)
            );
        }
        let _ = writeln!(s);
        for r in &self.rows {
            let per_seed: Vec<String> = r
                .seeds
                .iter()
                .zip(&r.seed_final_means)
                .map(|(seed, m)| format!("{seed}:{m:.3}"))
                .collect();
            let _ = writeln!(s, "{} per-seed final means: {}", r.algorithm.name(), per_seed.join(" "));
        }
        let _ = writeln!(s);
        for c in &self.comparisons {
            let _ = writeln!(
                s,
                "{} vs {}: final mean diff {:.3}, uplift {}%, sample-efficiency gain {}%",
                self.reference.name(),
                c.baseline.name(),
                c.final_mean_diff,
                opt(c.uplift_pct),
                opt(c.efficiency_gain_pct)
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("algorithm,seeds,final_mean,final_std,convergence_epoch,eval_mean,uplift_pct,efficiency_gain_pct\n");
        for r in &self.rows {
            let cmp = self.comparisons.iter().find(|c| c.baseline == r.algorithm);
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{},{},{},{}",
                r.algorithm.name(),
                r.seeds.len(),
                r.final_mean,
                r.final_std,
                r.convergence_epoch,
                r.eval_mean.map_or(String::new(), |v| format!("{v:.6}")),
                cmp.and_then(|c| c.uplift_pct).map_or(String::new(), |v| format!("{v:.6}")),
                cmp.and_then(|c| c.efficiency_gain_pct).map_or(String::new(), |v| format!("{v:.6}")),
            );
        }
        s
    }

    /// `epoch` then `<algorithm>_mean,<algorithm>_std` column pairs.
    pub fn plot_csv(&self) -> String {
        let mut s = String::from("epoch");
        for r in &self.rows {
            let _ = write!(s, ",{0}_mean,{0}_std", r.algorithm.name());
        }
        s.push('\n');
        let epochs = self.rows.first().map_or(0, |r| r.aggregate.mean.len());
        for e in 0..epochs {
            let _ = write!(s, "{e}");
            for r in &self.rows {
                let _ = write!(s, ",{:.6},{:.6}", r.aggregate.mean[e], r.aggregate.std[e]);
            }
            s.push('\n');
        }
        s
    }

    /// Writes `report.txt`, `report.csv` and `plot_data.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), HarnessError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        for (name, body) in [
            ("report.txt", self.to_text()),
            ("report.csv", self.to_csv()),
            ("plot_data.csv", self.plot_csv()),
        ] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(io_err(&p))?;
        }
        Ok(())
    }
}

/// Outcome of the built-in numeric checks.
#[derive(Clone, Debug)]
pub struct SelftestReport {
    pub lines: Vec<String>,
    pub passed: bool,
}

/// Checks the logarithmic and entropy intrinsic terms against closed forms.
pub fn selftest() -> SelftestReport {
    use rand::{Rng, SeedableRng};
    let mut lines = Vec::new();
    let mut passed = true;
    let mut check = |name: &str, ok: bool, detail: String| {
        passed &= ok;
        lines.push(format!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" }));
    };
    let mut g = ProbGuard::default();
    let probs = [0.7, 0.2, 0.1];
    let logs: Vec<f64> = probs.iter().map(|&p| log_intrinsic(p, 1.0, 0, 1e-8, &mut g)).collect();
    let ents: Vec<f64> = probs.iter().map(|&p| entropy_term(p)).collect();
    let ok = logs.iter().zip([0.357, 1.609, 2.303]).all(|(a, b)| (a - b).abs() < 1e-3);
    check(
        "log rewards",
        ok,
        format!("{:.3}/{:.3}/{:.3}", logs[0], logs[1], logs[2]),
    );
    let ok = ents.iter().zip([0.250, 0.322, 0.230]).all(|(a, b)| (a - b).abs() < 1e-3);
    check(
        "entropy terms",
        ok,
        format!("{:.3}/{:.3}/{:.3}", ents[0], ents[1], ents[2]),
    );
    let ratio = logs[2] / logs[0];
    check("rare/common ratio", (6.4..=6.5).contains(&ratio), format!("{ratio:.3}"));

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let p1: f64 = rng.gen_range(0.01..0.99);
        let eps: f64 = rng.gen_range(1e-6..0.99);
        let r = log_intrinsic(eps * p1, 1.0, 0, 1e-12, &mut g) / log_intrinsic(p1, 1.0, 0, 1e-12, &mut g);
        let closed = 1.0 + (1.0 / eps).ln() / (1.0 / p1).ln();
        worst = worst.max((r - closed).abs());
    }
    check("rare-action ratio identity", worst < 1e-9, format!("max error {worst:.2e} over 1000 pairs"));
    let p1 = 0.5;
    let ratios: Vec<f64> = (1..=6)
        .map(|k| {
            let eps = 10f64.powi(-k);
            entropy_term(eps * p1) / entropy_term(p1)
        })
        .collect();
    let mono = ratios.windows(2).all(|w| w[1] < w[0]);
    check(
        "entropy ratio vanishes",
        mono,
        format!("{:.2e} .. {:.2e}", ratios[0], ratios[5]),
    );
    SelftestReport { lines, passed }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn presets_parse_and_validate() {
        for name in preset_names() {
            let c = preset(&name).unwrap();
            c.validate().unwrap();
            let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
            assert_eq!(back, c, "{name}");
        }
        assert!(preset("exploration_nope").is_none());
    }

    #[test]
    fn overrides_apply_and_reject_unknown_keys() {
        let c = preset("exploration_bcr").unwrap();
        let o = c
            .with_overrides(&["bcr.lambda_ai=0.2".into(), "training.epochs=3".into(), "bcr.lambda_human=1".into()])
            .unwrap();
        assert_eq!(o.bcr.lambda_ai, 0.2);
        assert_eq!(o.bcr.lambda_human, 1.0);
        assert_eq!(o.training.epochs, 3);
        let err = c.with_overrides(&["bcr.lambda_nope=1".into()]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("bcr.lambda_nope"));
        assert!(c.with_overrides(&["algorithm=causal".into()]).unwrap().algorithm == Algorithm::Causal);
        assert!(c.with_overrides(&["training.epochs=many".into()]).is_err());
    }

    #[test]
    fn hash_tracks_every_field() {
        let c = ExperimentConfig::default();
        let mut d = c.clone();
        assert_eq!(c.hash(), d.hash());
        d.bcr.ratio_cap = 11.0;
        assert_ne!(c.hash(), d.hash());
        let mut e = c.clone();
        e.exploration.layout_seed = 1;
        assert_ne!(c.hash(), e.hash());
    }

    #[test]
    fn aggregate_examples() {
        let a = aggregate(&[vec![1.0, 2.0]]).unwrap();
        assert_eq!(a.std, vec![0.0, 0.0]);
        let a = aggregate(&[vec![10.0; 3], vec![20.0; 3]]).unwrap();
        assert_eq!(a.mean, vec![15.0; 3]);
        assert_abs_diff_eq!(a.std[0], 50f64.sqrt(), epsilon = 1e-12);
        assert!(aggregate(&[vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn convergence_examples() {
        let full = ConvergenceReference::FullCurve;
        assert_eq!(detect_convergence(&[5.0; 30], 10, 0.9, full).unwrap(), 9);
        let dip: Vec<f64> = (0..40).map(|i| if (15..25).contains(&i) { 10.0 } else { 0.0 }).collect();
        // MA reaches 9 (90% of 10) when 9 of the 10 window epochs are in the plateau.
        assert_eq!(detect_convergence(&dip, 10, 0.9, full).unwrap(), 23);
        assert!(detect_convergence(&[1.0; 5], 10, 0.9, full).is_err());
        let rising: Vec<f64> = (0..20).map(|i| i as f64).collect();
        assert_eq!(detect_convergence(&rising, 10, 0.9, ConvergenceReference::Running).unwrap(), 9);
    }

    #[test]
    fn report_arithmetic() {
        assert_abs_diff_eq!(uplift_pct(12.0, 10.0).unwrap(), 20.0, epsilon = 1e-12);
        assert_abs_diff_eq!(efficiency_gain_pct(130, 210).unwrap(), 38.095, epsilon = 1e-3);
        assert_eq!(uplift_pct(1.0, 0.0), None);
        let runs = |a| AlgorithmRuns {
            algorithm: a,
            seeds: vec![1, 2],
            curves: vec![vec![1.0; 20], vec![3.0; 20]],
            eval_means: vec![],
        };
        let r = compare_report(&[runs(Algorithm::PpoBaseline), runs(Algorithm::Bcr)], &ReportConfig::default()).unwrap();
        assert_eq!(r.reference, Algorithm::Bcr);
        assert_eq!(r.final_window, 2);
        assert_eq!(r.comparisons[0].uplift_pct, Some(0.0));
        assert_eq!(r.comparisons[0].efficiency_gain_pct, Some(0.0));
        assert_eq!(r.rows[0].final_mean, 2.0);
        assert_eq!(r.to_text(), r.to_text());
    }

    #[test]
    fn selftest_passes() {
        let s = selftest();
        assert!(s.passed, "{:?}", s.lines);
        assert!(s.lines[0].contains("0.357/1.609/2.303"));
    }
}
