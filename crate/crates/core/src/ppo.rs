//! Clipped-surrogate actor-critic training with per-epoch reward weighting.
//!
//! One epoch collects `E` episodes of at most `K` steps, computes the epoch
//! reward statistics, refreshes the channel weights from the previous and
//! current statistics, combines each step's channels under those weights
//! and then runs GAE and several shuffled minibatch passes.

use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Agent, CoordinationEnv, EnvError, EnvSnapshot, JointAction, Observation, Trajectory, TrajectoryHeader};
use crate::human::{HumanError, HumanModel};
use crate::nn::{
    optimizer_step, Arch, GradientVector, NetworkConfig, NnError, OptimizerKind, OptimizerState, PolicyParameters,
    Tape,
};
use crate::reward::{
    ai_self_reward, causal_influence_reward, combine, context_weights, epoch_stats, extrinsic_reward,
    human_motivated_reward, stat_ratios, BcrConfig, CfActionMode, EpochRewardStats, ProbGuard, RewardBreakdown,
    RewardError, WeightVector,
};

#[derive(Debug, Error)]
pub enum PpoError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Human(#[from] HumanError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error("training contract violation: {0}")]
    Contract(String),
    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Bcr,
    PpoBaseline,
    Causal,
    BcrNoIntrinsic,
    BcrNoWeights,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::Bcr,
        Algorithm::PpoBaseline,
        Algorithm::Causal,
        Algorithm::BcrNoIntrinsic,
        Algorithm::BcrNoWeights,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Bcr => "bcr",
            Algorithm::PpoBaseline => "ppo-baseline",
            Algorithm::Causal => "causal",
            Algorithm::BcrNoIntrinsic => "bcr-no-intrinsic",
            Algorithm::BcrNoWeights => "bcr-no-weights",
        }
    }

    pub fn parse(s: &str) -> Option<Algorithm> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    /// The reward configuration this variant actually trains with.
    pub fn effective_bcr(self, cfg: &BcrConfig) -> BcrConfig {
        let mut c = cfg.clone();
        if matches!(self, Algorithm::PpoBaseline | Algorithm::Causal | Algorithm::BcrNoIntrinsic) {
            c.lambda_ai = 0.0;
            c.lambda_human = 0.0;
        }
        c
    }

    /// Channel weights for epoch `n`.
    pub fn weights(
        self,
        prev: Option<&EpochRewardStats>,
        cur: &EpochRewardStats,
        n: usize,
        cfg: &BcrConfig,
    ) -> WeightVector {
        match self {
            Algorithm::Bcr | Algorithm::BcrNoIntrinsic => context_weights(prev, cur, n, cfg),
            Algorithm::PpoBaseline | Algorithm::Causal => WeightVector::extrinsic_only(n),
            Algorithm::BcrNoWeights => WeightVector::fixed(1.0, 1.0, 1.0, n),
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    /// Episodes end after this many steps or at the environment horizon.
    pub max_steps: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub minibatch_size: usize,
    pub sgd_passes: usize,
    pub learning_rate: f64,
    pub critic_learning_rate: f64,
    pub max_grad_norm: f64,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0: final only).
    pub checkpoint_interval: usize,
    pub network: NetworkConfig,
    pub optimizer: OptimizerKind,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 300,
            episodes_per_epoch: 1,
            max_steps: 400,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            minibatch_size: 256,
            sgd_passes: 4,
            learning_rate: 3e-4,
            critic_learning_rate: 1e-3,
            max_grad_norm: 0.5,
            seed: 1,
            checkpoint_interval: 0,
            network: NetworkConfig::default(),
            optimizer: OptimizerKind::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        let bad = |m: &str| Err(PpoError::Contract(m.to_string()));
        if self.episodes_per_epoch == 0 || self.max_steps == 0 {
            return bad("episodes_per_epoch and max_steps must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.clip) {
            return bad("clip must lie in [0, 1)");
        }
        if self.minibatch_size == 0 || self.sgd_passes == 0 {
            return bad("minibatch_size and sgd_passes must be positive");
        }
        if !(self.learning_rate > 0.0 && self.critic_learning_rate > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.max_grad_norm > 0.0) {
            return bad("max_grad_norm must be positive");
        }
        if self.network.hidden.iter().any(|&h| h == 0) {
            return bad("hidden layer sizes must be positive");
        }
        Ok(())
    }

    /// Steps per epoch `T = E·K`.
    pub fn steps_per_epoch(&self) -> usize {
        self.episodes_per_epoch * self.max_steps
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransitionRecord {
    pub obs_ai: Vec<f64>,
    pub cf_obs_ai: Vec<f64>,
    /// Environment state before the step.
    pub snapshot: EnvSnapshot,
    pub action_ai: usize,
    pub action_human: usize,
    /// AI action scored under the counterfactual observation.
    pub cf_action: usize,
    pub log_prob_taken: f64,
    pub value_estimate: f64,
    pub breakdown: RewardBreakdown,
    /// Last step of its episode.
    pub done: bool,
    pub episode: usize,
    pub t: usize,
    pub global_t: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdvantageBatch {
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

/// Independent random streams of one run.
#[derive(Clone, Debug)]
pub struct RunRngs {
    pub init: ChaCha8Rng,
    pub actions: ChaCha8Rng,
    pub human: ChaCha8Rng,
    pub episodes: ChaCha8Rng,
    pub shuffle: ChaCha8Rng,
    pub counterfactual: ChaCha8Rng,
}

impl RunRngs {
    pub fn new(seed: u64) -> Self {
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        RunRngs {
            init: stream(0),
            actions: stream(1),
            human: stream(2),
            episodes: stream(3),
            shuffle: stream(4),
            counterfactual: stream(5),
        }
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

fn sample_from_log_probs<R: Rng + ?Sized>(lp: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &l) in lp.iter().enumerate() {
        acc += l.exp();
        if u < acc {
            return i;
        }
    }
    lp.len() - 1
}

/// Human next-step distributions for every alternative AI action, or
/// `None` when the human will not act next step.
fn causal_bonus<E: CoordinationEnv>(
    scratch: &mut E,
    human: &HumanModel,
    before: &EnvSnapshot,
    joint: JointAction,
    t: usize,
    action_count: usize,
) -> Result<f64, PpoError> {
    if !human.is_active(t + 1) {
        return Ok(0.0);
    }
    let mut per_action = Vec::with_capacity(action_count);
    for a in 0..action_count {
        scratch.restore(before)?;
        let out = scratch.step(JointAction::new(a, joint.human))?;
        per_action.push(human.distribution(&out.obs_human, t + 1)?);
    }
    Ok(causal_influence_reward(joint.ai, &per_action))
}

/// Everything `collect_epoch` needs besides the environment.
pub struct CollectContext<'a> {
    pub params: &'a PolicyParameters,
    pub human: &'a HumanModel,
    pub algorithm: Algorithm,
    /// Reward configuration as returned by [`Algorithm::effective_bcr`].
    pub bcr: &'a BcrConfig,
    pub training: &'a TrainingConfig,
    pub epoch: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CollectDiagnostics {
    pub prob_clamps: u64,
    pub episodes: usize,
}

/// Rolls out `E` episodes. `r_combined` is left at zero; see
/// [`apply_weights`].
pub fn collect_epoch<E: CoordinationEnv>(
    env: &mut E,
    scratch: &mut E,
    ctx: &CollectContext<'_>,
    rngs: &mut RunRngs,
) -> Result<(Vec<TransitionRecord>, CollectDiagnostics), PpoError> {
    let tc = ctx.training;
    let desc = env.descriptor();
    if ctx.params.obs_len() != desc.obs_len || ctx.params.action_count() != desc.action_count {
        return Err(PpoError::Contract("policy shape does not match the environment".into()));
    }
    let t_per_epoch = tc.steps_per_epoch() as u64;
    let budget = t_per_epoch * tc.epochs as u64;
    let mut guard = ProbGuard::default();
    let mut records = Vec::with_capacity(tc.steps_per_epoch());
    let mut step_in_epoch = 0u64;
    for episode in 0..tc.episodes_per_epoch {
        let (mut obs_ai, mut obs_h, _) = env.reset(rngs.episodes.gen());
        let limit = tc.max_steps.min(desc.horizon);
        for t in 0..limit {
            let global_t = ctx.epoch as u64 * t_per_epoch + step_in_epoch;
            step_in_epoch += 1;
            let logits = ctx.params.actor_arch.forward_one(&ctx.params.actor_weights, &obs_ai.channels)?;
            let lp = log_softmax(&logits);
            let value = ctx.params.critic_arch.forward_one(&ctx.params.critic_weights, &obs_ai.channels)?[0];
            let a_ai = sample_from_log_probs(&lp, &mut rngs.actions);
            let a_h = ctx.human.sample(&obs_h, t, &mut rngs.human)?;
            let joint = JointAction::new(a_ai, a_h);
            let before = env.snapshot();
            let cf_obs = env.counterfactual_observe(&before, a_h)?;
            let cf_lp = log_softmax(&ctx.params.actor_arch.forward_one(&ctx.params.actor_weights, &cf_obs.channels)?);
            let cf_action = match ctx.bcr.cf_action {
                CfActionMode::Executed => a_ai,
                CfActionMode::Sampled => sample_from_log_probs(&cf_lp, &mut rngs.counterfactual),
            };
            let out = env.step(joint)?;
            let fade = ctx.bcr.fade_factor(global_t, budget);
            let ext = extrinsic_reward(&out.events, Agent::Ai, fade, ctx.bcr);
            let p_real = lp[a_ai].exp();
            let p_cf = cf_lp[cf_action].exp();
            let r_causal = if ctx.algorithm == Algorithm::Causal {
                causal_bonus(scratch, ctx.human, &before, joint, t, desc.action_count)?
            } else {
                0.0
            };
            let done = out.done || t + 1 == limit;
            records.push(TransitionRecord {
                obs_ai: std::mem::take(&mut obs_ai.channels),
                cf_obs_ai: cf_obs.channels,
                snapshot: before,
                action_ai: a_ai,
                action_human: a_h,
                cf_action,
                log_prob_taken: lp[a_ai],
                value_estimate: value,
                breakdown: RewardBreakdown {
                    r_ext: ext.r_ext,
                    r_sparse: ext.r_sparse,
                    r_stage_raw: ext.r_stage_raw,
                    r_ai: ai_self_reward(p_real, ctx.bcr, &mut guard),
                    r_human: human_motivated_reward(p_real, p_cf, ctx.bcr, &mut guard),
                    r_causal,
                    r_combined: 0.0,
                    r_ext_undiscounted: ext.r_ext_undiscounted,
                },
                done,
                episode,
                t,
                global_t,
            });
            obs_ai = out.obs_ai;
            obs_h = out.obs_human;
            if done {
                break;
            }
        }
    }
    Ok((
        records,
        CollectDiagnostics {
            prob_clamps: guard.clamps,
            episodes: tc.episodes_per_epoch,
        },
    ))
}

/// Fills `r_combined` under `weights`, adding the influence bonus for the
/// causal baseline.
pub fn apply_weights(records: &mut [TransitionRecord], weights: &WeightVector, algorithm: Algorithm, cfg: &BcrConfig) {
    for r in records {
        let mut v = combine(&r.breakdown, weights);
        if algorithm == Algorithm::Causal {
            v += cfg.causal_coef * r.breakdown.r_causal;
        }
        r.breakdown.r_combined = v;
    }
}

fn check_episodes(records: &[TransitionRecord]) -> Result<(), PpoError> {
    if records.is_empty() {
        return Err(PpoError::Contract("no transitions".into()));
    }
    if !records.last().unwrap().done {
        return Err(PpoError::Contract("last transition does not end an episode".into()));
    }
    Ok(())
}

/// Generalized advantage estimates; episode ends bootstrap from zero.
pub fn compute_gae(records: &[TransitionRecord], gamma: f64, lambda: f64) -> Result<AdvantageBatch, PpoError> {
    check_episodes(records)?;
    let n = records.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = 0.0;
    for i in (0..n).rev() {
        let r = &records[i];
        if r.done {
            next_adv = 0.0;
            next_value = 0.0;
        }
        let delta = r.breakdown.r_combined + gamma * next_value - r.value_estimate;
        next_adv = delta + gamma * lambda * next_adv;
        adv[i] = next_adv;
        next_value = r.value_estimate;
    }
    let returns = reward_to_go(records, gamma);
    if adv.iter().any(|a| !a.is_finite()) {
        return Err(PpoError::Contract("non-finite advantage".into()));
    }
    Ok(AdvantageBatch { advantages: adv, returns })
}

/// Discounted suffix sums of `r_combined` within each episode.
pub fn reward_to_go(records: &[TransitionRecord], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; records.len()];
    let mut acc = 0.0;
    for i in (0..records.len()).rev() {
        if records[i].done {
            acc = 0.0;
        }
        acc = records[i].breakdown.r_combined + gamma * acc;
        out[i] = acc;
    }
    out
}

/// Zero mean, unit variance (population σ, floored at 1e-8).
pub fn normalize_advantages(adv: &[f64]) -> Vec<f64> {
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-8);
    adv.iter().map(|a| (a - mean) / sd).collect()
}

/// Rows of observations for one minibatch.
pub struct Minibatch {
    pub obs: Array2<f64>,
    pub actions: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Minibatch {
    pub fn gather(records: &[TransitionRecord], adv: &[f64], returns: &[f64], idx: &[usize]) -> Self {
        let cols = records[0].obs_ai.len();
        let mut obs = Array2::zeros((idx.len(), cols));
        for (row, &i) in idx.iter().enumerate() {
            obs.row_mut(row).assign(&ndarray::ArrayView1::from(&records[i].obs_ai[..]));
        }
        Minibatch {
            obs,
            actions: idx.iter().map(|&i| records[i].action_ai).collect(),
            old_log_probs: idx.iter().map(|&i| records[i].log_prob_taken).collect(),
            advantages: idx.iter().map(|&i| adv[i]).collect(),
            returns: idx.iter().map(|&i| returns[i]).collect(),
        }
    }
}

fn column(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((v.len(), 1), v.to_vec()).expect("column")
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SurrogateStats {
    pub loss: f64,
    pub clip_fraction: f64,
    /// Mean of `old_log_prob - new_log_prob`.
    pub approx_kl: f64,
}

/// Negated clipped surrogate and its gradient with respect to `weights`.
pub fn actor_loss_and_grad(
    arch: &Arch,
    weights: &[f64],
    mb: &Minibatch,
    clip: f64,
) -> Result<(SurrogateStats, GradientVector), PpoError> {
    let mut tape = Tape::new();
    let x = tape.constant(mb.obs.clone());
    let (logits, leaves) = arch.forward_tape(&mut tape, weights, x)?;
    let lsm = tape.log_softmax(logits);
    let lp = tape.pick(lsm, mb.actions.clone());
    let old = tape.constant(column(&mb.old_log_probs));
    let diff = tape.sub(lp, old);
    let ratio = tape.exp(diff);
    let adv = tape.constant(column(&mb.advantages));
    let s1 = tape.mul(ratio, adv);
    let clipped = tape.clamp(ratio, 1.0 - clip, 1.0 + clip);
    let s2 = tape.mul(clipped, adv);
    let m = tape.min(s1, s2);
    let mean = tape.mean(m);
    let loss = tape.scale(mean, -1.0);
    let grads = tape.backward(loss)?;
    let ratios = tape.value(ratio);
    let n = mb.actions.len() as f64;
    let clip_fraction = ratios.iter().filter(|&&r| (r - 1.0).abs() > clip).count() as f64 / n;
    let approx_kl = -tape.value(diff).sum() / n;
    Ok((
        SurrogateStats {
            loss: tape.scalar_value(loss),
            clip_fraction,
            approx_kl,
        },
        arch.flatten_grads(&grads, &leaves),
    ))
}

/// Mean squared error between critic output and `returns`.
pub fn critic_loss_and_grad(arch: &Arch, weights: &[f64], mb: &Minibatch) -> Result<(f64, GradientVector), PpoError> {
    let mut tape = Tape::new();
    let x = tape.constant(mb.obs.clone());
    let (v, leaves) = arch.forward_tape(&mut tape, weights, x)?;
    let target = tape.constant(column(&mb.returns));
    let d = tape.sub(v, target);
    let sq = tape.square(d);
    let loss = tape.mean(sq);
    let grads = tape.backward(loss)?;
    Ok((tape.scalar_value(loss), arch.flatten_grads(&grads, &leaves)))
}

#[derive(Clone, Debug)]
pub struct Optimizers {
    pub actor: OptimizerState,
    pub critic: OptimizerState,
}

impl Optimizers {
    pub fn new(kind: OptimizerKind, params: &PolicyParameters) -> Self {
        Optimizers {
            actor: OptimizerState::new(kind, params.actor_weights.len()),
            critic: OptimizerState::new(kind, params.critic_weights.len()),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateDiagnostics {
    pub clip_fraction: f64,
    pub kl: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
}

/// Several shuffled minibatch passes over one epoch's batch.
pub fn ppo_update<R: Rng + ?Sized>(
    records: &[TransitionRecord],
    batch: &AdvantageBatch,
    params: &mut PolicyParameters,
    opt: &mut Optimizers,
    cfg: &TrainingConfig,
    rng: &mut R,
) -> Result<UpdateDiagnostics, PpoError> {
    if records.len() != batch.advantages.len() || records.len() != batch.returns.len() {
        return Err(PpoError::Contract("advantage batch does not match records".into()));
    }
    let adv = normalize_advantages(&batch.advantages);
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut d = UpdateDiagnostics::default();
    let mut count = 0.0;
    for _ in 0..cfg.sgd_passes {
        order.shuffle(rng);
        for idx in order.chunks(cfg.minibatch_size) {
            let mb = Minibatch::gather(records, &adv, &batch.returns, idx);
            let (stats, mut ga) = actor_loss_and_grad(&params.actor_arch, &params.actor_weights, &mb, cfg.clip)?;
            let (vloss, mut gc) = critic_loss_and_grad(&params.critic_arch, &params.critic_weights, &mb)?;
            if !stats.loss.is_finite() || !vloss.is_finite() {
                return Err(PpoError::Contract(format!(
                    "non-finite loss (policy {}, value {})",
                    stats.loss, vloss
                )));
            }
            ga.clip_norm(cfg.max_grad_norm);
            gc.clip_norm(cfg.max_grad_norm);
            optimizer_step(&mut params.actor_weights, &ga, cfg.learning_rate, &mut opt.actor)?;
            optimizer_step(&mut params.critic_weights, &gc, cfg.critic_learning_rate, &mut opt.critic)?;
            d.clip_fraction += stats.clip_fraction;
            d.kl += stats.approx_kl;
            d.policy_loss += stats.loss;
            d.value_loss += vloss;
            count += 1.0;
        }
    }
    d.clip_fraction /= count;
    d.kl /= count;
    d.policy_loss /= count;
    d.value_loss /= count;
    Ok(d)
}

/// One row of the per-epoch metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Sparse reward per episode, averaged over the epoch's episodes.
    pub mean_sparse: f64,
    /// Unfaded stage reward per episode, averaged over the epoch's episodes.
    pub mean_stage: f64,
    pub mean_r_ai: f64,
    pub mean_r_human: f64,
    pub mean_r_causal: f64,
    pub k_ext: f64,
    pub k_ai: f64,
    pub k_human: f64,
    pub rho_ext: f64,
    pub rho_ai: f64,
    pub rho_human: f64,
    pub clip_fraction: f64,
    pub kl: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub prob_clamps: u64,
    pub wall_ms: u64,
}

impl EpochMetrics {
    /// Same row with the timing field zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        EpochMetrics {
            wall_ms: 0,
            ..self.clone()
        }
    }
}

/// Callbacks from the training loop.
pub trait TrainObserver {
    fn on_epoch(&mut self, _metrics: &EpochMetrics, _params: &PolicyParameters) -> Result<(), PpoError> {
        Ok(())
    }
}

impl TrainObserver for () {}

impl<F: FnMut(&EpochMetrics, &PolicyParameters) -> Result<(), PpoError>> TrainObserver for F {
    fn on_epoch(&mut self, m: &EpochMetrics, p: &PolicyParameters) -> Result<(), PpoError> {
        self(m, p)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: PolicyParameters,
    pub metrics: Vec<EpochMetrics>,
    /// Stopped by the cancellation flag before all epochs ran.
    pub cancelled: bool,
}

/// The full training loop.
pub fn train<E: CoordinationEnv + Clone>(
    env: &mut E,
    human: &HumanModel,
    algorithm: Algorithm,
    training: &TrainingConfig,
    bcr: &BcrConfig,
    observer: &mut dyn TrainObserver,
    cancel: Option<&AtomicBool>,
) -> Result<TrainOutcome, PpoError> {
    training.validate()?;
    bcr.validate()?;
    let bcr = algorithm.effective_bcr(bcr);
    let desc = env.descriptor();
    let mut rngs = RunRngs::new(training.seed);
    let mut params = PolicyParameters::new(desc.obs_len, desc.action_count, &training.network, &mut rngs.init);
    let mut opt = Optimizers::new(training.optimizer, &params);
    let mut scratch = env.clone();
    let mut metrics = Vec::with_capacity(training.epochs);
    let mut prev_stats: Option<EpochRewardStats> = None;
    for epoch in 0..training.epochs {
        if cancel.is_some_and(|c| c.load(Ordering::SeqCst)) {
            return Ok(TrainOutcome {
                params,
                metrics,
                cancelled: true,
            });
        }
        let started = Instant::now();
        let ctx = CollectContext {
            params: &params,
            human,
            algorithm,
            bcr: &bcr,
            training,
            epoch,
        };
        let (mut records, diag) = collect_epoch(env, &mut scratch, &ctx, &mut rngs)?;
        let breakdowns: Vec<RewardBreakdown> = records.iter().map(|r| r.breakdown).collect();
        let stats = epoch_stats(&breakdowns, epoch)?;
        let weights = algorithm.weights(prev_stats.as_ref(), &stats, epoch, &bcr);
        let rho = prev_stats
            .as_ref()
            .map_or([1.0; 3], |p| stat_ratios(p, &stats, bcr.ratio_cap));
        apply_weights(&mut records, &weights, algorithm, &bcr);
        let batch = compute_gae(&records, training.gamma, training.gae_lambda)?;
        let upd = ppo_update(&records, &batch, &mut params, &mut opt, training, &mut rngs.shuffle).map_err(|e| {
            PpoError::Divergence {
                epoch,
                detail: format!(
                    "{e}; weights ({:.6}, {:.6}, {:.6}); epoch means ext {:.6} ai {:.6} human {:.6}",
                    weights.k_ext, weights.k_ai, weights.k_human, stats.mean_ext, stats.mean_ai, stats.mean_human
                ),
            }
        })?;
        let episodes = diag.episodes as f64;
        let steps = records.len() as f64;
        let row = EpochMetrics {
            epoch,
            mean_sparse: records.iter().map(|r| r.breakdown.r_sparse).sum::<f64>() / episodes,
            mean_stage: records.iter().map(|r| r.breakdown.r_stage_raw).sum::<f64>() / episodes,
            mean_r_ai: stats.mean_ai,
            mean_r_human: stats.mean_human,
            mean_r_causal: records.iter().map(|r| r.breakdown.r_causal).sum::<f64>() / steps,
            k_ext: weights.k_ext,
            k_ai: weights.k_ai,
            k_human: weights.k_human,
            rho_ext: rho[0],
            rho_ai: rho[1],
            rho_human: rho[2],
            clip_fraction: upd.clip_fraction,
            kl: upd.kl,
            policy_loss: upd.policy_loss,
            value_loss: upd.value_loss,
            prob_clamps: diag.prob_clamps,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        observer.on_epoch(&row, &params)?;
        metrics.push(row);
        prev_stats = Some(stats);
    }
    Ok(TrainOutcome {
        params,
        metrics,
        cancelled: false,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub episodes: usize,
    pub mean_sparse: f64,
    pub std_sparse: f64,
    pub episode_sparse: Vec<f64>,
}

/// Runs the frozen policy for `episodes` full episodes and reports the
/// sparse reward per episode. With `record`, also returns each episode's
/// joint actions.
pub fn evaluate<E: CoordinationEnv>(
    env: &mut E,
    params: &PolicyParameters,
    human: &HumanModel,
    episodes: usize,
    seed: u64,
    lambda_sparse: f64,
    record: bool,
) -> Result<(EvalResult, Vec<Trajectory>), PpoError> {
    let desc = env.descriptor();
    let mut rngs = RunRngs::new(seed);
    let mut returns = Vec::with_capacity(episodes);
    let mut trajectories = Vec::new();
    for _ in 0..episodes {
        let ep_seed: u64 = rngs.episodes.gen();
        let (mut obs_ai, mut obs_h, _): (Observation, Observation, _) = env.reset(ep_seed);
        let mut actions = Vec::new();
        let mut sparse = 0.0;
        for t in 0..desc.horizon {
            let lp = log_softmax(&params.actor_arch.forward_one(&params.actor_weights, &obs_ai.channels)?);
            let joint = JointAction::new(
                sample_from_log_probs(&lp, &mut rngs.actions),
                human.sample(&obs_h, t, &mut rngs.human)?,
            );
            let out = env.step(joint)?;
            sparse += lambda_sparse * out.events.iter().filter(|e| e.is_sparse()).count() as f64;
            if record {
                actions.push(joint);
            }
            obs_ai = out.obs_ai;
            obs_h = out.obs_human;
            if out.done {
                break;
            }
        }
        returns.push(sparse);
        if record {
            trajectories.push(Trajectory {
                header: TrajectoryHeader {
                    env: desc.kind,
                    seed: ep_seed,
                    horizon: desc.horizon,
                },
                actions,
            });
        }
    }
    let n = returns.len().max(1) as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let std = if returns.len() > 1 {
        (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok((
        EvalResult {
            episodes,
            mean_sparse: mean,
            std_sparse: std,
            episode_sparse: returns,
        },
        trajectories,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn rec(r: f64, v: f64, done: bool) -> TransitionRecord {
        TransitionRecord {
            obs_ai: vec![0.0],
            cf_obs_ai: vec![0.0],
            snapshot: EnvSnapshot { bytes: vec![] },
            action_ai: 0,
            action_human: 0,
            cf_action: 0,
            log_prob_taken: 0.0,
            value_estimate: v,
            breakdown: RewardBreakdown {
                r_combined: r,
                ..RewardBreakdown::default()
            },
            done,
            episode: 0,
            t: 0,
            global_t: 0,
        }
    }

    #[test]
    fn gae_examples() {
        let b = compute_gae(&[rec(1.0, 0.0, true)], 0.9, 0.3).unwrap();
        assert_eq!(b.advantages, vec![1.0]);
        let b = compute_gae(&[rec(1.0, 0.0, false), rec(1.0, 0.0, true)], 0.99, 0.95).unwrap();
        assert_abs_diff_eq!(b.advantages[0], 1.9405, epsilon = 1e-12);
        assert_eq!(b.advantages[1], 1.0);
        assert!(compute_gae(&[], 0.9, 0.9).is_err());
    }

    #[test]
    fn reward_to_go_examples() {
        let r = [rec(1.0, 0.0, false), rec(1.0, 0.0, false), rec(1.0, 0.0, true)];
        assert_eq!(reward_to_go(&r, 1.0), vec![3.0, 2.0, 1.0]);
        let r = [rec(1.0, 0.0, false), rec(0.0, 0.0, false), rec(0.0, 0.0, true)];
        assert_eq!(reward_to_go(&r, 0.5), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn episode_boundaries_do_not_leak() {
        let r = [rec(1.0, 0.5, true), rec(2.0, 0.0, true)];
        let b = compute_gae(&r, 0.9, 0.9).unwrap();
        assert_abs_diff_eq!(b.advantages[0], 0.5, epsilon = 1e-15);
        assert_eq!(reward_to_go(&r, 0.9), vec![1.0, 2.0]);
    }

    #[test]
    fn normalized_advantages_have_unit_scale() {
        let a = normalize_advantages(&[1.0, 2.0, 3.0, 6.0]);
        let mean: f64 = a.iter().sum::<f64>() / 4.0;
        let var: f64 = a.iter().map(|x| x * x).sum::<f64>() / 4.0;
        assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(var, 1.0, epsilon = 1e-12);
        assert_eq!(normalize_advantages(&[2.0, 2.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn algorithm_names_roundtrip() {
        for a in Algorithm::ALL {
            assert_eq!(Algorithm::parse(a.name()), Some(a));
        }
        assert_eq!(Algorithm::parse("nope"), None);
    }

    #[test]
    fn zero_advantage_leaves_actor_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = PolicyParameters::new(4, 3, &NetworkConfig::default(), &mut rng);
        let mb = Minibatch {
            obs: Array2::from_shape_fn((5, 4), |(i, j)| (i * 4 + j) as f64 * 0.1),
            actions: vec![0, 1, 2, 0, 1],
            old_log_probs: vec![-1.0; 5],
            advantages: vec![0.0; 5],
            returns: vec![0.0; 5],
        };
        let (_, g) = actor_loss_and_grad(&p.actor_arch, &p.actor_weights, &mb, 0.2).unwrap();
        assert!(g.values.iter().all(|&v| v == 0.0));
    }
}
