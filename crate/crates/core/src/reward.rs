//! Reward channels and their per-epoch weighting.
//!
//! A step's training reward mixes three channels: the extrinsic reward
//! (sparse completion bonus plus faded stage shaping), the AI's own
//! log-likelihood surprise at its action, and the shift in that
//! log-likelihood caused by the human's move. Channel weights are a scaled
//! softmax of epoch-over-epoch mean ratios and collapse to extrinsic-only
//! after a fixed number of epochs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Agent, RewardEvent};
use crate::nn::ActionDistribution;

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("reward contract violation: {0}")]
    Contract(String),
}

/// Shape of the stage-reward annealing factor over training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FadeKind {
    /// `1 - t / total`, floored at 0.
    Linear,
    /// `exp(-rate * t / total)`.
    Exponential,
    /// Constant 1.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CfActionMode {
    /// Score the executed AI action under the counterfactual observation.
    Executed,
    /// Score a fresh draw from the policy at the counterfactual observation.
    Sampled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BcrConfig {
    pub lambda_sparse: f64,
    pub lambda_ai: f64,
    pub lambda_human: f64,
    /// Total mass of the three channel weights before truncation.
    pub lambda_softmax: f64,
    /// First epoch trained on extrinsic reward alone.
    pub n_threshold: usize,
    pub fade: FadeKind,
    pub fade_rate: f64,
    /// 1: human term is `|ln p - ln p_cf|`. 0: human term is `|ln p_cf|`.
    pub delta_mode: u8,
    pub ratio_cap: f64,
    pub prob_floor: f64,
    pub cf_action: CfActionMode,
    /// Weight of the influence bonus for the causal baseline.
    pub causal_coef: f64,
}

impl Default for BcrConfig {
    fn default() -> Self {
        BcrConfig {
            lambda_sparse: 20.0,
            lambda_ai: 1.0,
            lambda_human: 0.02,
            lambda_softmax: 3.0,
            n_threshold: 100,
            fade: FadeKind::Linear,
            fade_rate: 5.0,
            delta_mode: 1,
            ratio_cap: 10.0,
            prob_floor: 1e-8,
            cf_action: CfActionMode::Executed,
            causal_coef: 1.0,
        }
    }
}

impl BcrConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        let bad = |m: String| Err(RewardError::Contract(m));
        for (name, v) in [
            ("lambda_sparse", self.lambda_sparse),
            ("lambda_ai", self.lambda_ai),
            ("lambda_human", self.lambda_human),
            ("lambda_softmax", self.lambda_softmax),
            ("fade_rate", self.fade_rate),
            ("causal_coef", self.causal_coef),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if self.delta_mode > 1 {
            return bad(format!("delta_mode must be 0 or 1, got {}", self.delta_mode));
        }
        if !(self.ratio_cap > 1.0) {
            return bad(format!("ratio_cap must exceed 1, got {}", self.ratio_cap));
        }
        if !(self.prob_floor > 0.0 && self.prob_floor <= 1e-3) {
            return bad(format!("prob_floor must lie in (0, 1e-3], got {}", self.prob_floor));
        }
        Ok(())
    }

    /// Annealing factor at global step `t` of a `total`-step budget.
    pub fn fade_factor(&self, t: u64, total: u64) -> f64 {
        let frac = if total == 0 { 1.0 } else { t as f64 / total as f64 };
        match self.fade {
            FadeKind::Linear => (1.0 - frac).max(0.0),
            FadeKind::Exponential => (-self.fade_rate * frac).exp(),
            FadeKind::None => 1.0,
        }
    }
}

/// Applies the probability floor and counts how often it bites.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ProbGuard {
    pub clamps: u64,
}

impl ProbGuard {
    pub fn floor(&mut self, p: f64, floor: f64) -> f64 {
        if p < floor || p.is_nan() {
            self.clamps += 1;
            floor
        } else {
            p.min(1.0)
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_ext: f64,
    pub r_sparse: f64,
    pub r_stage_raw: f64,
    pub r_ai: f64,
    pub r_human: f64,
    /// Influence bonus; only the causal baseline trains on it.
    pub r_causal: f64,
    pub r_combined: f64,
    /// Sparse plus unfaded stage reward.
    pub r_ext_undiscounted: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExtrinsicParts {
    pub r_ext: f64,
    pub r_sparse: f64,
    pub r_stage_raw: f64,
    pub r_ext_undiscounted: f64,
}

/// Extrinsic reward credited to `agent`: every sparse hit pays
/// `lambda_sparse`; the agent's other events sum into the stage term, which
/// is scaled by `fade`.
pub fn extrinsic_reward(events: &[RewardEvent], agent: Agent, fade: f64, cfg: &BcrConfig) -> ExtrinsicParts {
    let mut hits = 0usize;
    let mut stage = 0.0;
    for e in events.iter().filter(|e| e.recipient.includes(agent)) {
        if e.is_sparse() {
            hits += 1;
        } else {
            stage += e.magnitude;
        }
    }
    let r_sparse = cfg.lambda_sparse * hits as f64;
    ExtrinsicParts {
        r_ext: r_sparse + stage * fade,
        r_sparse,
        r_stage_raw: stage,
        r_ext_undiscounted: r_sparse + stage,
    }
}

/// `|ln p|` when `delta` is 0, `|ln p - ln cf_p|` when it is 1.
pub fn log_intrinsic(p: f64, cf_p: f64, delta: u8, floor: f64, guard: &mut ProbGuard) -> f64 {
    let lp = guard.floor(p, floor).ln();
    if delta == 0 {
        lp.abs()
    } else {
        (lp - guard.floor(cf_p, floor).ln()).abs()
    }
}

/// `-p ln p`, with `0 ln 0 = 0`.
pub fn entropy_term(p: f64) -> f64 {
    if p <= 0.0 {
        0.0
    } else {
        -p * p.ln()
    }
}

pub fn ai_self_reward(p: f64, cfg: &BcrConfig, guard: &mut ProbGuard) -> f64 {
    if cfg.lambda_ai == 0.0 {
        return 0.0;
    }
    cfg.lambda_ai * log_intrinsic(p, 1.0, 0, cfg.prob_floor, guard)
}

pub fn human_motivated_reward(p_real: f64, p_cf: f64, cfg: &BcrConfig, guard: &mut ProbGuard) -> f64 {
    if cfg.lambda_human == 0.0 {
        return 0.0;
    }
    let v = if cfg.delta_mode == 1 {
        log_intrinsic(p_real, p_cf, 1, cfg.prob_floor, guard)
    } else {
        log_intrinsic(p_cf, 1.0, 0, cfg.prob_floor, guard)
    };
    cfg.lambda_human * v
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRewardStats {
    pub epoch: usize,
    pub mean_ext: f64,
    pub mean_ai: f64,
    pub mean_human: f64,
    pub timestep_count: usize,
}

/// Per-step means of the unfaded extrinsic and the two intrinsic channels.
pub fn epoch_stats(records: &[RewardBreakdown], epoch: usize) -> Result<EpochRewardStats, RewardError> {
    if records.is_empty() {
        return Err(RewardError::Contract(format!("epoch {epoch} has no timesteps")));
    }
    let n = records.len() as f64;
    let (mut e, mut a, mut h) = (0.0, 0.0, 0.0);
    for r in records {
        e += r.r_ext_undiscounted;
        a += r.r_ai;
        h += r.r_human;
    }
    Ok(EpochRewardStats {
        epoch,
        mean_ext: e / n,
        mean_ai: a / n,
        mean_human: h / n,
        timestep_count: records.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub k_ext: f64,
    pub k_ai: f64,
    pub k_human: f64,
    pub epoch: usize,
}

impl WeightVector {
    pub fn fixed(k_ext: f64, k_ai: f64, k_human: f64, epoch: usize) -> Self {
        WeightVector {
            k_ext,
            k_ai,
            k_human,
            epoch,
        }
    }

    pub fn extrinsic_only(epoch: usize) -> Self {
        Self::fixed(1.0, 0.0, 0.0, epoch)
    }
}

/// `prev / cur` with a sign-preserving `1e-6` floor on `|cur|`, clamped to
/// `[1/cap, cap]`.
pub fn guarded_ratio(prev: f64, cur: f64, cap: f64) -> f64 {
    const MIN_DEN: f64 = 1e-6;
    let den = if cur.abs() < MIN_DEN {
        if cur < 0.0 {
            -MIN_DEN
        } else {
            MIN_DEN
        }
    } else {
        cur
    };
    let r = prev / den;
    if r.is_nan() {
        1.0
    } else {
        r.clamp(1.0 / cap, cap)
    }
}

/// Channel ratios fed to the softmax (`[ext, ai, human]`).
pub fn stat_ratios(prev: &EpochRewardStats, cur: &EpochRewardStats, cap: f64) -> [f64; 3] {
    [
        guarded_ratio(prev.mean_ext, cur.mean_ext, cap),
        guarded_ratio(prev.mean_ai, cur.mean_ai, cap),
        guarded_ratio(prev.mean_human, cur.mean_human, cap),
    ]
}

/// Weights for epoch `n` from the statistics of epochs `n-1` and `n`.
/// Without a previous epoch the mass is split evenly.
pub fn context_weights(
    prev: Option<&EpochRewardStats>,
    cur: &EpochRewardStats,
    n: usize,
    cfg: &BcrConfig,
) -> WeightVector {
    if n >= cfg.n_threshold {
        return WeightVector::extrinsic_only(n);
    }
    let Some(prev) = prev else {
        let k = cfg.lambda_softmax / 3.0;
        return WeightVector::fixed(k, k, k, n);
    };
    let rho = stat_ratios(prev, cur, cfg.ratio_cap);
    let max = rho.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e = rho.map(|r| (r - max).exp());
    let z: f64 = e.iter().sum();
    WeightVector::fixed(
        cfg.lambda_softmax * e[0] / z,
        cfg.lambda_softmax * e[1] / z,
        cfg.lambda_softmax * e[2] / z,
        n,
    )
}

pub fn combine(b: &RewardBreakdown, w: &WeightVector) -> f64 {
    w.k_ext * b.r_ext + w.k_ai * b.r_ai + w.k_human * b.r_human
}

/// `KL(p || q)` in nats; terms with `p = 0` contribute nothing.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum()
}

/// Influence of the AI's actual action on the human's next decision: KL
/// between the human's distribution after the actual action and its mean
/// over all AI actions. `per_action[a]` is the distribution had the AI
/// played `a`.
pub fn causal_influence_reward(actual: usize, per_action: &[ActionDistribution]) -> f64 {
    let n = per_action[actual].probs.len();
    let mut mean = vec![0.0; n];
    for d in per_action {
        for (m, p) in mean.iter_mut().zip(&d.probs) {
            *m += p / per_action.len() as f64;
        }
    }
    kl_divergence(&per_action[actual].probs, &mean).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{EventKind, Recipient};
    use approx::assert_abs_diff_eq;

    fn ev(kind: EventKind, recipient: Recipient, magnitude: f64) -> RewardEvent {
        RewardEvent {
            kind,
            recipient,
            magnitude,
        }
    }

    #[test]
    fn extrinsic_examples() {
        let cfg = BcrConfig::default();
        let hit = [ev(EventKind::SparseHit, Recipient::Both, 20.0)];
        let p = extrinsic_reward(&hit, Agent::Ai, 0.3, &cfg);
        assert_eq!((p.r_ext, p.r_ext_undiscounted), (20.0, 20.0));
        let none = extrinsic_reward(&[], Agent::Ai, 0.3, &cfg);
        assert_eq!((none.r_ext, none.r_sparse, none.r_stage_raw, none.r_ext_undiscounted), (0.0, 0.0, 0.0, 0.0));
        let stage = [
            ev(EventKind::OnionIntoPot, Recipient::Ai, 3.0),
            ev(EventKind::NewCell, Recipient::Human, 2.0),
        ];
        let p = extrinsic_reward(&stage, Agent::Ai, 0.5, &cfg);
        assert_eq!((p.r_ext, p.r_ext_undiscounted), (1.5, 3.0));
    }

    #[test]
    fn log_and_entropy_examples() {
        let mut g = ProbGuard::default();
        assert_abs_diff_eq!(log_intrinsic(0.1, 1.0, 0, 1e-8, &mut g), 2.303, epsilon = 1e-3);
        assert_eq!(log_intrinsic(0.4, 0.4, 1, 1e-8, &mut g), 0.0);
        assert_abs_diff_eq!(log_intrinsic(0.8, 0.1, 1, 1e-8, &mut g), 8f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(entropy_term(0.7), 0.250, epsilon = 1e-3);
        assert_abs_diff_eq!(entropy_term(0.2), 0.322, epsilon = 1e-3);
        assert_eq!(entropy_term(1.0), 0.0);
        assert_eq!(g.clamps, 0);
    }

    #[test]
    fn floor_counts_clamps() {
        let mut g = ProbGuard::default();
        let v = log_intrinsic(0.0, 1.0, 0, 1e-8, &mut g);
        assert_abs_diff_eq!(v, -(1e-8f64).ln(), epsilon = 1e-12);
        assert_eq!(g.clamps, 1);
    }

    #[test]
    fn scaled_intrinsic_examples() {
        let mut g = ProbGuard::default();
        let mut cfg = BcrConfig::default();
        assert_abs_diff_eq!(ai_self_reward(0.1, &cfg, &mut g), 2.303, epsilon = 1e-3);
        assert_abs_diff_eq!(human_motivated_reward(0.8, 0.1, &cfg, &mut g), 0.0416, epsilon = 1e-4);
        assert_eq!(human_motivated_reward(0.3, 0.3, &cfg, &mut g), 0.0);
        cfg.lambda_ai = 0.2;
        assert_abs_diff_eq!(ai_self_reward(0.2, &cfg, &mut g), 0.2 * 5f64.ln(), epsilon = 1e-12);
        cfg.lambda_ai = 0.0;
        assert_eq!(ai_self_reward(1e-30, &cfg, &mut g), 0.0);
    }

    #[test]
    fn weights_examples() {
        let cfg = BcrConfig::default();
        let s = |e, a, h| EpochRewardStats {
            epoch: 0,
            mean_ext: e,
            mean_ai: a,
            mean_human: h,
            timestep_count: 1,
        };
        let w = context_weights(Some(&s(1.0, 2.0, 3.0)), &s(1.0, 2.0, 3.0), 5, &cfg);
        assert_abs_diff_eq!(w.k_ext, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w.k_human, 1.0, epsilon = 1e-12);
        let w = context_weights(Some(&s(2.0, 1.0, 1.0)), &s(1.0, 1.0, 1.0), 5, &cfg);
        let e2 = 2f64.exp();
        let e1 = 1f64.exp();
        assert_abs_diff_eq!(w.k_ext, 3.0 * e2 / (e2 + 2.0 * e1), epsilon = 1e-12);
        assert_abs_diff_eq!(w.k_ext, 1.728, epsilon = 1e-3);
        assert_abs_diff_eq!(w.k_ai, 0.636, epsilon = 1e-3);
        let w = context_weights(Some(&s(2.0, 1.0, 1.0)), &s(1.0, 1.0, 1.0), 100, &cfg);
        assert_eq!((w.k_ext, w.k_ai, w.k_human), (1.0, 0.0, 0.0));
        let w = context_weights(None, &s(1.0, 1.0, 1.0), 0, &cfg);
        assert_eq!((w.k_ext, w.k_ai, w.k_human), (1.0, 1.0, 1.0));
    }

    #[test]
    fn ratio_guards() {
        assert_eq!(guarded_ratio(0.0, 0.0, 10.0), 0.1);
        assert_eq!(guarded_ratio(5.0, 0.0, 10.0), 10.0);
        assert_eq!(guarded_ratio(-5.0, 0.0, 10.0), 0.1);
        assert_eq!(guarded_ratio(5.0, -1e-9, 10.0), 0.1);
        assert_eq!(guarded_ratio(3.0, 2.0, 10.0), 1.5);
    }

    #[test]
    fn combine_examples() {
        let b = RewardBreakdown {
            r_ext: 2.0,
            r_ai: 1.0,
            r_human: 0.5,
            ..RewardBreakdown::default()
        };
        assert_eq!(combine(&b, &WeightVector::fixed(1.0, 1.0, 1.0, 0)), 3.5);
        assert_eq!(combine(&b, &WeightVector::extrinsic_only(0)), 2.0);
    }

    #[test]
    fn epoch_stats_examples() {
        let rec = |e| RewardBreakdown {
            r_ext_undiscounted: e,
            ..RewardBreakdown::default()
        };
        let s = epoch_stats(&[rec(20.0), rec(0.0)], 3).unwrap();
        assert_eq!((s.mean_ext, s.mean_ai, s.mean_human, s.timestep_count), (10.0, 0.0, 0.0, 2));
        assert!(epoch_stats(&[], 0).is_err());
    }

    #[test]
    fn causal_examples() {
        let same = vec![ActionDistribution::uniform(3); 4];
        assert_eq!(causal_influence_reward(2, &same), 0.0);
        let flip = vec![
            ActionDistribution { probs: vec![0.9, 0.1] },
            ActionDistribution { probs: vec![0.1, 0.9] },
        ];
        let expect = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        assert_abs_diff_eq!(causal_influence_reward(0, &flip), expect, epsilon = 1e-12);
        assert_abs_diff_eq!(expect, 0.3681, epsilon = 1e-4);
    }

    #[test]
    fn fade_shapes() {
        let mut cfg = BcrConfig::default();
        assert_eq!(cfg.fade_factor(0, 100), 1.0);
        assert_eq!(cfg.fade_factor(50, 100), 0.5);
        assert_eq!(cfg.fade_factor(150, 100), 0.0);
        cfg.fade = FadeKind::Exponential;
        assert_abs_diff_eq!(cfg.fade_factor(100, 100), (-5.0f64).exp(), epsilon = 1e-15);
        cfg.fade = FadeKind::None;
        assert_eq!(cfg.fade_factor(100, 100), 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(BcrConfig::default().validate().is_ok());
        let bad = BcrConfig {
            prob_floor: 0.1,
            ..BcrConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = BcrConfig {
            lambda_ai: -1.0,
            ..BcrConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
