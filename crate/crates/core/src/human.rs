//! Fixed partner policies standing in for the human.
//!
//! Each model acts only on timesteps divisible by its `period` and otherwise
//! stays put. Models are immutable; sampling draws from a caller-owned RNG.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Cell, EnvDescriptor, EnvKind, Observation, DOWN, LEFT, RIGHT, STAY, UP};
use crate::exploration::ObsLayout;
use crate::kitchen::{Held, KitchenObsLayout, Tile};
use crate::nn::ActionDistribution;

#[derive(Debug, Error)]
pub enum HumanError {
    #[error("human model contract violation: {0}")]
    Contract(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HumanKind {
    ExplorationStochastic,
    KitchenScripted,
    UniformRandom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HumanConfig {
    pub kind: HumanKind,
    pub period: usize,
    /// Softmax temperature of the coverage explorer.
    pub temperature: f64,
    /// Uniform-noise mixing weight of the kitchen script.
    pub epsilon: f64,
}

impl Default for HumanConfig {
    fn default() -> Self {
        HumanConfig {
            kind: HumanKind::ExplorationStochastic,
            period: 10,
            temperature: 1.0,
            epsilon: 0.2,
        }
    }
}

#[derive(Clone, Debug)]
enum Decoder {
    Exploration(ObsLayout),
    Kitchen(KitchenObsLayout),
    Opaque,
}

#[derive(Clone, Debug)]
pub struct HumanModel {
    config: HumanConfig,
    descriptor: EnvDescriptor,
    decoder: Decoder,
}

fn exploration_layout(d: &EnvDescriptor) -> Option<ObsLayout> {
    let grid = ObsLayout::GRID_CHANNELS * d.width * d.height;
    let rest = d.obs_len.checked_sub(grid)?;
    let radius = if rest == 0 {
        0
    } else {
        let side = ((rest / 2) as f64).sqrt().round() as usize;
        if side % 2 == 0 {
            return None;
        }
        (side - 1) / 2
    };
    let layout = ObsLayout {
        width: d.width,
        height: d.height,
        radius,
    };
    (layout.len() == d.obs_len).then_some(layout)
}

impl HumanModel {
    pub fn new(config: HumanConfig, descriptor: EnvDescriptor) -> Result<Self, HumanError> {
        if config.period == 0 {
            return Err(HumanError::Contract("period must be at least 1".into()));
        }
        if !(config.temperature > 0.0) {
            return Err(HumanError::Contract("temperature must be positive".into()));
        }
        if !(0.0..=1.0).contains(&config.epsilon) {
            return Err(HumanError::Contract("epsilon must lie in [0, 1]".into()));
        }
        if descriptor.action_count <= STAY {
            return Err(HumanError::Contract("environment has no stay action".into()));
        }
        let decoder = match (config.kind, descriptor.kind) {
            (HumanKind::ExplorationStochastic, EnvKind::Exploration) => Decoder::Exploration(
                exploration_layout(&descriptor)
                    .ok_or_else(|| HumanError::Contract("unrecognised exploration observation size".into()))?,
            ),
            (HumanKind::KitchenScripted, EnvKind::MiniKitchen) => {
                let l = KitchenObsLayout {
                    width: descriptor.width,
                    height: descriptor.height,
                };
                if l.len() != descriptor.obs_len {
                    return Err(HumanError::Contract("unrecognised kitchen observation size".into()));
                }
                Decoder::Kitchen(l)
            }
            (HumanKind::UniformRandom, _) => Decoder::Opaque,
            (kind, env) => {
                return Err(HumanError::Contract(format!("{kind:?} partner cannot play {env}")));
            }
        };
        Ok(HumanModel {
            config,
            descriptor,
            decoder,
        })
    }

    pub fn config(&self) -> &HumanConfig {
        &self.config
    }

    pub fn is_active(&self, t: usize) -> bool {
        t % self.config.period == 0
    }

    /// Full action distribution given the human's observation at step `t`.
    pub fn distribution(&self, obs: &Observation, t: usize) -> Result<ActionDistribution, HumanError> {
        let n = self.descriptor.action_count;
        if obs.channels.len() != self.descriptor.obs_len {
            return Err(HumanError::Contract(format!(
                "observation has {} features, model expects {}",
                obs.channels.len(),
                self.descriptor.obs_len
            )));
        }
        if !self.is_active(t) {
            return Ok(ActionDistribution::point_mass(n, STAY));
        }
        match &self.decoder {
            Decoder::Opaque => Ok(ActionDistribution::uniform(n)),
            Decoder::Exploration(layout) => {
                let d = layout
                    .decode(obs)
                    .ok_or_else(|| HumanError::Contract("observation does not decode".into()))?;
                Ok(coverage_distribution(layout, &d, n, self.config.temperature))
            }
            Decoder::Kitchen(layout) => {
                let v = layout
                    .decode(obs)
                    .ok_or_else(|| HumanError::Contract("observation does not decode".into()))?;
                let a = kitchen_script(&v);
                let eps = self.config.epsilon;
                let probs = (0..n)
                    .map(|k| eps / n as f64 + if k == a { 1.0 - eps } else { 0.0 })
                    .collect();
                Ok(ActionDistribution { probs })
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, obs: &Observation, t: usize, rng: &mut R) -> Result<usize, HumanError> {
        Ok(self.distribution(obs, t)?.sample(rng))
    }
}

/// Distance from every free cell to its nearest unexplored free cell.
fn distance_to_frontier(layout: &ObsLayout, obstacles: &[bool], explored: &[bool]) -> Vec<Option<usize>> {
    let (w, h) = (layout.width, layout.height);
    let mut dist = vec![None; w * h];
    let mut queue = VecDeque::new();
    for i in 0..w * h {
        if !obstacles[i] && !explored[i] {
            dist[i] = Some(0);
            queue.push_back(Cell::from_index(i, w));
        }
    }
    while let Some(c) = queue.pop_front() {
        let d = dist[c.index(w)].unwrap();
        for a in [UP, DOWN, LEFT, RIGHT] {
            if let Some(n) = c.step(a, w, h) {
                let i = n.index(w);
                if !obstacles[i] && dist[i].is_none() {
                    dist[i] = Some(d + 1);
                    queue.push_back(n);
                }
            }
        }
    }
    dist
}

fn coverage_distribution(
    layout: &ObsLayout,
    d: &crate::exploration::DecodedObs,
    n: usize,
    temperature: f64,
) -> ActionDistribution {
    let w = layout.width;
    let dist = distance_to_frontier(layout, &d.obstacles, &d.explored);
    let mut logits = vec![f64::NEG_INFINITY; n];
    let mut any = false;
    for a in [UP, DOWN, LEFT, RIGHT] {
        let Some(c) = d.me.step(a, w, layout.height) else { continue };
        let i = c.index(w);
        if d.obstacles[i] || c == d.partner {
            continue;
        }
        let score = dist[i].map_or(0.0, |x| -(x as f64));
        logits[a] = score / temperature;
        any = true;
    }
    if !any {
        return ActionDistribution::point_mass(n, STAY);
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|&l| if l.is_finite() { (l - max).exp() } else { 0.0 }).collect();
    let z: f64 = exp.iter().sum();
    ActionDistribution {
        probs: exp.into_iter().map(|e| e / z).collect(),
    }
}

/// Deterministic kitchen heuristic: deliver soup, plate a ready pot, fill
/// the pot, otherwise fetch what the pot needs next.
pub fn kitchen_script(v: &crate::kitchen::KitchenView) -> usize {
    use crate::env::INTERACT;
    let wait_unless = |goal: Tile, ok: bool| match v.route_to(goal) {
        Some(INTERACT) if !ok => STAY,
        Some(a) => a,
        None => STAY,
    };
    match v.held {
        Held::Soup => wait_unless(Tile::ServeWindow, true),
        Held::Dish => wait_unless(Tile::Pot, v.soup_ready),
        Held::Onion => wait_unless(Tile::Pot, v.pot_contents < 3),
        Held::Nothing if v.pot_contents == 3 => wait_unless(Tile::DishDispenser, true),
        Held::Nothing => wait_unless(Tile::OnionDispenser, true),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Agent, CoordinationEnv, JointAction};
    use crate::exploration::{ExplorationConfig, ExplorationEnv};
    use crate::kitchen::{KitchenConfig, MiniKitchenEnv};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn exploration() -> ExplorationEnv {
        ExplorationEnv::new(ExplorationConfig::default()).unwrap()
    }

    #[test]
    fn off_period_is_point_mass_on_stay() {
        let env = exploration();
        let m = HumanModel::new(HumanConfig::default(), env.descriptor()).unwrap();
        let d = m.distribution(&env.observe(Agent::Human), 7).unwrap();
        assert_eq!(d.probs, vec![0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn uniform_random_on_period() {
        let env = exploration();
        let cfg = HumanConfig {
            kind: HumanKind::UniformRandom,
            ..HumanConfig::default()
        };
        let m = HumanModel::new(cfg, env.descriptor()).unwrap();
        let d = m.distribution(&env.observe(Agent::Human), 10).unwrap();
        assert!(d.probs.iter().all(|&p| (p - 0.2).abs() < 1e-15));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; 5];
        let obs = env.observe(Agent::Human);
        for _ in 0..10_000 {
            counts[m.sample(&obs, 0, &mut rng).unwrap()] += 1;
        }
        for c in counts {
            assert!((c as f64 / 10_000.0 - 0.2).abs() < 0.02);
        }
    }

    #[test]
    fn explorer_support_is_free_moves_only() {
        let mut env = exploration();
        let m = HumanModel::new(HumanConfig::default(), env.descriptor()).unwrap();
        for seed in 0..50 {
            env.reset(seed);
            let st = env.state().clone();
            let d = m.distribution(&env.observe(Agent::Human), 0).unwrap();
            assert!(d.is_valid());
            for a in 0..4 {
                let blocked = match st.human_pos.step(a, 8, 8) {
                    None => true,
                    Some(c) => st.layout.obstacles[c.index(8)] || c == st.ai_pos,
                };
                if blocked {
                    assert_eq!(d.probs[a], 0.0);
                }
            }
            assert_eq!(d.probs[STAY], 0.0);
        }
    }

    #[test]
    fn explorer_prefers_the_frontier() {
        let mut env = exploration();
        env.reset(3);
        let m = HumanModel::new(
            HumanConfig {
                temperature: 0.1,
                ..HumanConfig::default()
            },
            env.descriptor(),
        )
        .unwrap();
        let d = m.distribution(&env.observe(Agent::Human), 0).unwrap();
        // Fresh board: every free neighbour is unexplored.
        let free: Vec<usize> = (0..4).filter(|&a| d.probs[a] > 0.0).collect();
        for &a in &free {
            assert!((d.probs[a] - 1.0 / free.len() as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_environment_is_rejected() {
        let env = exploration();
        let cfg = HumanConfig {
            kind: HumanKind::KitchenScripted,
            ..HumanConfig::default()
        };
        assert!(HumanModel::new(cfg, env.descriptor()).is_err());
        let m = HumanModel::new(HumanConfig::default(), env.descriptor()).unwrap();
        let short = Observation {
            channels: vec![0.0; 3],
            t: 0,
        };
        assert!(m.distribution(&short, 0).is_err());
    }

    #[test]
    fn sampling_is_reproducible() {
        let env = exploration();
        let m = HumanModel::new(HumanConfig::default(), env.descriptor()).unwrap();
        let obs = env.observe(Agent::Human);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20).map(|_| m.sample(&obs, 0, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(11), draw(11));
    }

    #[test]
    fn noiseless_script_serves_soup_alone() {
        let mut env = MiniKitchenEnv::new(KitchenConfig::default()).unwrap();
        let cfg = HumanConfig {
            kind: HumanKind::KitchenScripted,
            period: 1,
            epsilon: 0.0,
            ..HumanConfig::default()
        };
        let m = HumanModel::new(cfg, env.descriptor()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // The AI idles on a cell that blocks no fixture.
        let seed = (0..)
            .find(|&s| {
                env.reset(s);
                [Cell::new(3, 1), Cell::new(2, 2)].contains(&env.state().pos[0])
            })
            .unwrap();
        env.reset(seed);
        let mut served = 0;
        for t in 0..400 {
            let a = m.sample(&env.observe(Agent::Human), t, &mut rng).unwrap();
            let out = env.step(JointAction::new(STAY, a)).unwrap();
            served += out.events.iter().filter(|e| e.is_sparse()).count();
        }
        assert!(served >= 3, "served {served}");
    }
}
