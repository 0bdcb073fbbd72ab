//! Joint-coverage gridworld.
//!
//! Two agents share a board of free cells and obstacles. Stepping onto an
//! unexplored cell earns `+2`, onto an explored one `-0.5`, and any move
//! that leaves the agent in place (boundary, obstacle, the other agent, a
//! same-cell conflict or `stay`) costs `-1`. Once every free cell is
//! explored both agents receive the shared `+20` completion reward, the
//! explored mask clears, the agents are re-placed at random and the episode
//! clock keeps running.

use std::collections::VecDeque;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{
    read_rng, write_rng, Agent, ByteReader, ByteWriter, Cell, CoordinationEnv, EnvDescriptor, EnvError,
    EnvKind, EnvSnapshot, EventKind, JointAction, Observation, Recipient, RewardEvent, StepOutcome, STAY,
};

pub const ACTION_COUNT: usize = 5;
const MAGIC: &[u8; 4] = b"EXP1";
const GENERATION_RETRIES: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplorationConfig {
    pub width: usize,
    pub height: usize,
    pub obstacle_density: f64,
    pub horizon: usize,
    /// `"fixed"`: one layout from `layout_seed` for every episode.
    /// `"per-episode"`: a fresh layout from each reset seed.
    pub layout_mode: LayoutMode,
    pub layout_seed: u64,
    /// Plain-text layout file; overrides generation when non-empty.
    pub layout_file: PathBuf,
    pub new_cell_reward: f64,
    pub revisit_reward: f64,
    pub invalid_reward: f64,
    pub completion_reward: f64,
    /// Radius of the egocentric window layers (0 disables them).
    pub local_view_radius: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayoutMode {
    Fixed,
    PerEpisode,
}

impl Default for ExplorationConfig {
    fn default() -> Self {
        ExplorationConfig {
            width: 8,
            height: 8,
            obstacle_density: 0.1,
            horizon: 400,
            layout_mode: LayoutMode::Fixed,
            layout_seed: 0,
            layout_file: PathBuf::new(),
            new_cell_reward: 2.0,
            revisit_reward: -0.5,
            invalid_reward: -1.0,
            completion_reward: 20.0,
            local_view_radius: 2,
        }
    }
}

/// Obstacle grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub width: usize,
    pub height: usize,
    pub obstacles: Vec<bool>,
}

impl Layout {
    pub fn empty(width: usize, height: usize) -> Self {
        Layout {
            width,
            height,
            obstacles: vec![false; width * height],
        }
    }

    pub fn is_free(&self, c: Cell) -> bool {
        !self.obstacles[c.index(self.width)]
    }

    pub fn free_cells(&self) -> Vec<Cell> {
        (0..self.obstacles.len())
            .filter(|&i| !self.obstacles[i])
            .map(|i| Cell::from_index(i, self.width))
            .collect()
    }

    pub fn free_count(&self) -> usize {
        self.obstacles.iter().filter(|&&o| !o).count()
    }

    /// Cells reachable from the first free cell through free cells.
    pub fn reachable_count(&self) -> usize {
        let Some(start) = self.obstacles.iter().position(|&o| !o) else {
            return 0;
        };
        let mut seen = vec![false; self.obstacles.len()];
        let mut queue = VecDeque::from([Cell::from_index(start, self.width)]);
        seen[start] = true;
        let mut count = 0;
        while let Some(c) = queue.pop_front() {
            count += 1;
            for a in 0..4 {
                if let Some(n) = c.step(a, self.width, self.height) {
                    let i = n.index(self.width);
                    if !seen[i] && !self.obstacles[i] {
                        seen[i] = true;
                        queue.push_back(n);
                    }
                }
            }
        }
        count
    }

    pub fn is_connected(&self) -> bool {
        self.reachable_count() == self.free_count()
    }

    /// Parses `#` (obstacle) / `.` (free) rows.
    pub fn parse(text: &str) -> Result<Self, EnvError> {
        let rows: Vec<&str> = text
            .lines()
            .map(str::trim_end)
            .filter(|l| !l.is_empty())
            .collect();
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.chars().count());
        if width == 0 {
            return Err(EnvError::Layout("empty layout".into()));
        }
        let mut obstacles = Vec::with_capacity(width * height);
        for (y, row) in rows.iter().enumerate() {
            if row.chars().count() != width {
                return Err(EnvError::Layout(format!("row {y} has a different width")));
            }
            for ch in row.chars() {
                obstacles.push(match ch {
                    '#' => true,
                    '.' => false,
                    other => {
                        return Err(EnvError::Layout(format!("unknown layout character {other:?}")))
                    }
                });
            }
        }
        let layout = Layout {
            width,
            height,
            obstacles,
        };
        if layout.free_count() < 2 {
            return Err(EnvError::Layout("layout needs at least 2 free cells".into()));
        }
        if !layout.is_connected() {
            return Err(EnvError::Layout("free cells are not connected".into()));
        }
        Ok(layout)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity((self.width + 1) * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                s.push(if self.obstacles[y * self.width + x] { '#' } else { '.' });
            }
            s.push('\n');
        }
        s
    }
}

/// Places `round(density * width * height)` obstacles uniformly at random,
/// retrying until the free region is connected.
pub fn generate_layout(seed: u64, width: usize, height: usize, density: f64) -> Result<Layout, EnvError> {
    if !(0.0..=0.3).contains(&density) {
        return Err(EnvError::Generation(format!("density {density} outside [0, 0.3]")));
    }
    let cells = width * height;
    if cells < 2 {
        return Err(EnvError::Generation("board needs at least 2 cells".into()));
    }
    let count = ((density * cells as f64).round() as usize).min(cells - 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..cells).collect();
    for _ in 0..GENERATION_RETRIES {
        order.shuffle(&mut rng);
        let mut layout = Layout::empty(width, height);
        for &i in &order[..count] {
            layout.obstacles[i] = true;
        }
        if layout.is_connected() {
            return Ok(layout);
        }
    }
    Err(EnvError::Generation(format!(
        "no connected {width}x{height} layout with {count} obstacles after {GENERATION_RETRIES} tries"
    )))
}

/// Mutable part of the world.
#[derive(Clone, Debug, PartialEq)]
pub struct ExplorationState {
    pub layout: Layout,
    pub explored: Vec<bool>,
    pub ai_pos: Cell,
    pub human_pos: Cell,
    pub t: usize,
    pub rounds_completed: u32,
    pub done: bool,
    pub rng: ChaCha8Rng,
}

/// Reward magnitudes used when emitting events.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExplorationRewards {
    pub new_cell: f64,
    pub revisit: f64,
    pub invalid: f64,
    pub completion: f64,
}

impl From<&ExplorationConfig> for ExplorationRewards {
    fn from(c: &ExplorationConfig) -> Self {
        ExplorationRewards {
            new_cell: c.new_cell_reward,
            revisit: c.revisit_reward,
            invalid: c.invalid_reward,
            completion: c.completion_reward,
        }
    }
}

impl ExplorationState {
    pub fn pos(&self, agent: Agent) -> Cell {
        match agent {
            Agent::Ai => self.ai_pos,
            Agent::Human => self.human_pos,
        }
    }

    pub fn explored_count(&self) -> usize {
        self.explored.iter().filter(|&&e| e).count()
    }

    pub fn accessible_count(&self) -> usize {
        self.layout.free_count()
    }

    fn target(&self, agent: Agent, action: usize) -> Option<Cell> {
        let here = self.pos(agent);
        let next = here.step(action, self.layout.width, self.layout.height)?;
        (self.layout.is_free(next) && next != self.pos(agent.other())).then_some(next)
    }

    /// Resolves simultaneous moves. Boundary, obstacle, occupied-cell, shared
    /// target and `stay` all leave the agent in place with an invalid event.
    pub fn apply_joint_move(&mut self, joint: JointAction, rewards: &ExplorationRewards) -> Vec<RewardEvent> {
        let mut ai_target = self.target(Agent::Ai, joint.ai);
        let mut human_target = self.target(Agent::Human, joint.human);
        if ai_target.is_some() && ai_target == human_target {
            ai_target = None;
            human_target = None;
        }
        let mut events = Vec::with_capacity(2);
        for (agent, target) in [(Agent::Ai, ai_target), (Agent::Human, human_target)] {
            let Some(cell) = target else {
                events.push(RewardEvent {
                    kind: EventKind::Invalid,
                    recipient: agent.into(),
                    magnitude: rewards.invalid,
                });
                continue;
            };
            let idx = cell.index(self.layout.width);
            let (kind, magnitude) = if self.explored[idx] {
                (EventKind::Revisit, rewards.revisit)
            } else {
                self.explored[idx] = true;
                (EventKind::NewCell, rewards.new_cell)
            };
            events.push(RewardEvent {
                kind,
                recipient: agent.into(),
                magnitude,
            });
            match agent {
                Agent::Ai => self.ai_pos = cell,
                Agent::Human => self.human_pos = cell,
            }
        }
        events
    }

    /// On full coverage: clears the explored mask, re-places both agents on
    /// distinct random free cells (marking them explored) and returns `true`.
    pub fn completion_check(&mut self) -> bool {
        let all = self
            .explored
            .iter()
            .zip(&self.layout.obstacles)
            .all(|(&e, &o)| e || o);
        if !all {
            return false;
        }
        self.explored.iter_mut().for_each(|e| *e = false);
        self.place_agents();
        self.rounds_completed += 1;
        true
    }

    fn place_agents(&mut self) {
        let free = self.layout.free_cells();
        let picks: Vec<Cell> = free.choose_multiple(&mut self.rng, 2).copied().collect();
        self.ai_pos = picks[0];
        self.human_pos = picks[1];
        let w = self.layout.width;
        self.explored[self.ai_pos.index(w)] = true;
        self.explored[self.human_pos.index(w)] = true;
    }

    /// Human-only move with the AI inactive. Nothing but the human position
    /// and the explored mask change.
    fn apply_human_only(&mut self, action: usize) {
        if let Some(cell) = self.target(Agent::Human, action) {
            self.human_pos = cell;
            let i = cell.index(self.layout.width);
            self.explored[i] = true;
        }
    }

    fn encode(&self) -> EnvSnapshot {
        let mut w = ByteWriter::new(MAGIC);
        w.u32(self.layout.width as u32);
        w.u32(self.layout.height as u32);
        w.bools(&self.layout.obstacles);
        w.bools(&self.explored);
        w.cell(self.ai_pos);
        w.cell(self.human_pos);
        w.u64(self.t as u64);
        w.u32(self.rounds_completed);
        w.u8(self.done as u8);
        write_rng(&mut w, &self.rng);
        w.finish()
    }

    fn decode(snapshot: &EnvSnapshot) -> Result<Self, EnvError> {
        let mut r = ByteReader::new(snapshot, MAGIC)?;
        let width = r.u32()? as usize;
        let height = r.u32()? as usize;
        let obstacles = r.bools()?;
        let explored = r.bools()?;
        if obstacles.len() != width * height || explored.len() != width * height {
            return Err(EnvError::Format("grid size does not match dimensions".into()));
        }
        let ai_pos = r.cell()?;
        let human_pos = r.cell()?;
        if ai_pos.x >= width || ai_pos.y >= height || human_pos.x >= width || human_pos.y >= height {
            return Err(EnvError::Format("agent position off the grid".into()));
        }
        let t = r.u64()? as usize;
        let rounds_completed = r.u32()?;
        let done = r.u8()? != 0;
        let rng = read_rng(&mut r)?;
        r.finish()?;
        Ok(ExplorationState {
            layout: Layout {
                width,
                height,
                obstacles,
            },
            explored,
            ai_pos,
            human_pos,
            t,
            rounds_completed,
            done,
            rng,
        })
    }
}

/// Channel order of an exploration observation. Each grid channel is a
/// row-major `width×height` block; the two window channels are
/// `(2r+1)²` blocks centred on the observing agent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ObsLayout {
    pub width: usize,
    pub height: usize,
    pub radius: usize,
}

impl ObsLayout {
    pub const SELF: usize = 0;
    pub const PARTNER: usize = 1;
    pub const OBSTACLES: usize = 2;
    pub const EXPLORED: usize = 3;
    pub const GRID_CHANNELS: usize = 4;

    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    pub fn window_side(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn window_cells(&self) -> usize {
        if self.radius == 0 {
            0
        } else {
            self.window_side() * self.window_side()
        }
    }

    pub fn len(&self) -> usize {
        Self::GRID_CHANNELS * self.cells() + 2 * self.window_cells()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Range of grid channel `c` inside the flat vector.
    pub fn channel(&self, c: usize) -> std::ops::Range<usize> {
        c * self.cells()..(c + 1) * self.cells()
    }

    /// Out-of-grid or obstacle cells around the agent.
    pub fn blocked_window(&self) -> std::ops::Range<usize> {
        let start = Self::GRID_CHANNELS * self.cells();
        start..start + self.window_cells()
    }

    /// Free unexplored cells around the agent.
    pub fn unexplored_window(&self) -> std::ops::Range<usize> {
        let start = Self::GRID_CHANNELS * self.cells() + self.window_cells();
        start..start + self.window_cells()
    }

    pub fn encode(&self, state: &ExplorationState, viewer: Agent) -> Observation {
        let n = self.cells();
        let mut v = vec![0.0; self.len()];
        let me = state.pos(viewer);
        let other = state.pos(viewer.other());
        v[Self::SELF * n + me.index(self.width)] = 1.0;
        v[Self::PARTNER * n + other.index(self.width)] = 1.0;
        for i in 0..n {
            if state.layout.obstacles[i] {
                v[Self::OBSTACLES * n + i] = 1.0;
            }
            if state.explored[i] {
                v[Self::EXPLORED * n + i] = 1.0;
            }
        }
        if self.radius > 0 {
            let side = self.window_side();
            let r = self.radius as isize;
            let blocked = self.blocked_window().start;
            let unexplored = self.unexplored_window().start;
            for dy in -r..=r {
                for dx in -r..=r {
                    let k = ((dy + r) as usize) * side + (dx + r) as usize;
                    let x = me.x as isize + dx;
                    let y = me.y as isize + dy;
                    if x < 0 || y < 0 || x >= self.width as isize || y >= self.height as isize {
                        v[blocked + k] = 1.0;
                        continue;
                    }
                    let i = y as usize * self.width + x as usize;
                    if state.layout.obstacles[i] {
                        v[blocked + k] = 1.0;
                    } else if !state.explored[i] {
                        v[unexplored + k] = 1.0;
                    }
                }
            }
        }
        Observation {
            channels: v,
            t: state.t,
        }
    }
}

/// Decoded view of an exploration observation, used by scripted partners.
#[derive(Clone, Debug)]
pub struct DecodedObs {
    pub me: Cell,
    pub partner: Cell,
    pub obstacles: Vec<bool>,
    pub explored: Vec<bool>,
}

impl ObsLayout {
    pub fn decode(&self, obs: &Observation) -> Option<DecodedObs> {
        if obs.channels.len() != self.len() {
            return None;
        }
        let find = |c: usize| {
            obs.channels[self.channel(c)]
                .iter()
                .position(|&v| v > 0.5)
                .map(|i| Cell::from_index(i, self.width))
        };
        Some(DecodedObs {
            me: find(Self::SELF)?,
            partner: find(Self::PARTNER)?,
            obstacles: obs.channels[self.channel(Self::OBSTACLES)].iter().map(|&v| v > 0.5).collect(),
            explored: obs.channels[self.channel(Self::EXPLORED)].iter().map(|&v| v > 0.5).collect(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct ExplorationEnv {
    config: ExplorationConfig,
    rewards: ExplorationRewards,
    fixed_layout: Option<Layout>,
    obs: ObsLayout,
    state: ExplorationState,
}

impl ExplorationEnv {
    pub fn new(config: ExplorationConfig) -> Result<Self, EnvError> {
        let fixed_layout = if !config.layout_file.as_os_str().is_empty() {
            let text = std::fs::read_to_string(&config.layout_file)?;
            Some(Layout::parse(&text)?)
        } else if config.layout_mode == LayoutMode::Fixed {
            Some(generate_layout(
                config.layout_seed,
                config.width,
                config.height,
                config.obstacle_density,
            )?)
        } else {
            // Validate the generator parameters up front.
            generate_layout(0, config.width, config.height, config.obstacle_density)?;
            None
        };
        Self::build(config, fixed_layout)
    }

    pub fn with_layout(mut config: ExplorationConfig, layout: Layout) -> Result<Self, EnvError> {
        config.width = layout.width;
        config.height = layout.height;
        Self::build(config, Some(layout))
    }

    fn build(mut config: ExplorationConfig, fixed_layout: Option<Layout>) -> Result<Self, EnvError> {
        if config.horizon == 0 {
            return Err(EnvError::Layout("horizon must be positive".into()));
        }
        if let Some(l) = &fixed_layout {
            config.width = l.width;
            config.height = l.height;
        }
        let obs = ObsLayout {
            width: config.width,
            height: config.height,
            radius: config.local_view_radius,
        };
        let layout = fixed_layout.clone().unwrap_or_else(|| Layout::empty(config.width, config.height));
        let mut env = ExplorationEnv {
            rewards: ExplorationRewards::from(&config),
            config,
            fixed_layout,
            obs,
            state: ExplorationState {
                explored: vec![false; layout.obstacles.len()],
                layout,
                ai_pos: Cell::new(0, 0),
                human_pos: Cell::new(0, 0),
                t: 0,
                rounds_completed: 0,
                done: false,
                rng: ChaCha8Rng::seed_from_u64(0),
            },
        };
        env.reset(0);
        Ok(env)
    }

    pub fn config(&self) -> &ExplorationConfig {
        &self.config
    }

    pub fn state(&self) -> &ExplorationState {
        &self.state
    }

    pub fn obs_layout(&self) -> ObsLayout {
        self.obs
    }

    pub fn rewards(&self) -> ExplorationRewards {
        self.rewards
    }
}

impl CoordinationEnv for ExplorationEnv {
    fn descriptor(&self) -> EnvDescriptor {
        EnvDescriptor {
            kind: EnvKind::Exploration,
            width: self.config.width,
            height: self.config.height,
            action_count: ACTION_COUNT,
            obs_len: self.obs.len(),
            horizon: self.config.horizon,
        }
    }

    fn reset(&mut self, seed: u64) -> (Observation, Observation, EnvSnapshot) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = match &self.fixed_layout {
            Some(l) => l.clone(),
            None => {
                let layout_seed = rng.gen::<u64>();
                generate_layout(
                    layout_seed,
                    self.config.width,
                    self.config.height,
                    self.config.obstacle_density,
                )
                .expect("generator parameters validated at construction")
            }
        };
        self.state = ExplorationState {
            explored: vec![false; layout.obstacles.len()],
            layout,
            ai_pos: Cell::new(0, 0),
            human_pos: Cell::new(0, 0),
            t: 0,
            rounds_completed: 0,
            done: false,
            rng,
        };
        self.state.place_agents();
        (
            self.observe(Agent::Ai),
            self.observe(Agent::Human),
            self.snapshot(),
        )
    }

    fn step(&mut self, action: JointAction) -> Result<StepOutcome, EnvError> {
        if self.state.done {
            return Err(EnvError::EpisodeOver);
        }
        action.validate(ACTION_COUNT)?;
        let mut events = self.state.apply_joint_move(action, &self.rewards);
        self.state.t += 1;
        if self.state.completion_check() {
            events.push(RewardEvent {
                kind: EventKind::SparseHit,
                recipient: Recipient::Both,
                magnitude: self.rewards.completion,
            });
        }
        self.state.done = self.state.t >= self.config.horizon;
        Ok(StepOutcome {
            obs_ai: self.observe(Agent::Ai),
            obs_human: self.observe(Agent::Human),
            events,
            done: self.state.done,
        })
    }

    fn counterfactual_observe(&self, snapshot: &EnvSnapshot, human_action: usize) -> Result<Observation, EnvError> {
        if human_action >= ACTION_COUNT {
            return Err(EnvError::InvalidAction {
                action: human_action,
                count: ACTION_COUNT,
            });
        }
        let mut state = ExplorationState::decode(snapshot)?;
        if state.layout.width != self.config.width || state.layout.height != self.config.height {
            return Err(EnvError::Format("snapshot dimensions differ from this environment".into()));
        }
        if human_action != STAY {
            state.apply_human_only(human_action);
        }
        Ok(self.obs.encode(&state, Agent::Ai))
    }

    fn snapshot(&self) -> EnvSnapshot {
        self.state.encode()
    }

    fn restore(&mut self, snapshot: &EnvSnapshot) -> Result<(), EnvError> {
        let state = ExplorationState::decode(snapshot)?;
        if state.layout.width != self.config.width || state.layout.height != self.config.height {
            return Err(EnvError::Format("snapshot dimensions differ from this environment".into()));
        }
        self.state = state;
        Ok(())
    }

    fn observe(&self, agent: Agent) -> Observation {
        self.obs.encode(&self.state, agent)
    }

    fn t(&self) -> usize {
        self.state.t
    }

    fn is_done(&self) -> bool {
        self.state.done
    }
}
