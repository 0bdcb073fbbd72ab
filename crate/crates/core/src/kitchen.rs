//! Small cooperative kitchen.
//!
//! Agents fetch onions, fill the single pot with three of them, wait for the
//! soup to cook, scoop it onto a dish and deliver it at the serve window.
//! Every delivery pays a shared sparse reward; pot filling, dish pickup and
//! soup pickup pay smaller stage rewards to whoever did them.
//!
//! Layout legend: `X` counter, `.` floor, `O` onion dispenser, `D` dish
//! dispenser, `P` pot, `S` serve window.

use std::collections::VecDeque;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{
    read_rng, write_rng, Agent, ByteReader, ByteWriter, Cell, CoordinationEnv, EnvDescriptor, EnvError,
    EnvKind, EnvSnapshot, EventKind, JointAction, Observation, Recipient, RewardEvent, StepOutcome, DOWN,
    INTERACT, LEFT, RIGHT, STAY, UP,
};

pub const ACTION_COUNT: usize = 6;
const MAGIC: &[u8; 4] = b"KIT1";
pub const DEFAULT_LAYOUT: &str = "XXPXX\nO...X\nX...X\nXDXSX\n";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tile {
    Floor,
    Counter,
    OnionDispenser,
    DishDispenser,
    Pot,
    ServeWindow,
}

impl Tile {
    pub const FIXTURES: [Tile; 5] = [
        Tile::Counter,
        Tile::OnionDispenser,
        Tile::DishDispenser,
        Tile::Pot,
        Tile::ServeWindow,
    ];

    fn from_char(c: char) -> Option<Tile> {
        Some(match c {
            '.' => Tile::Floor,
            'X' => Tile::Counter,
            'O' => Tile::OnionDispenser,
            'D' => Tile::DishDispenser,
            'P' => Tile::Pot,
            'S' => Tile::ServeWindow,
            _ => return None,
        })
    }

    fn to_char(self) -> char {
        match self {
            Tile::Floor => '.',
            Tile::Counter => 'X',
            Tile::OnionDispenser => 'O',
            Tile::DishDispenser => 'D',
            Tile::Pot => 'P',
            Tile::ServeWindow => 'S',
        }
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Option<Tile> {
        [
            Tile::Floor,
            Tile::Counter,
            Tile::OnionDispenser,
            Tile::DishDispenser,
            Tile::Pot,
            Tile::ServeWindow,
        ]
        .get(c as usize)
        .copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Held {
    Nothing,
    Onion,
    Dish,
    Soup,
}

impl Held {
    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Option<Held> {
        [Held::Nothing, Held::Onion, Held::Dish, Held::Soup].get(c as usize).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KitchenLayout {
    pub width: usize,
    pub height: usize,
    pub tiles: Vec<Tile>,
}

impl KitchenLayout {
    pub fn parse(text: &str) -> Result<Self, EnvError> {
        let rows: Vec<&str> = text.lines().map(str::trim_end).filter(|l| !l.is_empty()).collect();
        let width = rows.first().map_or(0, |r| r.chars().count());
        if width == 0 {
            return Err(EnvError::Layout("empty kitchen layout".into()));
        }
        let mut tiles = Vec::with_capacity(width * rows.len());
        for (y, row) in rows.iter().enumerate() {
            if row.chars().count() != width {
                return Err(EnvError::Layout(format!("row {y} has a different width")));
            }
            for c in row.chars() {
                tiles.push(
                    Tile::from_char(c).ok_or_else(|| EnvError::Layout(format!("unknown kitchen tile {c:?}")))?,
                );
            }
        }
        let layout = KitchenLayout {
            width,
            height: rows.len(),
            tiles,
        };
        let count = |t: Tile| layout.tiles.iter().filter(|&&x| x == t).count();
        if count(Tile::Pot) != 1 {
            return Err(EnvError::Layout("kitchen needs exactly one pot".into()));
        }
        for t in [Tile::OnionDispenser, Tile::DishDispenser, Tile::ServeWindow] {
            if count(t) == 0 {
                return Err(EnvError::Layout(format!("kitchen is missing a {:?}", t)));
            }
        }
        if count(Tile::Floor) < 2 {
            return Err(EnvError::Layout("kitchen needs at least 2 floor cells".into()));
        }
        Ok(layout)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for row in self.tiles.chunks(self.width) {
            s.extend(row.iter().map(|t| t.to_char()));
            s.push('\n');
        }
        s
    }

    pub fn tile(&self, c: Cell) -> Tile {
        self.tiles[c.index(self.width)]
    }

    pub fn floor_cells(&self) -> Vec<Cell> {
        (0..self.tiles.len())
            .filter(|&i| self.tiles[i] == Tile::Floor)
            .map(|i| Cell::from_index(i, self.width))
            .collect()
    }

    pub fn pot(&self) -> Cell {
        let i = self.tiles.iter().position(|&t| t == Tile::Pot).expect("validated layout");
        Cell::from_index(i, self.width)
    }
}

impl Default for KitchenLayout {
    fn default() -> Self {
        KitchenLayout::parse(DEFAULT_LAYOUT).expect("built-in layout is valid")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KitchenConfig {
    pub horizon: usize,
    pub cook_time: u32,
    pub serve_reward: f64,
    pub onion_in_pot_reward: f64,
    pub dish_pickup_reward: f64,
    pub soup_pickup_reward: f64,
    /// Plain-text layout; the built-in 5×4 kitchen when empty.
    pub layout_file: PathBuf,
}

impl Default for KitchenConfig {
    fn default() -> Self {
        KitchenConfig {
            horizon: 400,
            cook_time: 20,
            serve_reward: 20.0,
            onion_in_pot_reward: 3.0,
            dish_pickup_reward: 3.0,
            soup_pickup_reward: 5.0,
            layout_file: PathBuf::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KitchenState {
    pub layout: KitchenLayout,
    pub pos: [Cell; 2],
    /// Direction index (`UP..=RIGHT`) each agent faces.
    pub facing: [usize; 2],
    pub held: [Held; 2],
    pub pot_contents: u32,
    pub pot_timer: u32,
    pub t: usize,
    pub done: bool,
    pub onions_dispensed: u64,
    pub soups_scooped: u64,
    pub soups_served: u64,
    pub rng: ChaCha8Rng,
}

fn slot(agent: Agent) -> usize {
    match agent {
        Agent::Ai => 0,
        Agent::Human => 1,
    }
}

impl KitchenState {
    pub fn pos_of(&self, agent: Agent) -> Cell {
        self.pos[slot(agent)]
    }

    pub fn held_of(&self, agent: Agent) -> Held {
        self.held[slot(agent)]
    }

    pub fn soup_ready(&self, cook_time: u32) -> bool {
        self.pot_contents == 3 && self.pot_timer >= cook_time
    }

    /// Onions currently held by either agent.
    pub fn onions_held(&self) -> u64 {
        self.held.iter().filter(|&&h| h == Held::Onion).count() as u64
    }

    fn target(&self, agent: Agent, action: usize) -> Option<Cell> {
        let next = self.pos_of(agent).step(action, self.layout.width, self.layout.height)?;
        (self.layout.tile(next) == Tile::Floor && next != self.pos_of(agent.other())).then_some(next)
    }

    fn apply_moves(&mut self, ai: usize, human: usize) {
        let mut targets = [None, None];
        for (k, (agent, action)) in [(Agent::Ai, ai), (Agent::Human, human)].into_iter().enumerate() {
            if action <= RIGHT {
                self.facing[k] = action;
                targets[k] = self.target(agent, action);
            }
        }
        if targets[0].is_some() && targets[0] == targets[1] {
            targets = [None, None];
        }
        for k in 0..2 {
            if let Some(c) = targets[k] {
                self.pos[k] = c;
            }
        }
    }

    /// Interaction with the faced cell. Returns the events and whether the
    /// pot was just filled.
    fn interact(&mut self, agent: Agent, cfg: &KitchenConfig, events: &mut Vec<RewardEvent>) -> bool {
        let k = slot(agent);
        let Some(faced) = self.pos[k].step(self.facing[k], self.layout.width, self.layout.height) else {
            return false;
        };
        let stage = |kind, magnitude| RewardEvent {
            kind,
            recipient: agent.into(),
            magnitude,
        };
        match (self.layout.tile(faced), self.held[k]) {
            (Tile::OnionDispenser, Held::Nothing) => {
                self.held[k] = Held::Onion;
                self.onions_dispensed += 1;
            }
            (Tile::DishDispenser, Held::Nothing) => {
                self.held[k] = Held::Dish;
                events.push(stage(EventKind::DishPickup, cfg.dish_pickup_reward));
            }
            (Tile::Pot, Held::Onion) if self.pot_contents < 3 => {
                self.held[k] = Held::Nothing;
                self.pot_contents += 1;
                events.push(stage(EventKind::OnionIntoPot, cfg.onion_in_pot_reward));
                return self.pot_contents == 3;
            }
            (Tile::Pot, Held::Dish) if self.soup_ready(cfg.cook_time) => {
                self.held[k] = Held::Soup;
                self.pot_contents = 0;
                self.pot_timer = 0;
                self.soups_scooped += 1;
                events.push(stage(EventKind::SoupPickup, cfg.soup_pickup_reward));
            }
            (Tile::ServeWindow, Held::Soup) => {
                self.held[k] = Held::Nothing;
                self.soups_served += 1;
                events.push(RewardEvent {
                    kind: EventKind::SparseHit,
                    recipient: Recipient::Both,
                    magnitude: cfg.serve_reward,
                });
            }
            _ => {}
        }
        false
    }

    /// One full transition without advancing `t`.
    pub fn kitchen_step(&mut self, joint: JointAction, cfg: &KitchenConfig) -> Vec<RewardEvent> {
        self.apply_moves(joint.ai, joint.human);
        let mut events = Vec::new();
        let mut filled = false;
        for (agent, action) in [(Agent::Ai, joint.ai), (Agent::Human, joint.human)] {
            if action == INTERACT {
                filled |= self.interact(agent, cfg, &mut events);
            }
        }
        if self.pot_contents == 3 && self.pot_timer < cfg.cook_time && !filled {
            self.pot_timer += 1;
        }
        events
    }

    fn place_agents(&mut self) {
        let floor = self.layout.floor_cells();
        let picks: Vec<Cell> = floor.choose_multiple(&mut self.rng, 2).copied().collect();
        self.pos = [picks[0], picks[1]];
        self.facing = [self.rng.gen_range(0..4), self.rng.gen_range(0..4)];
    }

    fn encode(&self) -> EnvSnapshot {
        let mut w = ByteWriter::new(MAGIC);
        w.u32(self.layout.width as u32);
        w.u32(self.layout.height as u32);
        for t in &self.layout.tiles {
            w.u8(t.code());
        }
        for k in 0..2 {
            w.cell(self.pos[k]);
            w.u8(self.facing[k] as u8);
            w.u8(self.held[k].code());
        }
        w.u32(self.pot_contents);
        w.u32(self.pot_timer);
        w.u64(self.t as u64);
        w.u8(self.done as u8);
        w.u64(self.onions_dispensed);
        w.u64(self.soups_scooped);
        w.u64(self.soups_served);
        write_rng(&mut w, &self.rng);
        w.finish()
    }

    fn decode(snapshot: &EnvSnapshot) -> Result<Self, EnvError> {
        let bad = |m: &str| EnvError::Format(m.to_string());
        let mut r = ByteReader::new(snapshot, MAGIC)?;
        let width = r.u32()? as usize;
        let height = r.u32()? as usize;
        let n = width.checked_mul(height).ok_or_else(|| bad("grid too large"))?;
        let tiles = r
            .take(n)?
            .iter()
            .map(|&c| Tile::from_code(c).ok_or_else(|| bad("unknown tile code")))
            .collect::<Result<Vec<_>, _>>()?;
        let layout = KitchenLayout { width, height, tiles };
        let mut pos = [Cell::new(0, 0); 2];
        let mut facing = [0; 2];
        let mut held = [Held::Nothing; 2];
        for k in 0..2 {
            pos[k] = r.cell()?;
            if pos[k].x >= width || pos[k].y >= height || layout.tile(pos[k]) != Tile::Floor {
                return Err(bad("agent is not on a floor cell"));
            }
            facing[k] = r.u8()? as usize;
            if facing[k] > RIGHT {
                return Err(bad("invalid facing"));
            }
            held[k] = Held::from_code(r.u8()?).ok_or_else(|| bad("invalid held item"))?;
        }
        let pot_contents = r.u32()?;
        let pot_timer = r.u32()?;
        if pot_contents > 3 {
            return Err(bad("pot holds more than 3 onions"));
        }
        let t = r.u64()? as usize;
        let done = r.u8()? != 0;
        let onions_dispensed = r.u64()?;
        let soups_scooped = r.u64()?;
        let soups_served = r.u64()?;
        let rng = read_rng(&mut r)?;
        r.finish()?;
        Ok(KitchenState {
            layout,
            pos,
            facing,
            held,
            pot_contents,
            pot_timer,
            t,
            done,
            onions_dispensed,
            soups_scooped,
            soups_served,
            rng,
        })
    }
}

/// Flat observation layout: seven `width×height` grids (self, partner,
/// then one per fixture type) followed by facing/holding one-hots for self
/// and partner, a pot-count one-hot, a ready flag and the scaled timer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KitchenObsLayout {
    pub width: usize,
    pub height: usize,
}

impl KitchenObsLayout {
    pub const GRIDS: usize = 7;

    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    pub fn len(&self) -> usize {
        Self::GRIDS * self.cells() + 2 * (4 + 3) + 4 + 1 + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn tail(&self) -> usize {
        Self::GRIDS * self.cells()
    }

    fn fixture_grid(t: Tile) -> usize {
        2 + Tile::FIXTURES.iter().position(|&f| f == t).expect("fixture tile")
    }

    pub fn encode(&self, s: &KitchenState, viewer: Agent, cook_time: u32) -> Observation {
        let n = self.cells();
        let mut v = vec![0.0; self.len()];
        v[s.pos_of(viewer).index(self.width)] = 1.0;
        v[n + s.pos_of(viewer.other()).index(self.width)] = 1.0;
        for (i, &t) in s.layout.tiles.iter().enumerate() {
            if t != Tile::Floor {
                v[Self::fixture_grid(t) * n + i] = 1.0;
            }
        }
        let mut o = self.tail();
        for agent in [viewer, viewer.other()] {
            v[o + s.facing[slot(agent)]] = 1.0;
            o += 4;
            match s.held_of(agent) {
                Held::Nothing => {}
                h => v[o + h.code() as usize - 1] = 1.0,
            }
            o += 3;
        }
        v[o + s.pot_contents as usize] = 1.0;
        o += 4;
        v[o] = if s.soup_ready(cook_time) { 1.0 } else { 0.0 };
        v[o + 1] = s.pot_timer as f64 / cook_time.max(1) as f64;
        Observation { channels: v, t: s.t }
    }

    pub fn decode(&self, obs: &Observation) -> Option<KitchenView> {
        if obs.channels.len() != self.len() {
            return None;
        }
        let n = self.cells();
        let c = &obs.channels;
        let find = |g: usize| (0..n).find(|&i| c[g * n + i] > 0.5).map(|i| Cell::from_index(i, self.width));
        let mut tiles = vec![Tile::Floor; n];
        for t in Tile::FIXTURES {
            let g = Self::fixture_grid(t);
            for i in 0..n {
                if c[g * n + i] > 0.5 {
                    tiles[i] = t;
                }
            }
        }
        let o = self.tail();
        let one_hot = |start: usize, len: usize| (0..len).find(|&k| c[start + k] > 0.5);
        let held = |start: usize| one_hot(start, 3).map_or(Held::Nothing, |k| Held::from_code(k as u8 + 1).unwrap());
        Some(KitchenView {
            me: find(0)?,
            partner: find(1)?,
            layout: KitchenLayout {
                width: self.width,
                height: self.height,
                tiles,
            },
            facing: one_hot(o, 4)?,
            held: held(o + 4),
            partner_held: held(o + 11),
            pot_contents: one_hot(o + 14, 4)? as u32,
            soup_ready: c[o + 18] > 0.5,
        })
    }
}

/// What a scripted partner reads back out of an observation.
#[derive(Clone, Debug)]
pub struct KitchenView {
    pub me: Cell,
    pub partner: Cell,
    pub layout: KitchenLayout,
    pub facing: usize,
    pub held: Held,
    pub partner_held: Held,
    pub pot_contents: u32,
    pub soup_ready: bool,
}

impl KitchenView {
    /// First action of a shortest route to interact with any tile of type
    /// `goal`: walk to an adjacent floor cell, turn to face it, interact.
    /// `None` if unreachable.
    pub fn route_to(&self, goal: Tile) -> Option<usize> {
        let (w, h) = (self.layout.width, self.layout.height);
        let faces_goal = |c: Cell| -> Option<usize> {
            (UP..=RIGHT).find(|&d| c.step(d, w, h).is_some_and(|n| self.layout.tile(n) == goal))
        };
        if let Some(d) = faces_goal(self.me) {
            let facing_ok = self.me.step(self.facing, w, h).is_some_and(|n| self.layout.tile(n) == goal);
            return Some(if facing_ok { INTERACT } else { d });
        }
        // Breadth-first search over floor cells, partner treated as blocked.
        let mut first: Vec<Option<usize>> = vec![None; w * h];
        let mut seen = vec![false; w * h];
        seen[self.me.index(w)] = true;
        let mut queue = VecDeque::from([self.me]);
        while let Some(c) = queue.pop_front() {
            for d in [UP, DOWN, LEFT, RIGHT] {
                let Some(n) = c.step(d, w, h) else { continue };
                let i = n.index(w);
                if seen[i] || self.layout.tile(n) != Tile::Floor || n == self.partner {
                    continue;
                }
                seen[i] = true;
                first[i] = if c == self.me { Some(d) } else { first[c.index(w)] };
                if faces_goal(n).is_some() {
                    return first[i];
                }
                queue.push_back(n);
            }
        }
        None
    }
}

#[derive(Clone, Debug)]
pub struct MiniKitchenEnv {
    config: KitchenConfig,
    obs: KitchenObsLayout,
    state: KitchenState,
}

impl MiniKitchenEnv {
    pub fn new(config: KitchenConfig) -> Result<Self, EnvError> {
        let layout = if config.layout_file.as_os_str().is_empty() {
            KitchenLayout::default()
        } else {
            KitchenLayout::parse(&std::fs::read_to_string(&config.layout_file)?)?
        };
        Self::with_layout(config, layout)
    }

    pub fn with_layout(config: KitchenConfig, layout: KitchenLayout) -> Result<Self, EnvError> {
        if config.horizon == 0 || config.cook_time == 0 {
            return Err(EnvError::Layout("horizon and cook_time must be positive".into()));
        }
        let obs = KitchenObsLayout {
            width: layout.width,
            height: layout.height,
        };
        let first = layout.floor_cells();
        let mut env = MiniKitchenEnv {
            config,
            obs,
            state: KitchenState {
                pos: [first[0], first[1]],
                layout,
                facing: [UP; 2],
                held: [Held::Nothing; 2],
                pot_contents: 0,
                pot_timer: 0,
                t: 0,
                done: false,
                onions_dispensed: 0,
                soups_scooped: 0,
                soups_served: 0,
                rng: ChaCha8Rng::seed_from_u64(0),
            },
        };
        env.reset(0);
        Ok(env)
    }

    pub fn config(&self) -> &KitchenConfig {
        &self.config
    }

    pub fn state(&self) -> &KitchenState {
        &self.state
    }

    pub fn obs_layout(&self) -> KitchenObsLayout {
        self.obs
    }
}

impl CoordinationEnv for MiniKitchenEnv {
    fn descriptor(&self) -> EnvDescriptor {
        EnvDescriptor {
            kind: EnvKind::MiniKitchen,
            width: self.obs.width,
            height: self.obs.height,
            action_count: ACTION_COUNT,
            obs_len: self.obs.len(),
            horizon: self.config.horizon,
        }
    }

    fn reset(&mut self, seed: u64) -> (Observation, Observation, EnvSnapshot) {
        let s = &mut self.state;
        s.rng = ChaCha8Rng::seed_from_u64(seed);
        s.held = [Held::Nothing; 2];
        s.pot_contents = 0;
        s.pot_timer = 0;
        s.t = 0;
        s.done = false;
        s.onions_dispensed = 0;
        s.soups_scooped = 0;
        s.soups_served = 0;
        s.place_agents();
        (self.observe(Agent::Ai), self.observe(Agent::Human), self.snapshot())
    }

    fn step(&mut self, action: JointAction) -> Result<StepOutcome, EnvError> {
        if self.state.done {
            return Err(EnvError::EpisodeOver);
        }
        action.validate(ACTION_COUNT)?;
        let events = self.state.kitchen_step(action, &self.config);
        self.state.t += 1;
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
        let mut state = KitchenState::decode(snapshot)?;
        if state.layout.width != self.obs.width || state.layout.height != self.obs.height {
            return Err(EnvError::Format("snapshot dimensions differ from this environment".into()));
        }
        state.apply_moves(STAY, human_action);
        if human_action == INTERACT {
            state.interact(Agent::Human, &self.config, &mut Vec::new());
        }
        Ok(self.obs.encode(&state, Agent::Ai, self.config.cook_time))
    }

    fn snapshot(&self) -> EnvSnapshot {
        self.state.encode()
    }

    fn restore(&mut self, snapshot: &EnvSnapshot) -> Result<(), EnvError> {
        let state = KitchenState::decode(snapshot)?;
        if state.layout != self.state.layout {
            return Err(EnvError::Format("snapshot layout differs from this environment".into()));
        }
        self.state = state;
        Ok(())
    }

    fn observe(&self, agent: Agent) -> Observation {
        self.obs.encode(&self.state, agent, self.config.cook_time)
    }

    fn t(&self) -> usize {
        self.state.t
    }

    fn is_done(&self) -> bool {
        self.state.done
    }
}
