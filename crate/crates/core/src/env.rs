//! Two-agent coordination environment interface.
//!
//! Both environments are simultaneous-move gridworlds shared by one learning
//! AI agent and one scripted human partner. Besides ordinary stepping they
//! expose byte snapshots of their full state and a pure counterfactual query:
//! the AI's next observation had only the human acted.

use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Moves shared by both environments. `Stay` and, in the kitchen,
/// `Interact` follow the four directions.
pub const UP: usize = 0;
pub const DOWN: usize = 1;
pub const LEFT: usize = 2;
pub const RIGHT: usize = 3;
pub const STAY: usize = 4;
pub const INTERACT: usize = 5;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("episode is over; call reset")]
    EpisodeOver,
    #[error("action {action} out of range for {count} actions")]
    InvalidAction { action: usize, count: usize },
    #[error("snapshot format error: {0}")]
    Format(String),
    #[error("layout generation failed: {0}")]
    Generation(String),
    #[error("layout error: {0}")]
    Layout(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    Exploration,
    MiniKitchen,
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::Exploration => "exploration",
            EnvKind::MiniKitchen => "mini-kitchen",
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Static facts about an environment instance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnvDescriptor {
    pub kind: EnvKind,
    pub width: usize,
    pub height: usize,
    pub action_count: usize,
    pub obs_len: usize,
    pub horizon: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct JointAction {
    pub ai: usize,
    pub human: usize,
}

impl JointAction {
    pub fn new(ai: usize, human: usize) -> Self {
        JointAction { ai, human }
    }

    pub fn validate(&self, count: usize) -> Result<(), EnvError> {
        for action in [self.ai, self.human] {
            if action >= count {
                return Err(EnvError::InvalidAction { action, count });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Agent {
    Ai,
    Human,
}

impl Agent {
    pub fn other(self) -> Agent {
        match self {
            Agent::Ai => Agent::Human,
            Agent::Human => Agent::Ai,
        }
    }
}

/// Who a reward event is credited to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Recipient {
    Ai,
    Human,
    Both,
}

impl Recipient {
    pub fn includes(self, agent: Agent) -> bool {
        matches!(
            (self, agent),
            (Recipient::Both, _) | (Recipient::Ai, Agent::Ai) | (Recipient::Human, Agent::Human)
        )
    }
}

impl From<Agent> for Recipient {
    fn from(a: Agent) -> Self {
        match a {
            Agent::Ai => Recipient::Ai,
            Agent::Human => Recipient::Human,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    /// Task completion; feeds the sparse reward channel.
    SparseHit,
    NewCell,
    Revisit,
    Invalid,
    OnionIntoPot,
    DishPickup,
    SoupPickup,
}

/// One reward-relevant occurrence during a step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardEvent {
    pub kind: EventKind,
    pub recipient: Recipient,
    pub magnitude: f64,
}

impl RewardEvent {
    pub fn is_sparse(&self) -> bool {
        self.kind == EventKind::SparseHit
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub channels: Vec<f64>,
    pub t: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub obs_ai: Observation,
    pub obs_human: Observation,
    pub events: Vec<RewardEvent>,
    pub done: bool,
}

/// Serialized complete environment state, RNG included.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnvSnapshot {
    pub bytes: Vec<u8>,
}

pub trait CoordinationEnv {
    fn descriptor(&self) -> EnvDescriptor;

    /// Starts a fresh episode. Returns the AI and human observations and a
    /// snapshot of the initial state.
    fn reset(&mut self, seed: u64) -> (Observation, Observation, EnvSnapshot);

    fn step(&mut self, action: JointAction) -> Result<StepOutcome, EnvError>;

    /// The AI's observation after applying only `human_action` to the state
    /// in `snapshot`, the AI staying put. Does not touch `self`.
    fn counterfactual_observe(
        &self,
        snapshot: &EnvSnapshot,
        human_action: usize,
    ) -> Result<Observation, EnvError>;

    fn snapshot(&self) -> EnvSnapshot;

    fn restore(&mut self, snapshot: &EnvSnapshot) -> Result<(), EnvError>;

    fn observe(&self, agent: Agent) -> Observation;

    /// Timestep within the current episode.
    fn t(&self) -> usize;

    fn is_done(&self) -> bool;
}

/// Grid coordinate, `x` is the column.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub x: usize,
    pub y: usize,
}

impl Cell {
    pub fn new(x: usize, y: usize) -> Self {
        Cell { x, y }
    }

    pub fn index(self, width: usize) -> usize {
        self.y * width + self.x
    }

    pub fn from_index(i: usize, width: usize) -> Self {
        Cell {
            x: i % width,
            y: i / width,
        }
    }

    /// The neighbour in direction `action`, or `None` off the grid or for
    /// non-move actions.
    pub fn step(self, action: usize, width: usize, height: usize) -> Option<Cell> {
        match action {
            UP if self.y > 0 => Some(Cell::new(self.x, self.y - 1)),
            DOWN if self.y + 1 < height => Some(Cell::new(self.x, self.y + 1)),
            LEFT if self.x > 0 => Some(Cell::new(self.x - 1, self.y)),
            RIGHT if self.x + 1 < width => Some(Cell::new(self.x + 1, self.y)),
            _ => None,
        }
    }
}

pub(crate) struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new(magic: &[u8; 4]) -> Self {
        ByteWriter { buf: magic.to_vec() }
    }
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }
    pub fn bools(&mut self, v: &[bool]) {
        self.u32(v.len() as u32);
        self.buf.extend(v.iter().map(|&b| b as u8));
    }
    pub fn cell(&mut self, c: Cell) {
        self.u32(c.x as u32);
        self.u32(c.y as u32);
    }
    pub fn finish(self) -> EnvSnapshot {
        EnvSnapshot { bytes: self.buf }
    }
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(snapshot: &'a EnvSnapshot, magic: &[u8; 4]) -> Result<Self, EnvError> {
        let mut r = ByteReader {
            bytes: &snapshot.bytes,
            pos: 0,
        };
        if r.take(4)? != magic {
            return Err(EnvError::Format(format!(
                "snapshot is not a {} snapshot",
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(r)
    }
    pub fn take(&mut self, n: usize) -> Result<&'a [u8], EnvError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| EnvError::Format("truncated snapshot".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    pub fn u8(&mut self) -> Result<u8, EnvError> {
        Ok(self.take(1)?[0])
    }
    pub fn u32(&mut self) -> Result<u32, EnvError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn u64(&mut self) -> Result<u64, EnvError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn u128(&mut self) -> Result<u128, EnvError> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
    pub fn bools(&mut self) -> Result<Vec<bool>, EnvError> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.iter().map(|&b| b != 0).collect())
    }
    pub fn cell(&mut self) -> Result<Cell, EnvError> {
        Ok(Cell::new(self.u32()? as usize, self.u32()? as usize))
    }
    pub fn finish(self) -> Result<(), EnvError> {
        if self.pos != self.bytes.len() {
            return Err(EnvError::Format("trailing bytes in snapshot".into()));
        }
        Ok(())
    }
}

pub(crate) fn write_rng(w: &mut ByteWriter, rng: &rand_chacha::ChaCha8Rng) {
    w.bytes(&rng.get_seed());
    w.u64(rng.get_stream());
    w.u128(rng.get_word_pos());
}

pub(crate) fn read_rng(r: &mut ByteReader<'_>) -> Result<rand_chacha::ChaCha8Rng, EnvError> {
    use rand::SeedableRng;
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::from_seed(seed);
    rng.set_stream(r.u64()?);
    rng.set_word_pos(r.u128()?);
    Ok(rng)
}

/// Header of a trajectory replay file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryHeader {
    pub env: EnvKind,
    pub seed: u64,
    pub horizon: usize,
}

/// An episode's joint-action sequence, enough to replay it exactly.
///
/// On disk: one JSON header line `{"env":..,"seed":..,"horizon":..}`
/// followed by one `{"ai":..,"human":..}` line per step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trajectory {
    pub header: TrajectoryHeader,
    pub actions: Vec<JointAction>,
}

impl Trajectory {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), EnvError> {
        let line = serde_json::to_string(&self.header).expect("header serializes");
        writeln!(w, "{line}")?;
        for a in &self.actions {
            writeln!(w, "{}", serde_json::to_string(a).expect("action serializes"))?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self, EnvError> {
        let mut lines = r.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| EnvError::Format("empty trajectory file".into()))??;
        let header: TrajectoryHeader = serde_json::from_str(&header_line)
            .map_err(|e| EnvError::Format(format!("trajectory header: {e}")))?;
        let mut actions = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let a: JointAction = serde_json::from_str(&line)
                .map_err(|e| EnvError::Format(format!("trajectory line {}: {e}", i + 2)))?;
            actions.push(a);
        }
        Ok(Trajectory { header, actions })
    }

    /// Resets `env` with the recorded seed and re-applies every action.
    pub fn replay<E: CoordinationEnv + ?Sized>(&self, env: &mut E) -> Result<Vec<StepOutcome>, EnvError> {
        if env.descriptor().kind != self.header.env {
            return Err(EnvError::Format(format!(
                "trajectory recorded on {}, replayed on {}",
                self.header.env,
                env.descriptor().kind
            )));
        }
        env.reset(self.header.seed);
        self.actions.iter().map(|&a| env.step(a)).collect()
    }
}
