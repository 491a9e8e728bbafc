//! Seeded, procedurally generated gridworld with an egocentric 7x7x3
//! observation encoding and an observation-noise wrapper.
//!
//! The `Crossing` variant is a bordered rectangle split into areas by
//! full-height interior walls, each pierced by a single gap; `MultiRoom`
//! uses horizontal dividers instead, so the same machinery produces a second
//! distinct family of layouts. Generation is a pure function of the spec:
//! the same spec always yields a bit-identical world.
//!
//! Wall positions are pairwise non-adjacent, which keeps every layout
//! solvable and every area at least one cell wide. The feasible layouts form
//! a small enumerable set, and a seed selects one through an affine map
//! (`index = seed * PRIME mod layout_count`), so any contiguous range of
//! seeds covers as many distinct layouts as the space allows. Because the
//! layout space is small, "never seen" evaluation combines disjoint seed
//! ranges with observation noise rather than relying on seeds alone.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{mix_seed, SplitMix64};

pub const VIEW_SIZE: usize = 7;
pub const OBS_CHANNELS: usize = 3;
/// Flattened observation length: 7 * 7 * 3.
pub const OBS_LEN: usize = VIEW_SIZE * VIEW_SIZE * OBS_CHANNELS;
/// Actions 0/1 rotate, 2 moves forward, 3..=6 are inert (they keep the
/// action head at 7 outputs while the task needs only 3).
pub const NUM_ACTIONS: usize = 7;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("infeasible spec: {0}")]
    InfeasibleSpec(String),
    #[error("step called after the episode finished")]
    EpisodeFinished,
    #[error("invalid noise config: {0}")]
    InvalidNoise(String),
}

/// Layout family of a generated world.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Crossing,
    MultiRoom,
}

/// Everything that determines a world. `max_steps` of 0 means the default
/// `4 * width * height`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub num_walls: usize,
    pub seed: u64,
    #[serde(default)]
    pub max_steps: usize,
    pub variant: Variant,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            width: 9,
            height: 9,
            num_walls: 2,
            seed: 0,
            max_steps: 4 * 9 * 9,
            variant: Variant::Crossing,
        }
    }
}

impl GridSpec {
    pub fn with_seed(seed: u64) -> Self {
        GridSpec { seed, ..GridSpec::default() }
    }

    pub fn effective_max_steps(&self) -> usize {
        if self.max_steps == 0 {
            4 * self.width * self.height
        } else {
            self.max_steps
        }
    }

    pub fn validate(&self) -> Result<(), GridError> {
        if self.width < 5 || self.height < 5 {
            return Err(GridError::InfeasibleSpec(format!(
                "grid must be at least 5x5, got {}x{}",
                self.width, self.height
            )));
        }
        if self.num_walls < 1 {
            return Err(GridError::InfeasibleSpec("num_walls must be >= 1".into()));
        }
        if self.effective_max_steps() < self.width * self.height {
            return Err(GridError::InfeasibleSpec(format!(
                "max_steps {} below width*height {}",
                self.effective_max_steps(),
                self.width * self.height
            )));
        }
        // Interior walls exclude the two columns (or rows) adjacent to the
        // border (so they never cover the start or goal cell) and are
        // pairwise non-adjacent, which needs a span of at least 2k + 3.
        let span = match self.variant {
            Variant::Crossing => self.width,
            Variant::MultiRoom => self.height,
        };
        if span < 2 * self.num_walls + 3 {
            return Err(GridError::InfeasibleSpec(format!(
                "{} non-adjacent walls do not fit in a span of {}",
                self.num_walls, span
            )));
        }
        Ok(())
    }
}

/// Binomial coefficient in u128; the layout spaces here are tiny.
fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// Lexicographic unranking of a k-subset of {0..n-1}.
fn unrank_combination(mut rank: u128, n: usize, k: usize) -> Vec<usize> {
    let mut subset = Vec::with_capacity(k);
    let mut next = 0;
    let mut remaining = k;
    while remaining > 0 {
        let with_next = binomial(n - next - 1, remaining - 1);
        if rank < with_next {
            subset.push(next);
            remaining -= 1;
        } else {
            rank -= with_next;
        }
        next += 1;
    }
    subset
}

/// Prime multiplier for the seed-to-layout map (Fibonacci hashing constant).
const LAYOUT_PRIME: u128 = 2_654_435_761;

/// Wall positions and per-wall gap offsets selected by a seed.
/// Positions are pairwise non-adjacent values in `[2, span-3]`; gaps are in
/// `[1, cross_span-2]`.
fn unrank_layout(seed: u64, span: usize, cross_span: usize, k: usize) -> (Vec<usize>, Vec<usize>) {
    let slots = span - 4; // candidate interior positions
    let gap_space = (cross_span - 2) as u128;
    let position_sets = binomial(slots - k + 1, k);
    let layout_count = position_sets * gap_space.pow(k as u32);
    let index = (seed as u128).wrapping_mul(LAYOUT_PRIME) % layout_count;

    // Non-adjacent k-subsets of the slot range map to plain k-subsets of a
    // shrunken range via x_i = y_i + i.
    let compressed = unrank_combination(index / gap_space.pow(k as u32), slots - k + 1, k);
    let positions: Vec<usize> =
        compressed.iter().enumerate().map(|(i, y)| 2 + y + i).collect();

    let mut gap_index = index % gap_space.pow(k as u32);
    let gaps: Vec<usize> = (0..k)
        .map(|_| {
            let g = 1 + (gap_index % gap_space) as usize;
            gap_index /= gap_space;
            g
        })
        .collect();
    (positions, gaps)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CellKind {
    Empty,
    Wall,
    Goal,
}

impl CellKind {
    fn id(self) -> f64 {
        match self {
            CellKind::Empty => 0.0,
            CellKind::Wall => 1.0,
            CellKind::Goal => 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    North,
    East,
    South,
    West,
}

impl Direction {
    fn left(self) -> Direction {
        match self {
            Direction::North => Direction::West,
            Direction::West => Direction::South,
            Direction::South => Direction::East,
            Direction::East => Direction::North,
        }
    }

    fn right(self) -> Direction {
        self.left().left().left()
    }

    /// (row, col) delta of one step forward.
    fn forward(self) -> (isize, isize) {
        match self {
            Direction::North => (-1, 0),
            Direction::East => (0, 1),
            Direction::South => (1, 0),
            Direction::West => (0, -1),
        }
    }

    /// (row, col) delta of one step to the agent's right.
    fn rightward(self) -> (isize, isize) {
        let (dr, dc) = self.right().forward();
        (dr, dc)
    }
}

/// Flattened 7x7x3 egocentric view, entries in [0, 1]. Index layout is
/// `(view_row * 7 + view_col) * 3 + channel` with view_row 6 the agent's own
/// row and view_col 3 straight ahead.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    values: Vec<f64>,
}

impl Observation {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, view_row: usize, view_col: usize, channel: usize) -> f64 {
        self.values[(view_row * VIEW_SIZE + view_col) * OBS_CHANNELS + channel]
    }
}

/// Result of one environment step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub obs: Observation,
    pub reward: f64,
    pub done: bool,
}

/// Uniform observation noise in [-amplitude, +amplitude], clamped back to
/// [0, 1]. A draw is fully determined by (seed, draw_index).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub amplitude: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { amplitude: 0.05, seed: 0 }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<(), GridError> {
        if !(self.amplitude >= 0.0 && self.amplitude < 0.5) {
            return Err(GridError::InvalidNoise(format!(
                "amplitude must be in [0, 0.5), got {}",
                self.amplitude
            )));
        }
        Ok(())
    }
}

/// A generated world plus the agent's mutable episode state.
#[derive(Debug, Clone, PartialEq)]
pub struct GridWorld {
    cells: Vec<CellKind>,
    pub spec: GridSpec,
    agent_pos: (usize, usize),
    agent_dir: Direction,
    step_count: usize,
    done: bool,
}

/// Builds the world described by `spec`. Walls sit at pairwise non-adjacent
/// interior positions (columns for `Crossing`, rows for `MultiRoom`), each
/// with one gap, so every layout is solvable by construction.
pub fn generate(spec: &GridSpec) -> Result<GridWorld, GridError> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut cells = vec![CellKind::Empty; w * h];
    for c in 0..w {
        cells[c] = CellKind::Wall;
        cells[(h - 1) * w + c] = CellKind::Wall;
    }
    for r in 0..h {
        cells[r * w] = CellKind::Wall;
        cells[r * w + w - 1] = CellKind::Wall;
    }

    match spec.variant {
        Variant::Crossing => {
            let (cols, gaps) = unrank_layout(spec.seed, w, h, spec.num_walls);
            for (col, gap_row) in cols.iter().zip(&gaps) {
                for r in 1..h - 1 {
                    if r != *gap_row {
                        cells[r * w + col] = CellKind::Wall;
                    }
                }
            }
        }
        Variant::MultiRoom => {
            let (rows, gaps) = unrank_layout(spec.seed, h, w, spec.num_walls);
            for (row, gap_col) in rows.iter().zip(&gaps) {
                for c in 1..w - 1 {
                    if c != *gap_col {
                        cells[row * w + c] = CellKind::Wall;
                    }
                }
            }
        }
    }

    cells[(h - 2) * w + (w - 2)] = CellKind::Goal;
    Ok(GridWorld {
        cells,
        spec: spec.clone(),
        agent_pos: (1, 1),
        agent_dir: Direction::East,
        step_count: 0,
        done: false,
    })
}

impl GridWorld {
    pub fn cell(&self, row: usize, col: usize) -> CellKind {
        self.cells[row * self.spec.width + col]
    }

    pub fn agent_pos(&self) -> (usize, usize) {
        self.agent_pos
    }

    pub fn agent_dir(&self) -> Direction {
        self.agent_dir
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn start_pos(&self) -> (usize, usize) {
        (1, 1)
    }

    pub fn goal_pos(&self) -> (usize, usize) {
        (self.spec.height - 2, self.spec.width - 2)
    }

    /// Puts the agent back at the start cell facing east and returns the
    /// initial observation.
    pub fn reset(&mut self) -> Observation {
        self.agent_pos = self.start_pos();
        self.agent_dir = Direction::East;
        self.step_count = 0;
        self.done = false;
        self.encode_observation()
    }

    /// Advances the episode by one action (0 rotate left, 1 rotate right,
    /// 2 forward, 3..=6 no-op). Reaching the goal ends the episode with
    /// reward `1 - 0.9 * step_count / max_steps`; running out of steps ends
    /// it with reward 0.
    pub fn step(&mut self, action: usize) -> Result<StepOutcome, GridError> {
        if self.done {
            return Err(GridError::EpisodeFinished);
        }
        self.step_count += 1;
        match action {
            0 => self.agent_dir = self.agent_dir.left(),
            1 => self.agent_dir = self.agent_dir.right(),
            2 => {
                let (dr, dc) = self.agent_dir.forward();
                let nr = self.agent_pos.0 as isize + dr;
                let nc = self.agent_pos.1 as isize + dc;
                // The border is walled, so in-bounds checking is implicit.
                if self.cell(nr as usize, nc as usize) != CellKind::Wall {
                    self.agent_pos = (nr as usize, nc as usize);
                }
            }
            _ => {}
        }

        let max_steps = self.spec.effective_max_steps();
        let mut reward = 0.0;
        if self.cell(self.agent_pos.0, self.agent_pos.1) == CellKind::Goal {
            self.done = true;
            reward = 1.0 - 0.9 * (self.step_count as f64 / max_steps as f64);
        } else if self.step_count >= max_steps {
            self.done = true;
        }
        Ok(StepOutcome { obs: self.encode_observation(), reward, done: self.done })
    }

    /// Encodes the 7x7 window in front of the agent, rotated into the agent
    /// frame. Channel 0 is the cell-kind id / 2, channel 1 a traversable
    /// flag, channel 2 a goal flag; out-of-bounds cells read as walls.
    pub fn encode_observation(&self) -> Observation {
        let mut values = vec![0.0; OBS_LEN];
        let fwd = self.agent_dir.forward();
        let right = self.agent_dir.rightward();
        for vr in 0..VIEW_SIZE {
            let ahead = (VIEW_SIZE - 1 - vr) as isize;
            for vc in 0..VIEW_SIZE {
                let side = vc as isize - (VIEW_SIZE / 2) as isize;
                let r = self.agent_pos.0 as isize + fwd.0 * ahead + right.0 * side;
                let c = self.agent_pos.1 as isize + fwd.1 * ahead + right.1 * side;
                let kind = if r < 0
                    || c < 0
                    || r >= self.spec.height as isize
                    || c >= self.spec.width as isize
                {
                    CellKind::Wall
                } else {
                    self.cell(r as usize, c as usize)
                };
                let base = (vr * VIEW_SIZE + vc) * OBS_CHANNELS;
                values[base] = kind.id() / 2.0;
                values[base + 1] = if kind == CellKind::Wall { 0.0 } else { 1.0 };
                values[base + 2] = if kind == CellKind::Goal { 1.0 } else { 0.0 };
            }
        }
        Observation { values }
    }
}

/// Perturbs every observation entry by an independent uniform draw in
/// [-amplitude, +amplitude] and clamps to [0, 1]. The perturbation stream is
/// a pure function of `(cfg.seed, draw_index)`.
pub fn apply_noise(obs: &Observation, cfg: &NoiseConfig, draw_index: u64) -> Observation {
    let mut rng = SplitMix64::new(mix_seed(cfg.seed, draw_index));
    let values = obs
        .values
        .iter()
        .map(|v| {
            let delta = rng.uniform(-cfg.amplitude, cfg.amplitude);
            (v + delta).clamp(0.0, 1.0)
        })
        .collect();
    Observation { values }
}
