//! Deterministic toy environments: procedurally generated mazes,
//! CliffWalking and Taxi, with exhaustive oracles for their optimal values.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{encode_tabular, Canonical};
use crate::error::{Error, Result};
use crate::transition_model::{ActionId, EmpiricalGraph, StateId, TransitionSample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnvKind {
    Maze { width: usize, height: usize },
    CliffWalking,
    Taxi,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub seed: u64,
}

impl EnvSpec {
    pub fn maze(width: usize, height: usize, seed: u64) -> Self {
        Self {
            kind: EnvKind::Maze { width, height },
            seed,
        }
    }

    pub fn cliff_walking() -> Self {
        Self {
            kind: EnvKind::CliffWalking,
            seed: 0,
        }
    }

    pub fn taxi(seed: u64) -> Self {
        Self {
            kind: EnvKind::Taxi,
            seed,
        }
    }

    pub fn action_count(&self) -> usize {
        match self.kind {
            EnvKind::Maze { .. } | EnvKind::CliffWalking => 4,
            EnvKind::Taxi => 6,
        }
    }

    pub fn build(&self) -> Result<Environment> {
        Environment::new(*self)
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnvKind::Maze { width, height } => write!(f, "maze{width}x{height}"),
            EnvKind::CliffWalking => write!(f, "cliffwalking"),
            EnvKind::Taxi => write!(f, "taxi"),
        }
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    /// Accepts `maze5x5`, `maze:5x5`, `cliffwalking`/`cliff` and `taxi`.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        match lower.as_str() {
            "cliffwalking" | "cliff" => return Ok(EnvKind::CliffWalking),
            "taxi" => return Ok(EnvKind::Taxi),
            _ => {}
        }
        let dims = lower
            .strip_prefix("maze")
            .map(|d| d.trim_start_matches([':', '-', '_']))
            .ok_or_else(|| Error::Config(format!("unknown environment '{s}'")))?;
        let (w, h) = dims
            .split_once('x')
            .ok_or_else(|| Error::Config(format!("maze size must look like 5x5, got '{dims}'")))?;
        let parse = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| Error::Config(format!("bad maze dimension '{v}'")))
        };
        let (width, height) = (parse(w)?, parse(h)?);
        if width < 2 || height < 2 {
            return Err(Error::Config(
                "maze width and height must be at least 2".into(),
            ));
        }
        Ok(EnvKind::Maze { width, height })
    }
}

/// Canonical observation of every in-scope environment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Obs {
    Maze { x: u16, y: u16 },
    Cliff(u16),
    Taxi(u16),
}

impl Canonical for Obs {
    fn canonical_bytes(&self) -> Vec<u8> {
        match *self {
            Obs::Maze { x, y } => [&[0u8][..], &x.to_le_bytes(), &y.to_le_bytes()].concat(),
            Obs::Cliff(c) => [&[1u8][..], &c.to_le_bytes()].concat(),
            Obs::Taxi(t) => [&[2u8][..], &t.to_le_bytes()].concat(),
        }
    }
}

impl Obs {
    pub fn state_id(&self) -> StateId {
        encode_tabular(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub next_obs: Obs,
    pub reward: f64,
    pub done: bool,
}

const NORTH: u8 = 1;
const SOUTH: u8 = 2;
const EAST: u8 = 4;
const WEST: u8 = 8;

/// Perfect maze carved by a seeded recursive backtracker. Actions are
/// 0 north, 1 south, 2 east, 3 west.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MazeLayout {
    pub width: usize,
    pub height: usize,
    /// Open sides of each cell, row-major.
    open: Vec<u8>,
}

impl MazeLayout {
    /// Carving starts at the goal, which is opened on one side only. The goal
    /// is therefore a dead end and every other cell is reachable from the
    /// start without passing through it.
    pub fn generate(width: usize, height: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut open = vec![0u8; width * height];
        let mut visited = vec![false; width * height];
        let goal = (width - 1, height - 1);
        let mut stack = vec![goal];
        visited[goal.1 * width + goal.0] = true;
        while let Some(&(x, y)) = stack.last() {
            if (x, y) == goal && open[y * width + x] != 0 {
                break;
            }
            let mut options = Vec::with_capacity(4);
            if y > 0 && !visited[(y - 1) * width + x] {
                options.push((x, y - 1, NORTH, SOUTH));
            }
            if y + 1 < height && !visited[(y + 1) * width + x] {
                options.push((x, y + 1, SOUTH, NORTH));
            }
            if x + 1 < width && !visited[y * width + x + 1] {
                options.push((x + 1, y, EAST, WEST));
            }
            if x > 0 && !visited[y * width + x - 1] {
                options.push((x - 1, y, WEST, EAST));
            }
            match options.choose(&mut rng) {
                Some(&(nx, ny, here, there)) => {
                    open[y * width + x] |= here;
                    open[ny * width + nx] |= there;
                    visited[ny * width + nx] = true;
                    stack.push((nx, ny));
                }
                None => {
                    stack.pop();
                }
            }
        }
        Self {
            width,
            height,
            open,
        }
    }

    pub fn is_open(&self, x: usize, y: usize, side: u8) -> bool {
        self.open[y * self.width + x] & side != 0
    }

    pub fn goal(&self) -> (usize, usize) {
        (self.width - 1, self.height - 1)
    }

    pub fn step_penalty(&self) -> f64 {
        -0.1 / (self.width * self.height) as f64
    }

    /// Cell reached by moving from `(x, y)`; walls leave the agent in place.
    pub fn move_from(&self, x: usize, y: usize, action: u8) -> (usize, usize) {
        match action {
            0 if self.is_open(x, y, NORTH) => (x, y - 1),
            1 if self.is_open(x, y, SOUTH) => (x, y + 1),
            2 if self.is_open(x, y, EAST) => (x + 1, y),
            3 if self.is_open(x, y, WEST) => (x - 1, y),
            _ => (x, y),
        }
    }

    pub fn to_ascii(&self) -> String {
        let mut out = String::new();
        out.push('+');
        for _ in 0..self.width {
            out.push_str("--+");
        }
        out.push('\n');
        for y in 0..self.height {
            out.push('|');
            for x in 0..self.width {
                out.push_str(match (x, y) {
                    (0, 0) => "S ",
                    _ if (x, y) == self.goal() => "G ",
                    _ => "  ",
                });
                out.push(if self.is_open(x, y, EAST) { ' ' } else { '|' });
            }
            out.push_str("\n+");
            for x in 0..self.width {
                out.push_str(if self.is_open(x, y, SOUTH) {
                    "  +"
                } else {
                    "--+"
                });
            }
            out.push('\n');
        }
        out
    }
}

pub const CLIFF_ROWS: usize = 4;
pub const CLIFF_COLS: usize = 12;
pub const CLIFF_START: u16 = 36;
pub const CLIFF_GOAL: u16 = 47;

const TAXI_MAP: [&str; 7] = [
    "+---------+",
    "|R: | : :G|",
    "| : | : : |",
    "| : : : : |",
    "| | : | : |",
    "|Y| : |B: |",
    "+---------+",
];
pub const TAXI_LOCS: [(usize, usize); 4] = [(0, 0), (0, 4), (4, 0), (4, 3)];

pub fn taxi_encode(row: usize, col: usize, pass: usize, dest: usize) -> u16 {
    (((row * 5 + col) * 5 + pass) * 4 + dest) as u16
}

pub fn taxi_decode(s: u16) -> (usize, usize, usize, usize) {
    let mut s = s as usize;
    let dest = s % 4;
    s /= 4;
    let pass = s % 5;
    s /= 5;
    (s / 5, s % 5, pass, dest)
}

fn taxi_open_east(row: usize, col: usize) -> bool {
    TAXI_MAP[row + 1].as_bytes()[2 * col + 2] == b':'
}

fn taxi_open_west(row: usize, col: usize) -> bool {
    TAXI_MAP[row + 1].as_bytes()[2 * col] == b':'
}

/// Bound environment instance. Stateless: episodes carry their own [`Obs`].
#[derive(Clone, Debug)]
pub struct Environment {
    spec: EnvSpec,
    maze: Option<MazeLayout>,
}

impl Environment {
    pub fn new(spec: EnvSpec) -> Result<Self> {
        let maze = match spec.kind {
            EnvKind::Maze { width, height } => {
                if width < 2 || height < 2 {
                    return Err(Error::Config(
                        "maze width and height must be at least 2".into(),
                    ));
                }
                if width > usize::from(u16::MAX) || height > usize::from(u16::MAX) {
                    return Err(Error::Config("maze is too large".into()));
                }
                Some(MazeLayout::generate(width, height, spec.seed))
            }
            _ => None,
        };
        Ok(Self { spec, maze })
    }

    pub fn spec(&self) -> EnvSpec {
        self.spec
    }

    pub fn maze(&self) -> Option<&MazeLayout> {
        self.maze.as_ref()
    }

    pub fn action_count(&self) -> usize {
        self.spec.action_count()
    }

    /// Whether different seeds give different start states of the same MDP.
    pub fn has_random_starts(&self) -> bool {
        matches!(self.spec.kind, EnvKind::Taxi)
    }

    /// Episode cap used when none is configured.
    pub fn default_max_steps(&self) -> usize {
        match self.spec.kind {
            EnvKind::Maze { width, height } => 100 * width * height,
            EnvKind::CliffWalking => 500,
            EnvKind::Taxi => 200,
        }
    }

    pub fn reset(&self) -> Obs {
        self.reset_with_seed(self.spec.seed)
    }

    /// Initial state for a given start seed. Only Taxi has a seed-dependent start.
    pub fn reset_with_seed(&self, seed: u64) -> Obs {
        match self.spec.kind {
            EnvKind::Maze { .. } => Obs::Maze { x: 0, y: 0 },
            EnvKind::CliffWalking => Obs::Cliff(CLIFF_START),
            EnvKind::Taxi => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let row = rng.gen_range(0..5);
                let col = rng.gen_range(0..5);
                let pass = rng.gen_range(0..4);
                let mut dest = rng.gen_range(0..3);
                if dest >= pass {
                    dest += 1;
                }
                Obs::Taxi(taxi_encode(row, col, pass, dest))
            }
        }
    }

    pub fn is_terminal(&self, obs: &Obs) -> bool {
        match (*obs, &self.maze) {
            (Obs::Maze { x, y }, Some(m)) => (x as usize, y as usize) == m.goal(),
            (Obs::Cliff(c), _) => c == CLIFF_GOAL,
            (Obs::Taxi(t), _) => {
                let (_, _, pass, dest) = taxi_decode(t);
                pass == dest
            }
            _ => false,
        }
    }

    /// Valid actions in a state; every in-scope environment allows all actions.
    pub fn valid_actions(&self, _obs: &Obs) -> Vec<ActionId> {
        (0..self.action_count() as u8).map(ActionId).collect()
    }

    pub fn step(&self, obs: &Obs, action: ActionId) -> Result<StepResult> {
        if action.index() >= self.action_count() {
            return Err(Error::InvalidAction {
                action,
                action_count: self.action_count(),
            });
        }
        if self.is_terminal(obs) {
            return Ok(StepResult {
                next_obs: *obs,
                reward: 0.0,
                done: true,
            });
        }
        let a = action.0;
        Ok(match (*obs, &self.maze) {
            (Obs::Maze { x, y }, Some(m)) => {
                let (nx, ny) = m.move_from(x as usize, y as usize, a);
                let done = (nx, ny) == m.goal();
                StepResult {
                    next_obs: Obs::Maze {
                        x: nx as u16,
                        y: ny as u16,
                    },
                    reward: if done { 1.0 } else { m.step_penalty() },
                    done,
                }
            }
            (Obs::Cliff(c), _) => {
                let (row, col) = ((c as usize) / CLIFF_COLS, (c as usize) % CLIFF_COLS);
                let (nr, nc) = match a {
                    0 => (row.saturating_sub(1), col),
                    1 => (row, (col + 1).min(CLIFF_COLS - 1)),
                    2 => ((row + 1).min(CLIFF_ROWS - 1), col),
                    _ => (row, col.saturating_sub(1)),
                };
                let cell = (nr * CLIFF_COLS + nc) as u16;
                if nr == CLIFF_ROWS - 1 && (1..CLIFF_COLS - 1).contains(&nc) {
                    StepResult {
                        next_obs: Obs::Cliff(CLIFF_START),
                        reward: -100.0,
                        done: false,
                    }
                } else {
                    StepResult {
                        next_obs: Obs::Cliff(cell),
                        reward: -1.0,
                        done: cell == CLIFF_GOAL,
                    }
                }
            }
            (Obs::Taxi(t), _) => {
                let (row, col, pass, dest) = taxi_decode(t);
                let (mut nr, mut nc, mut np) = (row, col, pass);
                let mut reward = -1.0;
                let mut done = false;
                match a {
                    0 => nr = (row + 1).min(4),
                    1 => nr = row.saturating_sub(1),
                    2 if taxi_open_east(row, col) => nc = (col + 1).min(4),
                    3 if taxi_open_west(row, col) => nc = col.saturating_sub(1),
                    2 | 3 => {}
                    4 => {
                        if pass < 4 && (row, col) == TAXI_LOCS[pass] {
                            np = 4;
                        } else {
                            reward = -10.0;
                        }
                    }
                    _ => {
                        if pass == 4 && (row, col) == TAXI_LOCS[dest] {
                            np = dest;
                            done = true;
                            reward = 20.0;
                        } else if let (4, Some(depot)) =
                            (pass, TAXI_LOCS.iter().position(|l| *l == (row, col)))
                        {
                            np = depot;
                        } else {
                            reward = -10.0;
                        }
                    }
                }
                StepResult {
                    next_obs: Obs::Taxi(taxi_encode(nr, nc, np, dest)),
                    reward,
                    done,
                }
            }
            _ => {
                return Err(Error::Config(format!(
                    "observation {obs:?} does not belong to {}",
                    self.spec.kind
                )))
            }
        })
    }

    pub fn feature_dim(&self) -> usize {
        match self.spec.kind {
            EnvKind::Maze { width, height } => width + height,
            EnvKind::CliffWalking => CLIFF_ROWS + CLIFF_COLS,
            EnvKind::Taxi => 5 + 5 + 5 + 4,
        }
    }

    /// One-hot encoding of each coordinate, concatenated.
    pub fn features(&self, obs: &Obs) -> Vec<f64> {
        let mut f = vec![0.0; self.feature_dim()];
        let mut set = |offsets: &[(usize, usize)]| {
            for (base, v) in offsets {
                f[base + v] = 1.0;
            }
        };
        match (*obs, self.spec.kind) {
            (Obs::Maze { x, y }, EnvKind::Maze { width, .. }) => {
                set(&[(0, x as usize), (width, y as usize)])
            }
            (Obs::Cliff(c), _) => set(&[
                (0, c as usize / CLIFF_COLS),
                (CLIFF_ROWS, c as usize % CLIFF_COLS),
            ]),
            (Obs::Taxi(t), _) => {
                let (row, col, pass, dest) = taxi_decode(t);
                set(&[(0, row), (5, col), (10, pass), (15, dest)]);
            }
            _ => {}
        }
        f
    }

    pub fn render_ascii(&self) -> String {
        match (&self.maze, self.spec.kind) {
            (Some(m), _) => m.to_ascii(),
            (None, EnvKind::CliffWalking) => {
                let mut out = String::new();
                for r in 0..CLIFF_ROWS {
                    for c in 0..CLIFF_COLS {
                        let cell = (r * CLIFF_COLS + c) as u16;
                        out.push(match cell {
                            CLIFF_START => 'S',
                            CLIFF_GOAL => 'G',
                            _ if r == CLIFF_ROWS - 1 => 'C',
                            _ => '.',
                        });
                    }
                    out.push('\n');
                }
                out
            }
            _ => TAXI_MAP.join("\n") + "\n",
        }
    }

    /// Every state reachable from `starts`, with all transitions out of
    /// non-terminal states.
    pub fn enumerate(&self, starts: &[Obs]) -> Result<Enumeration> {
        let mut seen: HashMap<Obs, StateId> = HashMap::new();
        let mut queue: VecDeque<Obs> = VecDeque::new();
        let mut transitions = Vec::new();
        for s in starts {
            if seen.insert(*s, s.state_id()).is_none() {
                queue.push_back(*s);
            }
        }
        while let Some(obs) = queue.pop_front() {
            if self.is_terminal(&obs) {
                continue;
            }
            for a in 0..self.action_count() as u8 {
                let r = self.step(&obs, ActionId(a))?;
                transitions.push((obs, ActionId(a), r));
                if seen.insert(r.next_obs, r.next_obs.state_id()).is_none() {
                    queue.push_back(r.next_obs);
                }
            }
        }
        let mut states: Vec<(Obs, StateId)> = seen.into_iter().collect();
        states.sort();
        Ok(Enumeration {
            states,
            transitions,
        })
    }

    /// States reachable from every start this environment can produce.
    pub fn all_starts(&self) -> Vec<Obs> {
        match self.spec.kind {
            EnvKind::Taxi => {
                let mut out = Vec::new();
                for row in 0..5 {
                    for col in 0..5 {
                        for pass in 0..4 {
                            for dest in (0..4).filter(|d| *d != pass) {
                                out.push(Obs::Taxi(taxi_encode(row, col, pass, dest)));
                            }
                        }
                    }
                }
                out
            }
            _ => vec![self.reset()],
        }
    }
}

#[derive(Clone, Debug)]
pub struct Enumeration {
    pub states: Vec<(Obs, StateId)>,
    pub transitions: Vec<(Obs, ActionId, StepResult)>,
}

impl Enumeration {
    pub fn to_graph(&self, gamma: f64) -> Result<EmpiricalGraph> {
        let mut g = EmpiricalGraph::new(gamma);
        for (_, id) in &self.states {
            g.add_node(*id);
        }
        for (obs, a, r) in &self.transitions {
            g.record_sample(&TransitionSample::new(
                obs.state_id(),
                *a,
                r.next_obs.state_id(),
                r.reward,
            ))?;
        }
        Ok(g)
    }
}

/// Optimal value of every state reachable from the environment's start
/// states, by value iteration over the fully enumerated MDP.
pub fn ground_truth_values(spec: &EnvSpec, gamma: f64) -> Result<BTreeMap<StateId, f64>> {
    let env = spec.build()?;
    let en = env.enumerate(&env.all_starts())?;
    let vi = en
        .to_graph(gamma)?
        .vanilla_value_iteration(1_000_000, 1e-12);
    Ok(vi.values)
}

/// Shortest number of steps from `start` to any terminal state, by BFS over
/// the environment dynamics. Cliff resets count as ordinary moves.
pub fn shortest_path_len(env: &Environment, start: Obs) -> Option<usize> {
    let mut dist: HashMap<Obs, usize> = HashMap::from([(start, 0)]);
    let mut queue = VecDeque::from([start]);
    while let Some(obs) = queue.pop_front() {
        let d = dist[&obs];
        if env.is_terminal(&obs) {
            return Some(d);
        }
        for a in 0..env.action_count() as u8 {
            let r = env.step(&obs, ActionId(a)).ok()?;
            if let std::collections::hash_map::Entry::Vacant(e) = dist.entry(r.next_obs) {
                e.insert(d + 1);
                queue.push_back(r.next_obs);
            }
        }
    }
    None
}
