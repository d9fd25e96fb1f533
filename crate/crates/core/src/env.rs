//! Discrete grid environments whose transition graphs are DAGs rooted at the
//! top-left cell.
//!
//! Three kinds are supported:
//!
//! * `GridWorld`: every cell can be terminated through an explicit `Stop`
//!   action, which moves into a terminal-marked copy of the cell. Rewards
//!   follow a hypergrid-style tiering with the high-reward modes in the four
//!   corners.
//! * `FrozenLake`: holes and goals end the episode, and so does the single
//!   cell with no remaining moves. Goals pay 1, everything else 0.1.
//! * `CliffWalking`: a cliff along the bottom row ends the episode with 0.01,
//!   the goal pays 1, exhaustion pays 0.1.
//!
//! Agents only move down (`+row`) or right (`+col`), so coordinates are
//! monotone along any trajectory and the reachable graph is acyclic.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GRID_WORLD_R0_MAX: f64 = 0.1;
pub const FROZEN_GOAL_REWARD: f64 = 1.0;
pub const FROZEN_OTHER_REWARD: f64 = 0.1;
pub const CLIFF_REWARD: f64 = 0.01;
pub const CLIFF_GOAL_REWARD: f64 = 1.0;
pub const CLIFF_OTHER_REWARD: f64 = 0.1;

/// Attempts made by [`generate_frozen_lake`] before giving up.
pub const MAX_LAYOUT_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    GridWorld,
    FrozenLake,
    CliffWalking,
}

impl EnvKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EnvKind::GridWorld => "grid_world",
            EnvKind::FrozenLake => "frozen_lake",
            EnvKind::CliffWalking => "cliff_walking",
        }
    }

    /// Number of action slots of the flow network head.
    pub fn action_count(&self) -> usize {
        match self {
            EnvKind::GridWorld => 3,
            _ => 2,
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grid_world" => Ok(EnvKind::GridWorld),
            "frozen_lake" => Ok(EnvKind::FrozenLake),
            "cliff_walking" => Ok(EnvKind::CliffWalking),
            other => Err(Error::Param(format!("unknown environment `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    Down,
    Right,
    Stop,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::Down, Action::Right, Action::Stop];

    pub fn index(&self) -> usize {
        match self {
            Action::Down => 0,
            Action::Right => 1,
            Action::Stop => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Action::ALL.get(i).copied()
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Action::Down => "down",
            Action::Right => "right",
            Action::Stop => "stop",
        }
    }
}

impl FromStr for Action {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "down" => Ok(Action::Down),
            "right" => Ok(Action::Right),
            "stop" => Ok(Action::Stop),
            other => Err(Error::Format(format!("unknown action `{other}`"))),
        }
    }
}

/// A grid position. `done` marks the terminal copy produced by `Stop` in
/// GridWorld and is always false elsewhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct State {
    pub row: usize,
    pub col: usize,
    pub done: bool,
}

impl State {
    pub const ROOT: State = State { row: 0, col: 0, done: false };

    pub fn new(row: usize, col: usize) -> Self {
        State { row, col, done: false }
    }

    pub fn terminal(row: usize, col: usize) -> Self {
        State { row, col, done: true }
    }

    pub fn is_root(&self) -> bool {
        *self == State::ROOT
    }
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.done {
            write!(f, "({},{})*", self.row, self.col)
        } else {
            write!(f, "({},{})", self.row, self.col)
        }
    }
}

/// Per-kind parameters varied across tasks.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskParams {
    GridWorld { r0: f64 },
    /// `goals` defaults to [`default_frozen_goals`] for the grid size.
    FrozenLake { holes: Vec<(usize, usize)>, goals: Vec<(usize, usize)> },
    CliffWalking { cliff_length: usize },
}

impl TaskParams {
    pub fn kind(&self) -> EnvKind {
        match self {
            TaskParams::GridWorld { .. } => EnvKind::GridWorld,
            TaskParams::FrozenLake { .. } => EnvKind::FrozenLake,
            TaskParams::CliffWalking { .. } => EnvKind::CliffWalking,
        }
    }
}

/// Serializable description of one environment instance.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub kind: EnvKind,
    pub rows: usize,
    pub cols: usize,
    pub params: TaskParams,
    pub seed: u64,
}

/// Goal cells of a FrozenLake board: top-right, bottom-middle and bottom-right
/// (`[0,7]`, `[7,4]`, `[7,7]` on the 8x8 board).
pub fn default_frozen_goals(rows: usize, cols: usize) -> Vec<(usize, usize)> {
    let mut goals = vec![(0, cols - 1), (rows - 1, cols / 2), (rows - 1, cols - 1)];
    let mut seen = BTreeSet::new();
    goals.retain(|g| *g != (0, 0) && seen.insert(*g));
    goals
}

/// Goal column of a CliffWalking board with a cliff of length `cliff_length`.
pub fn cliff_goal_col(cols: usize, cliff_length: usize) -> usize {
    (cliff_length + 1).min(cols - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Cell {
    Open,
    Hole,
    Goal,
    Cliff,
}

/// A validated task with its reachable state graph precomputed.
///
/// Immutable after construction.
#[derive(Debug, Clone)]
pub struct Task {
    spec: TaskSpec,
    cells: Vec<Cell>,
    reachable: Vec<bool>,
    order: Vec<State>,
    modes: Vec<State>,
}

/// Build a task from explicit parameters, validating ranges and reachability.
pub fn make_task(kind: EnvKind, rows: usize, cols: usize, params: TaskParams, seed: u64) -> Result<Task> {
    if params.kind() != kind {
        return Err(Error::Param(format!(
            "parameters for {} given to a {} task",
            params.kind(),
            kind
        )));
    }
    Task::new(TaskSpec { kind, rows, cols, params, seed })
}

/// Draw a FrozenLake board with `n_holes` holes uniformly placed outside the
/// start and goal cells, redrawing until every cell is reachable from the start.
pub fn generate_frozen_lake(rows: usize, cols: usize, n_holes: usize, seed: u64) -> Result<Task> {
    if rows == 0 || cols == 0 || rows * cols < 2 {
        return Err(Error::Param(format!("board {rows}x{cols} is too small")));
    }
    let goals = default_frozen_goals(rows, cols);
    let free: Vec<(usize, usize)> = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .filter(|p| *p != (0, 0) && !goals.contains(p))
        .collect();
    if n_holes > free.len() {
        return Err(Error::Param(format!(
            "{n_holes} holes do not fit on a {rows}x{cols} board"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_LAYOUT_ATTEMPTS {
        let mut pool = free.clone();
        let mut holes = Vec::with_capacity(n_holes);
        for _ in 0..n_holes {
            let k = rng.gen_range(0..pool.len());
            holes.push(pool.swap_remove(k));
        }
        holes.sort_unstable();
        let spec = TaskSpec {
            kind: EnvKind::FrozenLake,
            rows,
            cols,
            params: TaskParams::FrozenLake { holes, goals: goals.clone() },
            seed,
        };
        match Task::new(spec) {
            Ok(task) => return Ok(task),
            Err(Error::Generation(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Generation(format!(
        "no valid {rows}x{cols} layout with {n_holes} holes after {MAX_LAYOUT_ATTEMPTS} attempts"
    )))
}

impl Task {
    pub fn new(spec: TaskSpec) -> Result<Task> {
        let TaskSpec { kind, rows, cols, .. } = spec;
        if rows == 0 || cols == 0 {
            return Err(Error::Param(format!("grid {rows}x{cols} is empty")));
        }
        if spec.seed > i64::MAX as u64 {
            return Err(Error::Param(format!("task seed {} exceeds {}", spec.seed, i64::MAX)));
        }
        let mut cells = vec![Cell::Open; rows * cols];
        let idx = |r: usize, c: usize| r * cols + c;
        match &spec.params {
            TaskParams::GridWorld { r0 } => {
                if !(0.0..GRID_WORLD_R0_MAX).contains(r0) {
                    return Err(Error::Param(format!("r0 = {r0} outside [0, {GRID_WORLD_R0_MAX})")));
                }
            }
            TaskParams::FrozenLake { holes, goals } => {
                if rows * cols < 2 {
                    return Err(Error::Param("frozen lake needs at least two cells".into()));
                }
                if goals.is_empty() {
                    return Err(Error::Param("frozen lake needs at least one goal".into()));
                }
                for &(r, c) in goals {
                    if r >= rows || c >= cols || (r, c) == (0, 0) {
                        return Err(Error::Param(format!("goal ({r},{c}) is invalid")));
                    }
                    cells[idx(r, c)] = Cell::Goal;
                }
                for &(r, c) in holes {
                    if r >= rows || c >= cols {
                        return Err(Error::Param(format!("hole ({r},{c}) is out of bounds")));
                    }
                    if (r, c) == (0, 0) {
                        return Err(Error::Param("hole on the start cell".into()));
                    }
                    match cells[idx(r, c)] {
                        Cell::Goal => {
                            return Err(Error::Param(format!("hole ({r},{c}) is on a goal")))
                        }
                        Cell::Hole => {
                            return Err(Error::Param(format!("duplicate hole ({r},{c})")))
                        }
                        _ => cells[idx(r, c)] = Cell::Hole,
                    }
                }
            }
            TaskParams::CliffWalking { cliff_length } => {
                if rows < 2 || cols < 3 {
                    return Err(Error::Param(format!("cliff walking needs at least 2x3, got {rows}x{cols}")));
                }
                if *cliff_length < 1 || *cliff_length + 2 > cols {
                    return Err(Error::Param(format!(
                        "cliff length {cliff_length} outside [1, {}]",
                        cols - 2
                    )));
                }
                let bottom = rows - 1;
                for c in 1..=*cliff_length {
                    cells[idx(bottom, c)] = Cell::Cliff;
                }
                cells[idx(bottom, cliff_goal_col(cols, *cliff_length))] = Cell::Goal;
            }
        }
        let mut task = Task { spec, cells, reachable: Vec::new(), order: Vec::new(), modes: Vec::new() };
        task.reachable = vec![false; rows * cols * 2];
        if kind != EnvKind::GridWorld && task.is_terminal(&State::ROOT) {
            return Err(Error::Param("start cell has no moves".into()));
        }
        task.explore();
        task.check_validity()?;
        task.modes = task.compute_modes();
        Ok(task)
    }

    fn explore(&mut self) {
        let mut queue = VecDeque::from([State::ROOT]);
        let root_id = self.state_id(&State::ROOT);
        self.reachable[root_id] = true;
        let mut order = vec![State::ROOT];
        while let Some(s) = queue.pop_front() {
            if self.is_terminal(&s) {
                continue;
            }
            for a in self.raw_actions(&s) {
                let next = self.raw_transition(&s, a);
                let id = self.state_id(&next);
                if !self.reachable[id] {
                    self.reachable[id] = true;
                    order.push(next);
                    queue.push_back(next);
                }
            }
        }
        // Moves increase row+col and Stop only sets the terminal flag, so this
        // key is a topological order of the DAG.
        order.sort_by_key(|s| ((s.row + s.col) * 2 + s.done as usize, s.row, s.col));
        self.order = order;
    }

    fn check_validity(&self) -> Result<()> {
        if let TaskParams::FrozenLake { goals, .. } = &self.spec.params {
            for &(r, c) in goals {
                if !self.is_reachable(&State::new(r, c)) {
                    return Err(Error::Generation(format!("goal ({r},{c}) is cut off from the start")));
                }
            }
            for r in 0..self.spec.rows {
                for c in 0..self.spec.cols {
                    if !self.is_reachable(&State::new(r, c)) {
                        return Err(Error::Generation(format!("cell ({r},{c}) has no valid parent")));
                    }
                }
            }
        }
        Ok(())
    }

    fn compute_modes(&self) -> Vec<State> {
        let (rows, cols) = (self.spec.rows, self.spec.cols);
        match &self.spec.params {
            TaskParams::GridWorld { .. } => {
                let mut m = Vec::new();
                for r in [0, rows - 1] {
                    for c in [0, cols - 1] {
                        let s = State::terminal(r, c);
                        if !m.contains(&s) {
                            m.push(s);
                        }
                    }
                }
                m.sort();
                m
            }
            TaskParams::FrozenLake { goals, .. } => {
                let mut m: Vec<State> = goals.iter().map(|&(r, c)| State::new(r, c)).collect();
                m.sort();
                m
            }
            TaskParams::CliffWalking { cliff_length } => {
                vec![State::new(rows - 1, cliff_goal_col(cols, *cliff_length))]
            }
        }
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn kind(&self) -> EnvKind {
        self.spec.kind
    }

    pub fn rows(&self) -> usize {
        self.spec.rows
    }

    pub fn cols(&self) -> usize {
        self.spec.cols
    }

    pub fn action_count(&self) -> usize {
        self.spec.kind.action_count()
    }

    /// Dense index of a state, `((row * cols) + col) * 2 + done`.
    pub fn state_id(&self, s: &State) -> usize {
        (s.row * self.spec.cols + s.col) * 2 + s.done as usize
    }

    pub fn state_count(&self) -> usize {
        self.spec.rows * self.spec.cols * 2
    }

    pub fn in_bounds(&self, s: &State) -> bool {
        s.row < self.spec.rows && s.col < self.spec.cols && (!s.done || self.spec.kind == EnvKind::GridWorld)
    }

    pub fn is_reachable(&self, s: &State) -> bool {
        self.in_bounds(s) && self.reachable[self.state_id(s)]
    }

    /// Reachable states in topological order, root first.
    pub fn states(&self) -> &[State] {
        &self.order
    }

    /// Top-reward-tier terminal states.
    pub fn modes(&self) -> &[State] {
        &self.modes
    }

    fn cell(&self, s: &State) -> Cell {
        self.cells[s.row * self.spec.cols + s.col]
    }

    fn raw_actions(&self, s: &State) -> Vec<Action> {
        let mut acts = Vec::with_capacity(3);
        if s.row + 1 < self.spec.rows {
            acts.push(Action::Down);
        }
        if s.col + 1 < self.spec.cols {
            acts.push(Action::Right);
        }
        if self.spec.kind == EnvKind::GridWorld {
            acts.push(Action::Stop);
        }
        acts
    }

    fn raw_transition(&self, s: &State, a: Action) -> State {
        match a {
            Action::Down => State::new(s.row + 1, s.col),
            Action::Right => State::new(s.row, s.col + 1),
            Action::Stop => State::terminal(s.row, s.col),
        }
    }

    pub fn is_terminal(&self, s: &State) -> bool {
        match self.spec.kind {
            EnvKind::GridWorld => s.done,
            _ => match self.cell(s) {
                Cell::Hole | Cell::Goal | Cell::Cliff => true,
                Cell::Open => s.row + 1 == self.spec.rows && s.col + 1 == self.spec.cols,
            },
        }
    }

    fn check_state(&self, s: &State) -> Result<()> {
        if self.in_bounds(s) {
            Ok(())
        } else {
            Err(Error::contract(format!(
                "state {s} is outside the {}x{} {} grid",
                self.spec.rows, self.spec.cols, self.spec.kind
            )))
        }
    }

    /// Actions available in a non-terminal state, in `Down, Right, Stop` order.
    pub fn valid_actions(&self, s: &State) -> Result<Vec<Action>> {
        self.check_state(s)?;
        if self.is_terminal(s) {
            return Err(Error::contract(format!("valid_actions on terminal state {s}")));
        }
        Ok(self.raw_actions(s))
    }

    pub fn transition(&self, s: &State, a: Action) -> Result<State> {
        let acts = self.valid_actions(s)?;
        if !acts.contains(&a) {
            return Err(Error::contract(format!("action {} is not valid in {s}", a.as_str())));
        }
        Ok(self.raw_transition(s, a))
    }

    /// Reachable in-edges `(parent, action)` of `s`. Empty for the root.
    pub fn parents(&self, s: &State) -> Result<Vec<(State, Action)>> {
        self.check_state(s)?;
        let mut out = Vec::with_capacity(2);
        if s.done {
            let p = State::new(s.row, s.col);
            if self.is_reachable(&p) {
                out.push((p, Action::Stop));
            }
            return Ok(out);
        }
        if s.row > 0 {
            let p = State::new(s.row - 1, s.col);
            if self.is_reachable(&p) && !self.is_terminal(&p) {
                out.push((p, Action::Down));
            }
        }
        if s.col > 0 {
            let p = State::new(s.row, s.col - 1);
            if self.is_reachable(&p) && !self.is_terminal(&p) {
                out.push((p, Action::Right));
            }
        }
        Ok(out)
    }

    /// Children `(action, next)` of a reachable non-terminal state.
    pub fn children(&self, s: &State) -> Result<Vec<(Action, State)>> {
        Ok(self
            .valid_actions(s)?
            .into_iter()
            .map(|a| (a, self.raw_transition(s, a)))
            .collect())
    }

    pub fn reward(&self, s: &State) -> Result<f64> {
        self.check_state(s)?;
        if !self.is_terminal(s) {
            return Err(Error::contract(format!("reward requested for non-terminal state {s}")));
        }
        Ok(self.terminal_reward(s))
    }

    fn terminal_reward(&self, s: &State) -> f64 {
        match &self.spec.params {
            TaskParams::GridWorld { r0 } => grid_world_reward(*r0, self.spec.rows, self.spec.cols, s.row, s.col),
            TaskParams::FrozenLake { .. } => match self.cell(s) {
                Cell::Goal => FROZEN_GOAL_REWARD,
                _ => FROZEN_OTHER_REWARD,
            },
            TaskParams::CliffWalking { .. } => match self.cell(s) {
                Cell::Goal => CLIFF_GOAL_REWARD,
                Cell::Cliff => CLIFF_REWARD,
                _ => CLIFF_OTHER_REWARD,
            },
        }
    }

    /// Reward of a visited non-initial state in the flow-consistency residual:
    /// the terminal reward for leaves, zero for interior nodes.
    pub fn node_reward(&self, s: &State) -> f64 {
        if self.is_terminal(s) {
            self.terminal_reward(s)
        } else {
            0.0
        }
    }

    /// All reachable terminal states with their rewards, in topological order.
    pub fn enumerate_terminals(&self) -> Vec<(State, f64)> {
        self.order
            .iter()
            .filter(|s| self.is_terminal(s))
            .map(|s| (*s, self.terminal_reward(s)))
            .collect()
    }

    /// Largest terminal reward.
    pub fn max_reward(&self) -> f64 {
        self.enumerate_terminals().iter().map(|(_, r)| *r).fold(0.0, f64::max)
    }

    pub fn holes(&self) -> Vec<(usize, usize)> {
        match &self.spec.params {
            TaskParams::FrozenLake { holes, .. } => holes.clone(),
            _ => Vec::new(),
        }
    }
}

/// Hypergrid reward with the `2.0` bonus on the four corners:
/// `r0 + 0.5 * [all |x/(H-1) - 0.5| > 0.25] + 2.0 * [all x in {0, H-1}]`.
pub fn grid_world_reward(r0: f64, rows: usize, cols: usize, row: usize, col: usize) -> f64 {
    let band = |x: usize, h: usize| -> bool {
        if h <= 1 {
            return true;
        }
        let u = x as f64 / (h - 1) as f64;
        (u - 0.5).abs() > 0.25
    };
    let corner = |x: usize, h: usize| x == 0 || x + 1 == h;
    let mut r = r0;
    if band(row, rows) && band(col, cols) {
        r += 0.5;
    }
    if corner(row, rows) && corner(col, cols) {
        r += 2.0;
    }
    r
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct TaskRecord {
    env: EnvKind,
    grid_rows: usize,
    grid_cols: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    r0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    holes: Option<Vec<[usize; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    goals: Option<Vec<[usize; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cliff_length: Option<usize>,
    seed: u64,
}

impl TaskSpec {
    /// Serialize as a flat TOML document.
    pub fn to_toml(&self) -> String {
        let mut rec = TaskRecord {
            env: self.kind,
            grid_rows: self.rows,
            grid_cols: self.cols,
            r0: None,
            holes: None,
            goals: None,
            cliff_length: None,
            seed: self.seed,
        };
        match &self.params {
            TaskParams::GridWorld { r0 } => rec.r0 = Some(*r0),
            TaskParams::FrozenLake { holes, goals } => {
                rec.holes = Some(holes.iter().map(|&(r, c)| [r, c]).collect());
                if *goals != default_frozen_goals(self.rows, self.cols) {
                    rec.goals = Some(goals.iter().map(|&(r, c)| [r, c]).collect());
                }
            }
            TaskParams::CliffWalking { cliff_length } => rec.cliff_length = Some(*cliff_length),
        }
        toml::to_string(&rec).expect("task record is always serializable")
    }

    pub fn from_toml(text: &str) -> Result<TaskSpec> {
        let rec: TaskRecord = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        let missing = |k: &str| Error::Format(format!("missing key `{k}` for {}", rec.env));
        let params = match rec.env {
            EnvKind::GridWorld => TaskParams::GridWorld { r0: rec.r0.ok_or_else(|| missing("r0"))? },
            EnvKind::FrozenLake => {
                if rec.grid_rows == 0 || rec.grid_cols == 0 {
                    return Err(Error::Format("empty grid".into()));
                }
                let holes = rec.holes.clone().unwrap_or_default();
                TaskParams::FrozenLake {
                    holes: holes.iter().map(|p| (p[0], p[1])).collect(),
                    goals: match &rec.goals {
                        Some(g) => g.iter().map(|p| (p[0], p[1])).collect(),
                        None => default_frozen_goals(rec.grid_rows, rec.grid_cols),
                    },
                }
            }
            EnvKind::CliffWalking => TaskParams::CliffWalking {
                cliff_length: rec.cliff_length.ok_or_else(|| missing("cliff_length"))?,
            },
        };
        Ok(TaskSpec { kind: rec.env, rows: rec.grid_rows, cols: rec.grid_cols, params, seed: rec.seed })
    }
}
