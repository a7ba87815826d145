use std::fmt;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, LotError, Result};
use crate::seed::rng_from;

/// Up, right, down, left.
pub const ACTION_COUNT: usize = 4;

const MOVES: [(isize, isize); ACTION_COUNT] = [(-1, 0), (0, 1), (1, 0), (0, -1)];

/// `(row, column)`.
pub type Cell = (usize, usize);

/// A rectangular grid with one start, terminal goals (+1) and hazards (−1),
/// and walls that block movement.
#[derive(Clone, Debug, PartialEq)]
pub struct GridWorld {
    pub width: usize,
    pub height: usize,
    pub start: Cell,
    pub goals: Vec<Cell>,
    pub hazards: Vec<Cell>,
    pub walls: Vec<Cell>,
    pub step_reward: f64,
    pub goal_reward: f64,
    pub hazard_reward: f64,
    /// Probability that the chosen action is replaced by a uniform one.
    pub p_slip: f64,
    pub max_steps: usize,
}

/// The 8×8 layout used by the RL experiments. A wall splits the grid, so the
/// route to the goal passes a gap next to hazards where slips are costly.
pub const STANDARD_MAP: &str = "\
S..#....
...#.H..
.H.#....
...#.##.
.....#..
####.#.H
.....#..
.H.....G
";

impl GridWorld {
    /// An open grid with a single goal.
    pub fn open(width: usize, height: usize, start: Cell, goal: Cell, p_slip: f64, max_steps: usize) -> Result<Self> {
        let w = Self {
            width,
            height,
            start,
            goals: vec![goal],
            hazards: Vec::new(),
            walls: Vec::new(),
            step_reward: -0.01,
            goal_reward: 1.0,
            hazard_reward: -1.0,
            p_slip,
            max_steps,
        };
        w.validate()?;
        Ok(w)
    }

    /// Parses rows of `.`, `S`, `G`, `H` and `#`. Blank lines are ignored.
    pub fn parse_map(text: &str, p_slip: f64, max_steps: usize) -> Result<Self> {
        let rows: Vec<&str> = text.lines().map(str::trim_end).filter(|l| !l.is_empty()).collect();
        let Some(first) = rows.first() else {
            return config_err("empty map");
        };
        let width = first.chars().count();
        let mut start = None;
        let (mut goals, mut hazards, mut walls) = (Vec::new(), Vec::new(), Vec::new());
        for (r, line) in rows.iter().enumerate() {
            if line.chars().count() != width {
                return config_err(format!("map row {r} has {} cells, expected {width}", line.chars().count()));
            }
            for (c, ch) in line.chars().enumerate() {
                match ch {
                    '.' => {}
                    'S' if start.is_some() => return config_err("map has more than one start"),
                    'S' => start = Some((r, c)),
                    'G' => goals.push((r, c)),
                    'H' => hazards.push((r, c)),
                    '#' => walls.push((r, c)),
                    other => return config_err(format!("unknown map character {other:?} at row {r}, column {c}")),
                }
            }
        }
        let Some(start) = start else {
            return config_err("map has no start");
        };
        let w = Self {
            width,
            height: rows.len(),
            start,
            goals,
            hazards,
            walls,
            step_reward: -0.01,
            goal_reward: 1.0,
            hazard_reward: -1.0,
            p_slip,
            max_steps,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn load_map(path: &Path, p_slip: f64, max_steps: usize) -> Result<Self> {
        Self::parse_map(&std::fs::read_to_string(path)?, p_slip, max_steps)
    }

    /// [`STANDARD_MAP`] with the given slip probability and a 100-step limit.
    pub fn standard(p_slip: f64) -> Self {
        Self::parse_map(STANDARD_MAP, p_slip, 100).expect("the built-in map is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return config_err("grid dimensions must be positive");
        }
        if !(0.0..1.0).contains(&self.p_slip) {
            return config_err(format!("p_slip must lie in [0, 1), got {}", self.p_slip));
        }
        if self.max_steps == 0 {
            return config_err("max episode length must be positive");
        }
        if self.goals.is_empty() {
            return config_err("at least one goal is required");
        }
        if ![self.step_reward, self.goal_reward, self.hazard_reward].iter().all(|r| r.is_finite()) {
            return config_err("rewards must be finite");
        }
        let special = std::iter::once(&self.start).chain(&self.goals).chain(&self.hazards).chain(&self.walls);
        for &(r, c) in special {
            if r >= self.height || c >= self.width {
                return config_err(format!("cell ({r}, {c}) lies outside the {}x{} grid", self.height, self.width));
            }
        }
        if self.goals.contains(&self.start) {
            return config_err("start and goal coincide");
        }
        if self.hazards.contains(&self.start) || self.walls.contains(&self.start) {
            return config_err("start must be an empty cell");
        }
        Ok(())
    }

    pub fn cell_count(&self) -> usize {
        self.width * self.height
    }

    /// Length of the one-hot state encoding.
    pub fn feature_dim(&self) -> usize {
        self.cell_count()
    }

    pub fn index(&self, cell: Cell) -> usize {
        cell.0 * self.width + cell.1
    }

    pub fn cell(&self, index: usize) -> Cell {
        (index / self.width, index % self.width)
    }

    pub fn encode(&self, cell: Cell) -> Vec<f64> {
        let mut v = vec![0.0; self.feature_dim()];
        v[self.index(cell)] = 1.0;
        v
    }

    pub fn is_wall(&self, cell: Cell) -> bool {
        self.walls.contains(&cell)
    }

    pub fn is_terminal(&self, cell: Cell) -> bool {
        self.goals.contains(&cell) || self.hazards.contains(&cell)
    }

    /// The cell reached by moving from `cell`; walls and edges leave it unchanged.
    pub fn next_cell(&self, cell: Cell, action: usize) -> Cell {
        let (dr, dc) = MOVES[action];
        let (r, c) = (cell.0 as isize + dr, cell.1 as isize + dc);
        if r < 0 || c < 0 || r >= self.height as isize || c >= self.width as isize {
            return cell;
        }
        let next = (r as usize, c as usize);
        if self.is_wall(next) {
            cell
        } else {
            next
        }
    }

    /// Reward and termination for arriving in `cell`.
    pub fn arrival(&self, cell: Cell) -> (f64, bool) {
        if self.goals.contains(&cell) {
            (self.goal_reward, true)
        } else if self.hazards.contains(&cell) {
            (self.hazard_reward, true)
        } else {
            (self.step_reward, false)
        }
    }
}

impl fmt::Display for GridWorld {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in 0..self.height {
            for c in 0..self.width {
                let cell = (r, c);
                let ch = if cell == self.start {
                    'S'
                } else if self.goals.contains(&cell) {
                    'G'
                } else if self.hazards.contains(&cell) {
                    'H'
                } else if self.is_wall(cell) {
                    '#'
                } else {
                    '.'
                };
                write!(f, "{ch}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Who issued an environment step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Actor {
    Teacher,
    Student,
    Evaluator,
}

/// Per-actor `env_step` call counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepCounters {
    pub teacher: u64,
    pub student: u64,
    pub evaluator: u64,
}

impl StepCounters {
    pub fn get(&self, actor: Actor) -> u64 {
        match actor {
            Actor::Teacher => self.teacher,
            Actor::Student => self.student,
            Actor::Evaluator => self.evaluator,
        }
    }

    fn bump(&mut self, actor: Actor) {
        match actor {
            Actor::Teacher => self.teacher += 1,
            Actor::Student => self.student += 1,
            Actor::Evaluator => self.evaluator += 1,
        }
    }

    pub fn merge(&mut self, other: &StepCounters) {
        self.teacher += other.teacher;
        self.student += other.student;
        self.evaluator += other.evaluator;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    /// The chosen action was replaced by a random one.
    pub slipped: bool,
}

/// A running episode on a [`GridWorld`]. The slip RNG persists across
/// episodes unless [`env_reset`] reseeds it.
#[derive(Clone, Debug)]
pub struct Env {
    world: GridWorld,
    rng: ChaCha8Rng,
    pos: Cell,
    elapsed: usize,
    episode_return: f64,
    done: bool,
    counters: StepCounters,
}

impl Env {
    pub fn new(world: GridWorld, seed: u64) -> Result<Self> {
        world.validate()?;
        let pos = world.start;
        Ok(Self {
            world,
            rng: rng_from(seed),
            pos,
            elapsed: 0,
            episode_return: 0.0,
            done: false,
            counters: StepCounters::default(),
        })
    }

    pub fn world(&self) -> &GridWorld {
        &self.world
    }

    pub fn position(&self) -> Cell {
        self.pos
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Undiscounted reward of the current episode so far.
    pub fn episode_return(&self) -> f64 {
        self.episode_return
    }

    /// Steps taken in the current episode.
    pub fn elapsed(&self) -> usize {
        self.elapsed
    }

    pub fn counters(&self) -> StepCounters {
        self.counters
    }

    pub fn state(&self) -> Vec<f64> {
        self.world.encode(self.pos)
    }

    /// Starts a new episode without reseeding.
    pub fn restart(&mut self) -> Vec<f64> {
        self.pos = self.world.start;
        self.elapsed = 0;
        self.episode_return = 0.0;
        self.done = false;
        self.state()
    }
}

/// Reseeds the dynamics and places the agent on the start cell.
pub fn env_reset(env: &mut Env, seed: u64) -> Vec<f64> {
    env.rng = rng_from(seed);
    env.restart()
}

/// One transition. Episodes end on goals, hazards or the step limit.
pub fn env_step(env: &mut Env, actor: Actor, action: usize) -> Result<StepOutcome> {
    if env.done {
        return Err(LotError::Env("step after the episode ended".into()));
    }
    if action >= ACTION_COUNT {
        return Err(LotError::Env(format!("action {action} out of range")));
    }
    env.counters.bump(actor);
    let slipped = env.world.p_slip > 0.0 && env.rng.random_bool(env.world.p_slip);
    let taken = if slipped {
        env.rng.random_range(0..ACTION_COUNT)
    } else {
        action
    };
    env.pos = env.world.next_cell(env.pos, taken);
    env.elapsed += 1;
    let (reward, terminal) = env.world.arrival(env.pos);
    env.episode_return += reward;
    env.done = terminal || env.elapsed >= env.world.max_steps;
    Ok(StepOutcome {
        state: env.state(),
        reward,
        done: env.done,
        slipped,
    })
}
