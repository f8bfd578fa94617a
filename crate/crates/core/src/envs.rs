//! Walled 2-D goal-reaching task with optional goal relocation, flickering
//! observations and test-time observation noise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::RngStream;

pub const OBS_DIM: usize = 5;
pub const ACTION_DIM: usize = 2;

/// The eight fixed test starts for a 20x20 field.
pub const TEST_STARTS: [[f64; 2]; 8] = [
    [2.0, 2.0],
    [2.0, 10.0],
    [2.0, 18.0],
    [10.0, 2.0],
    [10.0, 18.0],
    [18.0, 2.0],
    [18.0, 10.0],
    [18.0, 18.0],
];

pub const TRAIN_STARTS: [[f64; 2]; 4] = [[2.0, 2.0], [2.0, 18.0], [18.0, 2.0], [18.0, 18.0]];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GoalEnvConfig {
    pub field_size: f64,
    pub goal: [f64; 2],
    pub goal_radius: f64,
    /// Goal used once the global step counter passes `change_step`.
    pub changed_goal: [f64; 2],
    /// 0 disables the goal change.
    pub change_step: u64,
    pub max_steps: u32,
    pub train_starts: Vec<[f64; 2]>,
    pub start_noise_std: f64,
    pub test_starts: Vec<[f64; 2]>,
    /// Offset applied to every test start for the second half of the battery.
    pub test_shift: f64,
    /// Probability that an observation is delivered (1 = fully observable).
    pub observe_prob: f64,
    /// Standard deviation of observation noise during test batteries.
    pub test_obs_noise_std: f64,
}

impl Default for GoalEnvConfig {
    fn default() -> Self {
        Self {
            field_size: 20.0,
            goal: [15.0, 10.0],
            goal_radius: 2.0,
            changed_goal: [5.0, 10.0],
            change_step: 0,
            max_steps: 200,
            train_starts: TRAIN_STARTS.to_vec(),
            start_noise_std: 1.0,
            test_starts: TEST_STARTS.to_vec(),
            test_shift: 0.002,
            observe_prob: 1.0,
            test_obs_noise_std: 0.0,
        }
    }
}

impl GoalEnvConfig {
    /// Field of side `size` with every position of the default layout
    /// scaled by `size / 20`.
    pub fn scaled(size: f64) -> Self {
        let k = size / 20.0;
        let sc = |p: [f64; 2]| [p[0] * k, p[1] * k];
        let d = Self::default();
        Self {
            field_size: size,
            goal: sc(d.goal),
            changed_goal: sc(d.changed_goal),
            train_starts: d.train_starts.iter().copied().map(sc).collect(),
            test_starts: d.test_starts.iter().copied().map(sc).collect(),
            ..d
        }
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.field_size;
        if !(f > 0.0) {
            return Err(Error::Config("field_size must be > 0".into()));
        }
        for g in [self.goal, self.changed_goal] {
            let inside = g.iter().all(|&c| c - self.goal_radius >= 0.0 && c + self.goal_radius <= f);
            if !inside {
                return Err(Error::Config(format!("goal circle at {g:?} leaves the field")));
            }
        }
        if !(0.0..=1.0).contains(&self.observe_prob) {
            return Err(Error::Config("observe_prob must lie in [0, 1]".into()));
        }
        if self.train_starts.is_empty() || self.test_starts.is_empty() {
            return Err(Error::Config("start lists must be nonempty".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be >= 1".into()));
        }
        if !(self.start_noise_std >= 0.0 && self.test_obs_noise_std >= 0.0) {
            return Err(Error::Config("noise levels must be >= 0".into()));
        }
        Ok(())
    }

    pub fn diagonal(&self) -> f64 {
        self.field_size * std::f64::consts::SQRT_2
    }

    /// Goal active during global step `step` (1-based).
    pub fn goal_at(&self, step: u64) -> [f64; 2] {
        if self.change_step > 0 && step > self.change_step {
            self.changed_goal
        } else {
            self.goal
        }
    }

    /// All battery starts: base list then the shifted copies.
    pub fn battery_starts(&self) -> Vec<[f64; 2]> {
        let s = self.test_shift;
        self.test_starts
            .iter()
            .copied()
            .chain(self.test_starts.iter().map(|p| [p[0] + s, p[1] + s]))
            .collect()
    }

    fn clamp(&self, v: f64) -> f64 {
        v.clamp(0.0, self.field_size)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub pos: [f64; 2],
    pub episode_step: u32,
    pub goal: [f64; 2],
}

impl EnvState {
    pub fn goal_distance(&self) -> f64 {
        (self.pos[0] - self.goal[0]).hypot(self.pos[1] - self.goal[1])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TerminalKind {
    Goal,
    Timeout,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub terminal: Option<TerminalKind>,
    pub collided: bool,
}

pub const GOAL_REWARD: f64 = 1.0;
pub const WALL_REWARD: f64 = -0.01;

/// Where a new episode starts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Start {
    /// A random training corner plus clamped Gaussian start noise.
    Random,
    /// Training corner `i` plus clamped Gaussian start noise.
    Corner(usize),
    /// An exact position, no noise.
    Fixed([f64; 2]),
}

pub fn reset(cfg: &GoalEnvConfig, goal: [f64; 2], start: Start, rng: &mut RngStream) -> EnvState {
    let pos = match start {
        Start::Fixed(p) => [cfg.clamp(p[0]), cfg.clamp(p[1])],
        Start::Random | Start::Corner(_) => {
            let i = match start {
                Start::Corner(i) => i % cfg.train_starts.len(),
                _ => rng.index(cfg.train_starts.len()),
            };
            let c = cfg.train_starts[i];
            let s = cfg.start_noise_std;
            let nx = rng.normal(s);
            let ny = rng.normal(s);
            [cfg.clamp(c[0] + nx), cfg.clamp(c[1] + ny)]
        }
    };
    EnvState { pos, episode_step: 0, goal }
}

/// Noise-free, fully visible observation of a state.
pub fn observation_of(cfg: &GoalEnvConfig, st: &EnvState) -> [f64; OBS_DIM] {
    let f = cfg.field_size;
    let (x, y) = (st.pos[0] / f, st.pos[1] / f);
    [x, 1.0 - x, y, 1.0 - y, 1.0 - st.goal_distance() / (2.0 * cfg.diagonal())]
}

/// Observation as delivered to the agent: masked to zero with probability
/// `1 - observe_prob` (never on the first step of an episode) and perturbed
/// by observation noise during tests.
pub fn observe(cfg: &GoalEnvConfig, st: &EnvState, rng: &mut RngStream, phase: Phase) -> [f64; OBS_DIM] {
    if cfg.observe_prob < 1.0 && st.episode_step > 0 && !rng.bernoulli(cfg.observe_prob) {
        return [0.0; OBS_DIM];
    }
    let mut u = observation_of(cfg, st);
    if phase == Phase::Test && cfg.test_obs_noise_std > 0.0 {
        for v in u.iter_mut() {
            *v += rng.normal(cfg.test_obs_noise_std);
        }
    }
    u
}

pub fn step(cfg: &GoalEnvConfig, st: &mut EnvState, action: &[f64]) -> Result<StepOutcome> {
    if action.len() != ACTION_DIM || action.iter().any(|a| !(a.abs() <= 1.0)) {
        return Err(Error::Dimension(format!("action {action:?} outside [-1, 1]^2")));
    }
    let mut collided = false;
    for (p, &a) in st.pos.iter_mut().zip(action) {
        let moved = *p + a;
        let clamped = cfg.clamp(moved);
        collided |= clamped != moved;
        *p = clamped;
    }
    st.episode_step += 1;
    if st.goal_distance() < cfg.goal_radius {
        return Ok(StepOutcome { reward: GOAL_REWARD, terminal: Some(TerminalKind::Goal), collided });
    }
    let reward = if collided { WALL_REWARD } else { 0.0 };
    let terminal = (st.episode_step >= cfg.max_steps).then_some(TerminalKind::Timeout);
    Ok(StepOutcome { reward, terminal, collided })
}

/// One row of a trajectory dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub episode: String,
    pub step: u32,
    pub x: f64,
    pub y: f64,
    pub a_x: f64,
    pub a_y: f64,
    pub r: f64,
}
