//! Small deterministic continuous-control tasks and episode rollouts.
//!
//! Environments are stateless: the caller owns the observation and the step
//! counter, so any number of rollout workers can share one instance.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("unknown environment `{0}`")]
    UnknownEnv(String),
    #[error("action has {got} dimensions, environment expects {expected}")]
    ActionDim { expected: usize, got: usize },
    #[error("state has {got} dimensions, environment expects {expected}")]
    StateDim { expected: usize, got: usize },
    #[error("non-finite action component {index}")]
    NonFiniteAction { index: usize },
    #[error("invalid environment spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResetMode {
    /// Always start from the same initial state; the seed is ignored.
    Fixed,
    /// Draw the initial state from a seeded distribution.
    SeededRandom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub max_episode_steps: usize,
    pub reset_mode: ResetMode,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.state_dim == 0 || self.action_dim == 0 {
            return Err(EnvError::InvalidSpec("dimensions must be at least 1".into()));
        }
        if self.max_episode_steps == 0 {
            return Err(EnvError::InvalidSpec("max_episode_steps must be at least 1".into()));
        }
        if self.action_low.len() != self.action_dim || self.action_high.len() != self.action_dim {
            return Err(EnvError::InvalidSpec("action bounds must match action_dim".into()));
        }
        for (lo, hi) in self.action_low.iter().zip(&self.action_high) {
            if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                return Err(EnvError::InvalidSpec(format!("bad action bound [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    /// Clips `action` into the bounds in place; returns whether anything moved.
    pub fn clip_action(&self, action: &mut [f64]) -> bool {
        let mut clipped = false;
        for ((a, lo), hi) in action.iter_mut().zip(&self.action_low).zip(&self.action_high) {
            let c = a.clamp(*lo, *hi);
            if c != *a {
                clipped = true;
                *a = c;
            }
        }
        clipped
    }

    /// Maps a squashed output in `[-1, 1]` onto the action box.
    pub fn scale_action(&self, unit: &[f64]) -> Vec<f64> {
        unit.iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(u, (lo, hi))| lo + (u + 1.0) * 0.5 * (hi - lo))
            .collect()
    }

    /// Half-width of each action dimension; the derivative of [`EnvSpec::scale_action`].
    pub fn action_half_range(&self) -> Vec<f64> {
        self.action_low
            .iter()
            .zip(&self.action_high)
            .map(|(lo, hi)| 0.5 * (hi - lo))
            .collect()
    }
}

/// Which worker produced a transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Target,
    Population(usize),
}

impl Origin {
    pub fn is_target(self) -> bool {
        matches!(self, Origin::Target)
    }
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Target => write!(f, "target"),
            Origin::Population(i) => write!(f, "population[{i}]"),
        }
    }
}

/// One `(s, a, r, s', done)` record.
///
/// `done` marks true termination (goal or failure) only. An episode cut by the
/// step cap ends without `done`, so the learner still bootstraps from `s'`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
    pub origin: Origin,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    /// Undiscounted sum of rewards; this is the fitness of the policy.
    pub episodic_return: f64,
    /// Number of steps where the (noisy) action had to be clipped.
    pub clip_events: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn states(&self) -> impl Iterator<Item = &[f64]> {
        self.transitions.iter().map(|t| t.state.as_slice())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: Vec<f64>,
    pub reward: f64,
    /// Goal reached or failure; bootstrapping stops here.
    pub terminal: bool,
    /// Step cap reached.
    pub truncated: bool,
    pub clipped: bool,
}

impl StepOutcome {
    pub fn done(&self) -> bool {
        self.terminal || self.truncated
    }
}

pub trait Environment: Send + Sync {
    fn spec(&self) -> &EnvSpec;

    fn reset(&self, seed: u64) -> Vec<f64>;

    /// Pure dynamics: `(state, action) -> (next_state, reward, terminal)`.
    /// `action` is already inside the bounds.
    fn transition(&self, state: &[f64], action: &[f64]) -> (Vec<f64>, f64, bool);

    /// Advances one step. `elapsed` is the number of steps already taken in
    /// the episode; the step that reaches `max_episode_steps` is truncated.
    fn step(&self, state: &[f64], action: &[f64], elapsed: usize) -> Result<StepOutcome, EnvError> {
        let spec = self.spec();
        if state.len() != spec.state_dim {
            return Err(EnvError::StateDim {
                expected: spec.state_dim,
                got: state.len(),
            });
        }
        if action.len() != spec.action_dim {
            return Err(EnvError::ActionDim {
                expected: spec.action_dim,
                got: action.len(),
            });
        }
        if let Some(index) = action.iter().position(|a| !a.is_finite()) {
            return Err(EnvError::NonFiniteAction { index });
        }
        let mut action = action.to_vec();
        let clipped = spec.clip_action(&mut action);
        let (next_state, reward, terminal) = self.transition(state, &action);
        Ok(StepOutcome {
            next_state,
            reward,
            terminal,
            truncated: !terminal && elapsed + 1 >= spec.max_episode_steps,
            clipped,
        })
    }
}

/// 2-D point mass pushed by a bounded force toward a goal at the origin.
///
/// State `(x, y, vx, vy)`, action force in `[-1, 1]^2`, reward `-|p - goal|`
/// after each step, termination once within [`PointMass::GOAL_RADIUS`].
#[derive(Debug, Clone)]
pub struct PointMass {
    spec: EnvSpec,
    pub goal: [f64; 2],
    pub start: [f64; 2],
}

impl PointMass {
    pub const DT: f64 = 0.1;
    pub const DAMPING: f64 = 0.9;
    pub const GOAL_RADIUS: f64 = 0.05;
    pub const ARENA: f64 = 2.0;
    pub const RESET_RANGE: f64 = 1.5;

    pub fn new(reset_mode: ResetMode) -> Self {
        Self {
            spec: EnvSpec {
                name: "pointmass-2d".into(),
                state_dim: 4,
                action_dim: 2,
                action_low: vec![-1.0; 2],
                action_high: vec![1.0; 2],
                max_episode_steps: 200,
                reset_mode,
            },
            goal: [0.0, 0.0],
            start: [-1.0, 1.0],
        }
    }

    fn distance(&self, x: f64, y: f64) -> f64 {
        ((x - self.goal[0]).powi(2) + (y - self.goal[1]).powi(2)).sqrt()
    }
}

impl Environment for PointMass {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&self, seed: u64) -> Vec<f64> {
        match self.spec.reset_mode {
            ResetMode::Fixed => vec![self.start[0], self.start[1], 0.0, 0.0],
            ResetMode::SeededRandom => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let r = Self::RESET_RANGE;
                loop {
                    let x = rng.random_range(-r..r);
                    let y = rng.random_range(-r..r);
                    if self.distance(x, y) > 4.0 * Self::GOAL_RADIUS {
                        return vec![x, y, 0.0, 0.0];
                    }
                }
            }
        }
    }

    fn transition(&self, state: &[f64], action: &[f64]) -> (Vec<f64>, f64, bool) {
        let mut next = vec![0.0; 4];
        for axis in 0..2 {
            let mut v = Self::DAMPING * state[2 + axis] + Self::DT * action[axis];
            let mut p = state[axis] + Self::DT * v;
            if p.abs() > Self::ARENA {
                p = p.clamp(-Self::ARENA, Self::ARENA);
                v = 0.0;
            }
            next[axis] = p;
            next[2 + axis] = v;
        }
        let dist = self.distance(next[0], next[1]);
        (next, -dist, dist <= Self::GOAL_RADIUS)
    }
}

/// 1-D task with a modest reward bump at the start and a larger one far away.
///
/// A learner following the local gradient settles on the near bump; reaching
/// the far region requires crossing a stretch of near-zero reward. The failure
/// variant ends the episode when the agent leaves `[FAIL_LOW, FAIL_HIGH]`.
#[derive(Debug, Clone)]
pub struct Ridge {
    spec: EnvSpec,
    pub failure_termination: bool,
}

impl Ridge {
    pub const STEP_SCALE: f64 = 0.1;
    pub const NEAR_CENTER: f64 = 0.0;
    pub const NEAR_HEIGHT: f64 = 0.5;
    pub const FAR_CENTER: f64 = 2.5;
    pub const FAR_HEIGHT: f64 = 1.0;
    pub const WIDTH: f64 = 0.3;
    pub const FAIL_LOW: f64 = -1.5;
    pub const FAIL_HIGH: f64 = 3.5;

    pub fn new(reset_mode: ResetMode, failure_termination: bool) -> Self {
        Self {
            spec: EnvSpec {
                name: if failure_termination {
                    "ridge-1d-fail".into()
                } else {
                    "ridge-1d".into()
                },
                state_dim: 1,
                action_dim: 1,
                action_low: vec![-1.0],
                action_high: vec![1.0],
                max_episode_steps: 100,
                reset_mode,
            },
            failure_termination,
        }
    }

    pub fn reward_at(x: f64) -> f64 {
        let bump = |c: f64, h: f64| h * (-(x - c).powi(2) / (2.0 * Self::WIDTH * Self::WIDTH)).exp();
        bump(Self::NEAR_CENTER, Self::NEAR_HEIGHT) + bump(Self::FAR_CENTER, Self::FAR_HEIGHT)
    }
}

impl Environment for Ridge {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&self, seed: u64) -> Vec<f64> {
        match self.spec.reset_mode {
            ResetMode::Fixed => vec![0.0],
            ResetMode::SeededRandom => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                vec![rng.random_range(-0.1..0.1)]
            }
        }
    }

    fn transition(&self, state: &[f64], action: &[f64]) -> (Vec<f64>, f64, bool) {
        let x = state[0] + Self::STEP_SCALE * action[0];
        let failed = self.failure_termination && !(Self::FAIL_LOW..=Self::FAIL_HIGH).contains(&x);
        (vec![x], Self::reward_at(x), failed)
    }
}

/// Names accepted by [`make_env`].
pub const ENV_NAMES: [&str; 3] = ["pointmass-2d", "ridge-1d", "ridge-1d-fail"];

/// Environment registry. `reset_mode` overrides the environment's default
/// (seeded random for the point mass, fixed for the ridge tasks).
pub fn make_env(name: &str, reset_mode: Option<ResetMode>) -> Result<Box<dyn Environment>, EnvError> {
    match name {
        "pointmass-2d" => Ok(Box::new(PointMass::new(
            reset_mode.unwrap_or(ResetMode::SeededRandom),
        ))),
        "ridge-1d" => Ok(Box::new(Ridge::new(reset_mode.unwrap_or(ResetMode::Fixed), false))),
        "ridge-1d-fail" => Ok(Box::new(Ridge::new(reset_mode.unwrap_or(ResetMode::Fixed), true))),
        other => Err(EnvError::UnknownEnv(other.to_string())),
    }
}

/// Runs one full episode.
///
/// With `noise_std > 0`, Gaussian noise scaled by each dimension's half-range
/// is added to the policy's action before clipping. Reset state and noise are
/// both derived from `seed`.
pub fn rollout<P>(
    env: &dyn Environment,
    policy: P,
    noise_std: f64,
    seed: u64,
    origin: Origin,
) -> Result<Trajectory, EnvError>
where
    P: Fn(&[f64]) -> Vec<f64>,
{
    assert!(noise_std >= 0.0, "noise_std must be non-negative");
    let spec = env.spec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = env.reset(rng.random());
    let half_range = spec.action_half_range();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut transitions = Vec::new();
    let mut episodic_return = 0.0;
    let mut clip_events = 0;
    for elapsed in 0..spec.max_episode_steps {
        let mut action = policy(&state);
        if action.len() != spec.action_dim {
            return Err(EnvError::ActionDim {
                expected: spec.action_dim,
                got: action.len(),
            });
        }
        if noise_std > 0.0 {
            for (a, h) in action.iter_mut().zip(&half_range) {
                *a += noise_std * h * normal.sample(&mut rng);
            }
        }
        if spec.clip_action(&mut action) {
            clip_events += 1;
        }
        let outcome = env.step(&state, &action, elapsed)?;
        episodic_return += outcome.reward;
        let done = outcome.done();
        transitions.push(Transition {
            state,
            action,
            reward: outcome.reward,
            next_state: outcome.next_state.clone(),
            done: outcome.terminal,
            origin,
        });
        state = outcome.next_state;
        if done {
            break;
        }
    }
    Ok(Trajectory {
        transitions,
        episodic_return,
        clip_events,
    })
}
