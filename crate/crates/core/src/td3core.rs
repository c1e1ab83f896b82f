//! Twin-critic TD3 learner over flat-parameter networks.
//!
//! Critics regress on `r + gamma * (1 - done) * min(Q1', Q2')(s', a~')` where
//! `a~'` is the target actor's action plus clipped smoothing noise. Every
//! `policy_delay` critic steps the actor ascends `Q1(s, mu(s))` through the
//! critic's action input, and the target networks are Polyak-averaged.

use std::fs;
use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::approximator::{adam_step, sgd_step, AdamState, Gradient, NetError, NetworkSpec, ParamVector};
use crate::envsim::{EnvSpec, Transition};
use crate::replay::{origin_counts, ReplayError, ReplaySource};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error("non-finite critic target at batch row {row}: reward {reward}, bootstrap {bootstrap}")]
    NonFiniteTarget { row: usize, reward: f64, bootstrap: f64 },
    #[error("invalid learner configuration: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    /// Plain gradient descent; used for exact-expectation convergence checks.
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Td3Hyper {
    pub gamma: f64,
    pub tau: f64,
    pub policy_delay: u64,
    pub smoothing_noise_std: f64,
    pub smoothing_clip: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
}

impl Default for Td3Hyper {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 5e-3,
            policy_delay: 2,
            smoothing_noise_std: 0.2,
            smoothing_clip: 0.5,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            batch_size: crate::replay::DEFAULT_BATCH_SIZE,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl Td3Hyper {
    pub fn validate(&self) -> Result<(), LearnerError> {
        let bad = |msg: &str| Err(LearnerError::Config(msg.to_string()));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if self.policy_delay == 0 {
            return bad("policy_delay must be at least 1");
        }
        if self.smoothing_noise_std < 0.0 || self.smoothing_clip < 0.0 {
            return bad("smoothing noise parameters must be non-negative");
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        Ok(())
    }
}

/// A sampled batch laid out as row matrices.
#[derive(Debug, Clone)]
pub struct Batch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_states: Array2<f64>,
    pub dones: Vec<bool>,
    pub target_count: usize,
    pub population_count: usize,
}

impl Batch {
    pub fn from_transitions(transitions: &[&Transition]) -> Self {
        assert!(!transitions.is_empty(), "batch must not be empty");
        let n = transitions.len();
        let sd = transitions[0].state.len();
        let ad = transitions[0].action.len();
        let rows = |f: &dyn Fn(&Transition) -> &[f64], width: usize| {
            Array2::from_shape_fn((n, width), |(r, c)| f(transitions[r])[c])
        };
        let (target_count, population_count) = origin_counts(transitions.iter().copied());
        Self {
            states: rows(&|t| &t.state, sd),
            actions: rows(&|t| &t.action, ad),
            rewards: transitions.iter().map(|t| t.reward).collect(),
            next_states: rows(&|t| &t.next_state, sd),
            dones: transitions.iter().map(|t| t.done).collect(),
            target_count,
            population_count,
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Twin-min Bellman targets `r + gamma * (1 - done) * min(q1, q2)`.
pub fn td_targets(
    rewards: &[f64],
    dones: &[bool],
    next_q1: &[f64],
    next_q2: &[f64],
    gamma: f64,
) -> Result<Vec<f64>, LearnerError> {
    rewards
        .iter()
        .enumerate()
        .map(|(row, &r)| {
            let bootstrap = if dones[row] {
                0.0
            } else {
                gamma * next_q1[row].min(next_q2[row])
            };
            let y = r + bootstrap;
            if y.is_finite() {
                Ok(y)
            } else {
                Err(LearnerError::NonFiniteTarget {
                    row,
                    reward: r,
                    bootstrap,
                })
            }
        })
        .collect()
}

/// Anything that scores `(state, action)` rows and differentiates in the action.
pub trait ActionCritic {
    /// Returns `Q(s_i, a_i)` and `dQ/da` for every row.
    fn value_and_action_grad(
        &self,
        states: ArrayView2<'_, f64>,
        actions: ArrayView2<'_, f64>,
    ) -> Result<(Array1<f64>, Array2<f64>), LearnerError>;
}

/// A critic network evaluated on `[state, action]`.
pub struct NetworkCritic<'a> {
    pub spec: &'a NetworkSpec,
    pub params: &'a [f64],
}

impl ActionCritic for NetworkCritic<'_> {
    fn value_and_action_grad(
        &self,
        states: ArrayView2<'_, f64>,
        actions: ArrayView2<'_, f64>,
    ) -> Result<(Array1<f64>, Array2<f64>), LearnerError> {
        let inputs = concatenate(Axis(1), &[states, actions]).map_err(|e| LearnerError::Config(e.to_string()))?;
        let cache = self.spec.forward_cached(self.params, inputs.view())?;
        let ones = Array2::ones((inputs.nrows(), 1));
        let (_, input_grad) = self.spec.backward_batch(self.params, &cache, ones.view())?;
        let q = cache.output.column(0).to_owned();
        let sd = states.ncols();
        Ok((q, input_grad.slice(s![.., sd..]).to_owned()))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub steps_performed: u64,
    pub actor_updates: u64,
    pub not_ready: bool,
    /// Mean over steps of the summed twin-critic MSE.
    pub mean_critic_loss: Option<f64>,
    pub mean_actor_objective: Option<f64>,
    pub batch_target_count: u64,
    pub batch_population_count: u64,
}

#[derive(Debug, Clone)]
pub struct LearnerState {
    pub actor_spec: NetworkSpec,
    pub critic_spec: NetworkSpec,
    pub actor: ParamVector,
    pub actor_target: ParamVector,
    pub critic1: ParamVector,
    pub critic2: ParamVector,
    pub critic1_target: ParamVector,
    pub critic2_target: ParamVector,
    pub actor_opt: AdamState,
    pub critic1_opt: AdamState,
    pub critic2_opt: AdamState,
    /// Number of critic updates performed so far.
    pub update_counter: u64,
    pub hyper: Td3Hyper,
    action_low: Vec<f64>,
    action_high: Vec<f64>,
    rng: ChaCha8Rng,
}

impl LearnerState {
    pub fn new(env: &EnvSpec, hidden: &[usize], hyper: Td3Hyper, seed: u64) -> Result<Self, LearnerError> {
        let actor_spec = NetworkSpec::actor(env.state_dim, env.action_dim, hidden);
        let critic_spec = NetworkSpec::critic(env.state_dim, env.action_dim, hidden);
        let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
        let actor = actor_spec.init_params(&mut init_rng);
        let critic1 = critic_spec.init_params(&mut init_rng);
        let critic2 = critic_spec.init_params(&mut init_rng);
        Self::from_parts(
            actor_spec,
            critic_spec,
            actor,
            critic1,
            critic2,
            hyper,
            env.action_low.clone(),
            env.action_high.clone(),
            init_rng.random(),
        )
    }

    /// Builds a learner from explicit networks; targets start as exact copies.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        actor_spec: NetworkSpec,
        critic_spec: NetworkSpec,
        actor: ParamVector,
        critic1: ParamVector,
        critic2: ParamVector,
        hyper: Td3Hyper,
        action_low: Vec<f64>,
        action_high: Vec<f64>,
        seed: u64,
    ) -> Result<Self, LearnerError> {
        hyper.validate()?;
        actor_spec.validate()?;
        critic_spec.validate()?;
        if actor_spec.output_dim != action_low.len() || action_low.len() != action_high.len() {
            return Err(LearnerError::Config("action bounds do not match actor output".into()));
        }
        if critic_spec.input_dim != actor_spec.input_dim + actor_spec.output_dim || critic_spec.output_dim != 1 {
            return Err(LearnerError::Config("critic must map [state, action] to a scalar".into()));
        }
        for (spec, p, what) in [
            (&actor_spec, &actor, "actor"),
            (&critic_spec, &critic1, "critic1"),
            (&critic_spec, &critic2, "critic2"),
        ] {
            if p.len() != spec.param_count() {
                return Err(LearnerError::Config(format!("{what} has the wrong parameter count")));
            }
        }
        Ok(Self {
            actor_opt: AdamState::new(actor.len()),
            critic1_opt: AdamState::new(critic1.len()),
            critic2_opt: AdamState::new(critic2.len()),
            actor_target: actor.clone(),
            critic1_target: critic1.clone(),
            critic2_target: critic2.clone(),
            actor,
            critic1,
            critic2,
            actor_spec,
            critic_spec,
            update_counter: 0,
            hyper,
            action_low,
            action_high,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    fn half_range(&self) -> Vec<f64> {
        self.action_low
            .iter()
            .zip(&self.action_high)
            .map(|(lo, hi)| 0.5 * (hi - lo))
            .collect()
    }

    /// Maps squashed actor outputs in `[-1, 1]` onto the action bounds.
    fn scale_actions(&self, unit: &mut Array2<f64>) {
        for mut row in unit.rows_mut() {
            for (j, u) in row.iter_mut().enumerate() {
                let (lo, hi) = (self.action_low[j], self.action_high[j]);
                *u = lo + (*u + 1.0) * 0.5 * (hi - lo);
            }
        }
    }

    /// Deterministic action of the live actor for one state.
    pub fn act(&self, state: &[f64]) -> Result<Vec<f64>, LearnerError> {
        policy_action(&self.actor_spec, &self.actor, &self.action_low, &self.action_high, state)
    }

    /// Target-policy actions with clipped smoothing noise, clipped to bounds.
    fn smoothed_target_actions(&mut self, next_states: ArrayView2<'_, f64>) -> Result<Array2<f64>, LearnerError> {
        let mut actions = self.actor_spec.forward_batch(&self.actor_target, next_states)?;
        self.scale_actions(&mut actions);
        let half = self.half_range();
        let std = self.hyper.smoothing_noise_std;
        let clip = self.hyper.smoothing_clip;
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        for mut row in actions.rows_mut() {
            for (j, a) in row.iter_mut().enumerate() {
                if std > 0.0 {
                    let noise = (std * half[j] * normal.sample(&mut self.rng)).clamp(-clip * half[j], clip * half[j]);
                    *a += noise;
                }
                *a = a.clamp(self.action_low[j], self.action_high[j]);
            }
        }
        Ok(actions)
    }

    /// One regression step of both critics; returns the summed MSE before the step.
    pub fn critic_update(&mut self, batch: &Batch) -> Result<f64, LearnerError> {
        if batch.is_empty() {
            return Err(LearnerError::Config("empty batch".into()));
        }
        let next_actions = self.smoothed_target_actions(batch.next_states.view())?;
        let next_inputs = concatenate(Axis(1), &[batch.next_states.view(), next_actions.view()])
            .map_err(|e| LearnerError::Config(e.to_string()))?;
        let q1_next = self.critic_spec.forward_batch(&self.critic1_target, next_inputs.view())?;
        let q2_next = self.critic_spec.forward_batch(&self.critic2_target, next_inputs.view())?;
        let targets = td_targets(
            batch.rewards.as_slice().expect("contiguous rewards"),
            &batch.dones,
            q1_next.column(0).as_slice().expect("contiguous column"),
            q2_next.column(0).as_slice().expect("contiguous column"),
            self.hyper.gamma,
        )?;
        let inputs = concatenate(Axis(1), &[batch.states.view(), batch.actions.view()])
            .map_err(|e| LearnerError::Config(e.to_string()))?;
        let n = batch.len() as f64;
        let mut total_loss = 0.0;
        for which in 0..2 {
            let params = if which == 0 { &self.critic1 } else { &self.critic2 };
            let cache = self.critic_spec.forward_cached(params, inputs.view())?;
            let mut upstream = Array2::zeros((batch.len(), 1));
            let mut loss = 0.0;
            for (row, y) in targets.iter().enumerate() {
                let diff = cache.output[[row, 0]] - y;
                loss += diff * diff;
                upstream[[row, 0]] = 2.0 * diff / n;
            }
            total_loss += loss / n;
            let (grad, _) = self.critic_spec.backward_batch(params, &cache, upstream.view())?;
            let (params, opt) = if which == 0 {
                (&mut self.critic1, &mut self.critic1_opt)
            } else {
                (&mut self.critic2, &mut self.critic2_opt)
            };
            apply_step(self.hyper.optimizer, params, &grad, opt, self.hyper.critic_lr)?;
        }
        Ok(total_loss)
    }

    /// Mean `Q(s, mu(s))` over the batch and its gradient with respect to the
    /// actor parameters, chained through the critic's action input.
    pub fn actor_objective_gradient<C: ActionCritic>(
        &self,
        states: ArrayView2<'_, f64>,
        critic: &C,
    ) -> Result<(f64, Gradient), LearnerError> {
        let cache = self.actor_spec.forward_cached(&self.actor, states)?;
        let mut actions = cache.output.clone();
        self.scale_actions(&mut actions);
        let (q, dq_da) = critic.value_and_action_grad(states, actions.view())?;
        let n = states.nrows() as f64;
        let half = self.half_range();
        let mut upstream = dq_da;
        for mut row in upstream.rows_mut() {
            for (j, g) in row.iter_mut().enumerate() {
                *g *= half[j] / n;
            }
        }
        let (grad, _) = self.actor_spec.backward_batch(&self.actor, &cache, upstream.view())?;
        Ok((q.sum() / n, grad))
    }

    /// One ascent step of the actor against an arbitrary critic.
    pub fn actor_update_with<C: ActionCritic>(&mut self, batch: &Batch, critic: &C) -> Result<f64, LearnerError> {
        let (objective, mut grad) = self.actor_objective_gradient(batch.states.view(), critic)?;
        grad.scale(-1.0);
        apply_step(self.hyper.optimizer, &mut self.actor, &grad, &mut self.actor_opt, self.hyper.actor_lr)?;
        Ok(objective)
    }

    /// One ascent step of `E_batch[Q1(s, mu(s))]`; returns the objective before the step.
    pub fn actor_update(&mut self, batch: &Batch) -> Result<f64, LearnerError> {
        let critic_spec = self.critic_spec.clone();
        let critic1 = self.critic1.clone();
        let critic = NetworkCritic {
            spec: &critic_spec,
            params: &critic1,
        };
        self.actor_update_with(batch, &critic)
    }

    /// `target <- tau * live + (1 - tau) * target` for all three networks.
    pub fn polyak_sync(&mut self) {
        let tau = self.hyper.tau;
        let blend = |target: &mut ParamVector, live: &ParamVector| {
            for (t, l) in target.iter_mut().zip(live.iter()) {
                *t = tau * l + (1.0 - tau) * *t;
            }
        };
        blend(&mut self.actor_target, &self.actor);
        blend(&mut self.critic1_target, &self.critic1);
        blend(&mut self.critic2_target, &self.critic2);
    }

    /// Runs `n_steps` critic updates with delayed actor updates and target
    /// syncs. Performs nothing when the source is still warming up.
    pub fn train_steps(&mut self, source: &ReplaySource, n_steps: u64) -> Result<UpdateReport, LearnerError> {
        let mut report = UpdateReport::default();
        if n_steps == 0 {
            return Ok(report);
        }
        let batch_size = self.hyper.batch_size;
        if !source.is_ready(batch_size) {
            report.not_ready = true;
            return Ok(report);
        }
        let mut critic_sum = 0.0;
        let mut actor_sum = 0.0;
        for _ in 0..n_steps {
            let batch = {
                let sampled = source.sample_batch(batch_size, &mut self.rng)?;
                Batch::from_transitions(&sampled)
            };
            report.batch_target_count += batch.target_count as u64;
            report.batch_population_count += batch.population_count as u64;
            self.update_counter += 1;
            critic_sum += self.critic_update(&batch)?;
            report.steps_performed += 1;
            if self.update_counter % self.hyper.policy_delay == 0 {
                actor_sum += self.actor_update(&batch)?;
                self.polyak_sync();
                report.actor_updates += 1;
            }
        }
        report.mean_critic_loss = Some(critic_sum / report.steps_performed as f64);
        if report.actor_updates > 0 {
            report.mean_actor_objective = Some(actor_sum / report.actor_updates as f64);
        }
        Ok(report)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            actor_spec: self.actor_spec.clone(),
            critic_spec: self.critic_spec.clone(),
            hyper: self.hyper.clone(),
            update_counter: self.update_counter,
            action_low: self.action_low.clone(),
            action_high: self.action_high.clone(),
            actor: self.actor.clone(),
            actor_target: self.actor_target.clone(),
            critic1: self.critic1.clone(),
            critic2: self.critic2.clone(),
            critic1_target: self.critic1_target.clone(),
            critic2_target: self.critic2_target.clone(),
            actor_opt: self.actor_opt.clone(),
            critic1_opt: self.critic1_opt.clone(),
            critic2_opt: self.critic2_opt.clone(),
        }
    }

    /// Restores a learner from a checkpoint. The smoothing/sampling stream is
    /// reseeded with `seed`.
    pub fn from_checkpoint(ckpt: Checkpoint, seed: u64) -> Result<Self, LearnerError> {
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(LearnerError::Checkpoint(format!(
                "unsupported checkpoint version {}",
                ckpt.format_version
            )));
        }
        let mut learner = Self::from_parts(
            ckpt.actor_spec,
            ckpt.critic_spec,
            ckpt.actor,
            ckpt.critic1,
            ckpt.critic2,
            ckpt.hyper,
            ckpt.action_low,
            ckpt.action_high,
            seed,
        )?;
        learner.actor_target = ckpt.actor_target;
        learner.critic1_target = ckpt.critic1_target;
        learner.critic2_target = ckpt.critic2_target;
        learner.actor_opt = ckpt.actor_opt;
        learner.critic1_opt = ckpt.critic1_opt;
        learner.critic2_opt = ckpt.critic2_opt;
        learner.update_counter = ckpt.update_counter;
        Ok(learner)
    }
}

fn apply_step(
    kind: OptimizerKind,
    params: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    lr: f64,
) -> Result<(), NetError> {
    match kind {
        OptimizerKind::Adam => adam_step(params, grad, state, lr),
        OptimizerKind::Sgd => sgd_step(params, grad, lr),
    }
}

/// Deterministic action of an actor network: forward pass scaled to bounds.
pub fn policy_action(
    spec: &NetworkSpec,
    params: &[f64],
    low: &[f64],
    high: &[f64],
    state: &[f64],
) -> Result<Vec<f64>, LearnerError> {
    let unit = spec.forward(params, state)?;
    Ok(unit
        .iter()
        .zip(low.iter().zip(high))
        .map(|(u, (lo, hi))| lo + (u + 1.0) * 0.5 * (hi - lo))
        .collect())
}

/// Versioned on-disk learner state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub actor_spec: NetworkSpec,
    pub critic_spec: NetworkSpec,
    pub hyper: Td3Hyper,
    pub update_counter: u64,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub actor: ParamVector,
    pub actor_target: ParamVector,
    pub critic1: ParamVector,
    pub critic2: ParamVector,
    pub critic1_target: ParamVector,
    pub critic2_target: ParamVector,
    pub actor_opt: AdamState,
    pub critic1_opt: AdamState,
    pub critic2_opt: AdamState,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), LearnerError> {
        let text = serde_json::to_string(self).map_err(|e| LearnerError::Checkpoint(e.to_string()))?;
        fs::write(path, text).map_err(|e| LearnerError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, LearnerError> {
        let text = fs::read_to_string(path).map_err(|e| LearnerError::Checkpoint(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| LearnerError::Checkpoint(e.to_string()))
    }
}
