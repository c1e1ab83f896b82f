//! Iteration loop shared by every algorithm.
//!
//! Each iteration runs a fixed number of rollout workers in parallel, joins
//! them, applies the ES update (population algorithms only), then performs as
//! many gradient updates as the first target worker collected timesteps. The
//! training-step clock is the cumulative gradient-update count.

use std::cell::RefCell;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::approximator::{NetError, ParamVector};
use crate::envsim::{make_env, rollout, EnvError, Environment, Origin, ResetMode, Trajectory};
use crate::evostrat::{
    action_discrepancy, EsError, PopulationState, Strategy, DEFAULT_PARENT_COUNT, DEFAULT_POPULATION_SIZE,
    DEFAULT_SIGMA,
};
use crate::metrics::{seed_dir, IterationRow, MetricsError, RecordWriter, RunRecord, CONFIG_FILE, RECORD_FILE};
use crate::replay::{DualReplayStore, ReplayError, ReplaySource, ReplayStore, DEFAULT_DUAL_CAPACITY, DEFAULT_SHARED_CAPACITY};
use crate::td3core::{policy_action, LearnerError, LearnerState, Td3Hyper};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Es(#[from] EsError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("rollout worker {worker} failed at iteration {iteration}: {source}")]
    Worker {
        worker: usize,
        iteration: u64,
        source: EnvError,
    },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl HarnessError {
    /// Stable machine-readable category.
    pub fn category(&self) -> &'static str {
        match self {
            HarnessError::Config(_) => "config",
            HarnessError::Env(_) => "environment",
            HarnessError::Net(_) => "network",
            HarnessError::Replay(_) => "replay",
            HarnessError::Learner(_) => "learner",
            HarnessError::Es(_) => "evolution",
            HarnessError::Metrics(_) => "metrics",
            HarnessError::Worker { .. } => "worker",
            HarnessError::Io { .. } => "io",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    ErlNormal,
    ErlAlways,
    ErlAlwaysFirst,
    ParamNoise,
    NoPop,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::ErlNormal,
        Algorithm::ErlAlways,
        Algorithm::ErlAlwaysFirst,
        Algorithm::ParamNoise,
        Algorithm::NoPop,
    ];

    pub fn strategy(self) -> Option<Strategy> {
        match self {
            Algorithm::ErlNormal => Some(Strategy::Normal),
            Algorithm::ErlAlways => Some(Strategy::Always),
            Algorithm::ErlAlwaysFirst => Some(Strategy::AlwaysFirst),
            Algorithm::ParamNoise => Some(Strategy::ParamNoise),
            Algorithm::NoPop => None,
        }
    }

    pub fn has_population(self) -> bool {
        self.strategy().is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferMode {
    /// One store for all origins.
    SingleShared,
    /// Separate target and population stores; `mix_ratio` of every batch
    /// comes from the target store.
    Dual { mix_ratio: f64 },
}

/// Extra episodes of a fixed random-weight policy, stored as population data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Injection {
    pub episodes_per_iteration: usize,
    /// Seeds the fixed policy's weights.
    pub policy_seed: u64,
    #[serde(default)]
    pub action_noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub buffer_mode: BufferMode,
    pub env: String,
    pub reset_mode: Option<ResetMode>,
    pub population_size: usize,
    pub sigma: f64,
    pub parent_count: usize,
    pub total_training_steps: u64,
    pub eval_period_iterations: u64,
    pub eval_episodes: usize,
    /// Std of the Gaussian action noise on target exploration episodes, in
    /// units of the action half-range.
    pub exploration_noise: f64,
    pub hidden: Vec<usize>,
    pub shared_capacity: usize,
    pub dual_capacity: usize,
    pub learner: Td3Hyper,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub injection: Option<Injection>,
    /// Worker threads for rollouts; 0 uses every available core.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::ErlAlways,
            buffer_mode: BufferMode::SingleShared,
            env: "pointmass-2d".into(),
            reset_mode: None,
            population_size: DEFAULT_POPULATION_SIZE,
            sigma: DEFAULT_SIGMA,
            parent_count: DEFAULT_PARENT_COUNT,
            total_training_steps: 50_000,
            eval_period_iterations: 2,
            eval_episodes: 10,
            exploration_noise: 0.1,
            hidden: vec![256, 256],
            shared_capacity: DEFAULT_SHARED_CAPACITY,
            dual_capacity: DEFAULT_DUAL_CAPACITY,
            learner: Td3Hyper::default(),
            seeds: vec![0],
            output_dir: PathBuf::from("runs"),
            injection: None,
            threads: 0,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String, HarnessError> {
        toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|source| HarnessError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        make_env(&self.env, self.reset_mode)?;
        self.learner.validate()?;
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden layer sizes must be non-empty and positive".into());
        }
        if self.eval_period_iterations == 0 || self.eval_episodes == 0 {
            return bad("evaluation period and episode count must be positive".into());
        }
        if !(self.exploration_noise >= 0.0 && self.exploration_noise.is_finite()) {
            return bad(format!("exploration_noise {} must be non-negative", self.exploration_noise));
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if let Some(strategy) = self.algorithm.strategy() {
            if self.population_size == 0 {
                return bad("population algorithms need population_size >= 1".into());
            }
            if !(self.sigma > 0.0 && self.sigma.is_finite()) {
                return bad(format!("sigma {} must be positive", self.sigma));
            }
            if strategy != Strategy::ParamNoise && !(1..=self.population_size).contains(&self.parent_count) {
                return bad(format!(
                    "parent_count {} must lie in 1..={}",
                    self.parent_count, self.population_size
                ));
            }
        } else {
            if self.buffer_mode != BufferMode::SingleShared {
                return bad("no_pop only supports the single shared buffer".into());
            }
            if self.injection.is_some() {
                return bad("injection needs a population store; no_pop has none".into());
            }
        }
        let batch = self.learner.batch_size;
        match self.buffer_mode {
            BufferMode::SingleShared if self.shared_capacity < batch => {
                bad(format!("shared_capacity {} is below batch_size {batch}", self.shared_capacity))
            }
            BufferMode::Dual { mix_ratio } if !(mix_ratio > 0.0 && mix_ratio <= 1.0) => {
                bad(format!("mix_ratio {mix_ratio} must lie in (0, 1]"))
            }
            BufferMode::Dual { .. } if self.dual_capacity < batch => {
                bad(format!("dual_capacity {} is below batch_size {batch}", self.dual_capacity))
            }
            _ => Ok(()),
        }
    }
}

/// Which parts of an ERL iteration run. Everything is on for real runs; the
/// differential check against `no_pop` turns the population phases off.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhaseMask {
    pub population_rollouts: bool,
    pub target_fitness_episode: bool,
    pub es_update: bool,
}

impl PhaseMask {
    pub const FULL: PhaseMask = PhaseMask {
        population_rollouts: true,
        target_fitness_episode: true,
        es_update: true,
    };
    pub const TARGET_ONLY: PhaseMask = PhaseMask {
        population_rollouts: false,
        target_fitness_episode: false,
        es_update: false,
    };
}

/// Worker layout of one iteration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IterationPlan {
    /// Population workers (ERL) or additional clone workers (no_pop).
    pub population_workers: usize,
    /// Workers rolling out the target actor with exploration noise.
    pub target_workers: usize,
    pub target_fitness_episode: bool,
    pub injection_episodes: usize,
}

impl IterationPlan {
    pub fn for_config(config: &RunConfig, mask: PhaseMask) -> Self {
        let injection_episodes = config.injection.as_ref().map_or(0, |i| i.episodes_per_iteration);
        if config.algorithm.has_population() {
            Self {
                population_workers: if mask.population_rollouts { config.population_size } else { 0 },
                target_workers: 1,
                target_fitness_episode: mask.target_fitness_episode,
                injection_episodes,
            }
        } else {
            Self {
                population_workers: 0,
                target_workers: config.population_size + 1,
                target_fitness_episode: false,
                injection_episodes: 0,
            }
        }
    }

    /// Episodes collected per iteration.
    pub fn episodes(&self) -> usize {
        self.population_workers + self.target_workers + usize::from(self.target_fitness_episode) + self.injection_episodes
    }
}

const STREAM_INIT: u64 = 1;
const STREAM_ROLLOUT: u64 = 2;
const STREAM_FITNESS: u64 = 3;
const STREAM_ES: u64 = 4;
const STREAM_EVAL: u64 = 5;
const STREAM_INJECT: u64 = 6;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent seed for one (stream, iteration, worker) slot of a run.
pub fn derive_seed(run_seed: u64, stream: u64, iteration: u64, index: u64) -> u64 {
    [stream, iteration, index]
        .into_iter()
        .fold(splitmix64(run_seed), |acc, v| splitmix64(acc ^ v))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub training_steps: u64,
    pub target_return: f64,
    pub pop_mean_return: Option<f64>,
}

/// Everything one seed's run owns between iterations.
pub struct RunState {
    pub config: RunConfig,
    pub seed: u64,
    pub env: Box<dyn Environment>,
    pub learner: LearnerState,
    pub population: Option<PopulationState>,
    pub buffer: ReplaySource,
    pub iteration: u64,
    /// Cumulative gradient updates.
    pub training_steps: u64,
    pub mask: PhaseMask,
    injection_policy: Option<ParamVector>,
}

struct Job {
    worker: usize,
    params: ParamVector,
    noise: f64,
    seed: u64,
    origin: Origin,
}

impl RunState {
    pub fn new(config: RunConfig, seed: u64) -> Result<Self, HarnessError> {
        config.validate()?;
        let env = make_env(&config.env, config.reset_mode)?;
        let spec = env.spec().clone();
        let learner = LearnerState::new(
            &spec,
            &config.hidden,
            config.learner.clone(),
            derive_seed(seed, STREAM_INIT, 0, 0),
        )?;
        let population = config
            .algorithm
            .strategy()
            .map(|strategy| {
                PopulationState::new(
                    learner.actor.clone(),
                    config.sigma,
                    config.population_size,
                    config.parent_count,
                    strategy,
                )
            })
            .transpose()?;
        let buffer = match config.buffer_mode {
            BufferMode::SingleShared => {
                ReplaySource::Single(ReplayStore::new(config.shared_capacity, spec.state_dim, spec.action_dim)?)
            }
            BufferMode::Dual { mix_ratio } => ReplaySource::Dual(DualReplayStore::new(
                config.dual_capacity,
                spec.state_dim,
                spec.action_dim,
                mix_ratio,
            )?),
        };
        let injection_policy = config.injection.as_ref().map(|inj| {
            learner
                .actor_spec
                .init_params(&mut ChaCha8Rng::seed_from_u64(inj.policy_seed))
        });
        Ok(Self {
            config,
            seed,
            env,
            learner,
            population,
            buffer,
            iteration: 0,
            training_steps: 0,
            mask: PhaseMask::FULL,
            injection_policy,
        })
    }

    pub fn plan(&self) -> IterationPlan {
        IterationPlan::for_config(&self.config, self.mask)
    }

    pub fn is_finished(&self) -> bool {
        self.training_steps >= self.config.total_training_steps
    }

    fn policy(&self, params: &ParamVector) -> impl Fn(&[f64]) -> Vec<f64> + Send + Sync + '_ {
        let spec = &self.learner.actor_spec;
        let env_spec = self.env.spec();
        let params = params.clone();
        move |s: &[f64]| {
            policy_action(spec, &params, &env_spec.action_low, &env_spec.action_high, s)
                .expect("actor output matches the action space")
        }
    }

    fn run_jobs(&self, jobs: &[Job]) -> Result<Vec<Trajectory>, HarnessError> {
        let iteration = self.iteration;
        jobs.par_iter()
            .map(|job| {
                rollout(self.env.as_ref(), self.policy(&job.params), job.noise, job.seed, job.origin).map_err(
                    |source| HarnessError::Worker {
                        worker: job.worker,
                        iteration,
                        source,
                    },
                )
            })
            .collect()
    }

    fn target_job(&self, worker: usize) -> Job {
        Job {
            worker,
            params: self.learner.actor.clone(),
            noise: self.config.exploration_noise,
            seed: derive_seed(self.seed, STREAM_ROLLOUT, self.iteration, worker as u64),
            origin: Origin::Target,
        }
    }

    fn injection_jobs(&self, first_worker: usize) -> Vec<Job> {
        let (Some(inj), Some(params)) = (&self.config.injection, &self.injection_policy) else {
            return Vec::new();
        };
        let n = self.config.population_size;
        (0..inj.episodes_per_iteration)
            .map(|k| Job {
                worker: first_worker + k,
                params: params.clone(),
                noise: inj.action_noise,
                seed: derive_seed(self.seed, STREAM_INJECT, self.iteration, k as u64),
                origin: Origin::Population(n + k),
            })
            .collect()
    }

    fn store(&mut self, trajectories: &[Trajectory]) -> Result<u64, HarnessError> {
        let mut count = 0;
        for t in trajectories {
            for tr in &t.transitions {
                self.buffer.push(tr.clone())?;
                count += 1;
            }
        }
        Ok(count)
    }

    /// Gradient budget for this iteration, capped so the clock lands exactly
    /// on the configured total.
    fn budget(&self, target_timesteps: u64) -> u64 {
        target_timesteps.min(self.config.total_training_steps - self.training_steps)
    }

    fn train(&mut self, budget: u64, row: &mut IterationRow) -> Result<(), HarnessError> {
        let report = self.learner.train_steps(&self.buffer, budget)?;
        self.training_steps += report.steps_performed;
        row.gradient_updates = report.steps_performed;
        row.training_steps = self.training_steps;
        row.critic_loss = report.mean_critic_loss;
        row.actor_objective = report.mean_actor_objective;
        row.batch_target_count = report.batch_target_count;
        row.batch_population_count = report.batch_population_count;
        Ok(())
    }

    /// One iteration of the population algorithms: rollouts, ES update, then
    /// gradient updates.
    pub fn run_iteration_erl(&mut self) -> Result<IterationRow, HarnessError> {
        let plan = self.plan();
        let mut population = self
            .population
            .take()
            .ok_or_else(|| HarnessError::Config("run_iteration_erl needs a population".into()))?;
        let result = self.erl_phases(&mut population, &plan);
        self.population = Some(population);
        let mut row = result?;
        self.iteration += 1;
        row.training_steps = self.training_steps;
        Ok(row)
    }

    fn erl_phases(&mut self, population: &mut PopulationState, plan: &IterationPlan) -> Result<IterationRow, HarnessError> {
        if population.strategy == Strategy::ParamNoise {
            population.pin_mean(&self.learner.actor);
        }
        let individuals = if plan.population_workers > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, STREAM_ES, self.iteration, 0));
            population.sample_population(&mut rng)
        } else {
            Vec::new()
        };

        let mut jobs = vec![self.target_job(0)];
        if plan.target_fitness_episode {
            jobs.push(Job {
                worker: 0,
                params: self.learner.actor.clone(),
                noise: 0.0,
                seed: derive_seed(self.seed, STREAM_FITNESS, self.iteration, 0),
                origin: Origin::Target,
            });
        }
        let first_pop_job = jobs.len();
        for (i, theta) in individuals.iter().enumerate() {
            jobs.push(Job {
                worker: i + 1,
                params: theta.clone(),
                noise: 0.0,
                seed: derive_seed(self.seed, STREAM_ROLLOUT, self.iteration, (i + 1) as u64),
                origin: Origin::Population(i),
            });
        }
        jobs.extend(self.injection_jobs(individuals.len() + 1));
        let trajectories = match self.run_jobs(&jobs) {
            Ok(t) => t,
            Err(e) => {
                self.halt_checkpoint(Some(population));
                return Err(e);
            }
        };

        let collected = self.store(&trajectories)?;
        let target_timesteps = trajectories[0].len() as u64;
        let mut row = IterationRow {
            iteration: self.iteration,
            target_timesteps,
            collected_timesteps: collected,
            ..Default::default()
        };

        if !individuals.is_empty() {
            let pop_traj = &trajectories[first_pop_job..first_pop_job + individuals.len()];
            let fitness: Vec<f64> = pop_traj.iter().map(|t| t.episodic_return).collect();
            for (i, f) in fitness.iter().enumerate() {
                population.set_fitness(i, *f)?;
            }
            let target_policy = self.policy(&self.learner.actor);
            let discrepancies = individuals
                .par_iter()
                .zip(pop_traj)
                .map(|(theta, traj)| action_discrepancy(&target_policy, self.policy(theta), traj))
                .collect::<Result<Vec<f64>, _>>()?;
            row.mean_pop_fitness = population.mean_fitness();
            row.mean_action_discrepancy = Some(discrepancies.iter().sum::<f64>() / discrepancies.len() as f64);
            row.fitness_list = Some(fitness);
            row.discrepancies = Some(discrepancies);
        }
        if plan.target_fitness_episode {
            let f_target = trajectories[1].episodic_return;
            row.f_target = Some(f_target);
            if self.mask.es_update && !individuals.is_empty() {
                population.set_target(&self.learner.actor, f_target)?;
                let parents = population.select_parents()?;
                population.es_update(&parents)?;
            }
        }

        let budget = self.budget(target_timesteps);
        self.train(budget, &mut row)?;
        Ok(row)
    }

    /// One iteration of the `no_pop` baseline: `N + 1` clones of the current
    /// target actor explore, then gradient updates.
    pub fn run_iteration_no_pop(&mut self) -> Result<IterationRow, HarnessError> {
        let plan = self.plan();
        let jobs: Vec<Job> = (0..plan.target_workers).map(|w| self.target_job(w)).collect();
        let trajectories = match self.run_jobs(&jobs) {
            Ok(t) => t,
            Err(e) => {
                self.halt_checkpoint(None);
                return Err(e);
            }
        };
        let collected = self.store(&trajectories)?;
        let target_timesteps = trajectories[0].len() as u64;
        let mut row = IterationRow {
            iteration: self.iteration,
            target_timesteps,
            collected_timesteps: collected,
            ..Default::default()
        };
        let budget = self.budget(target_timesteps);
        self.train(budget, &mut row)?;
        self.iteration += 1;
        Ok(row)
    }

    pub fn run_iteration(&mut self) -> Result<IterationRow, HarnessError> {
        if self.config.algorithm.has_population() {
            self.run_iteration_erl()
        } else {
            self.run_iteration_no_pop()
        }
    }

    fn average_return(&self, params: &ParamVector, iteration: u64) -> Result<f64, HarnessError> {
        let returns = (0..self.config.eval_episodes)
            .into_par_iter()
            .map(|e| {
                let seed = derive_seed(self.seed, STREAM_EVAL, iteration, e as u64);
                rollout(self.env.as_ref(), self.policy(params), 0.0, seed, Origin::Target).map(|t| t.episodic_return)
            })
            .collect::<Result<Vec<f64>, _>>()?;
        Ok(returns.iter().sum::<f64>() / returns.len() as f64)
    }

    /// Noise-free average return of the target actor and, when a population
    /// exists, of its mean. Both use the same episode seeds.
    pub fn evaluate(&self) -> Result<EvalRecord, HarnessError> {
        let target_return = self.average_return(&self.learner.actor, self.iteration)?;
        let pop_mean_return = match &self.population {
            Some(p) => Some(self.average_return(&p.mean, self.iteration)?),
            None => None,
        };
        Ok(EvalRecord {
            training_steps: self.training_steps,
            target_return,
            pop_mean_return,
        })
    }

    /// Whether the iteration that just finished is an evaluation iteration.
    fn eval_due(&self) -> bool {
        self.iteration % self.config.eval_period_iterations == 0
    }

    /// Runs one iteration and, on the evaluation cadence, attaches returns.
    pub fn step(&mut self) -> Result<IterationRow, HarnessError> {
        let mut row = self.run_iteration()?;
        if self.eval_due() {
            let eval = self.evaluate()?;
            row.target_eval_return = Some(eval.target_return);
            row.pop_mean_eval_return = eval.pop_mean_return;
        }
        Ok(row)
    }

    fn halt_checkpoint(&self, population: Option<&PopulationState>) {
        let dir = seed_dir(&self.config.output_dir, self.seed);
        if let Err(e) = self.write_checkpoints_to(&dir, population.or(self.population.as_ref())) {
            log::error!("could not write halt checkpoint: {e}");
        }
    }

    fn write_checkpoints_to(&self, dir: &Path, population: Option<&PopulationState>) -> Result<(), HarnessError> {
        fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        self.learner.checkpoint().save(&dir.join(TARGET_CHECKPOINT))?;
        if let Some(p) = population {
            let path = dir.join(POP_MEAN_FILE);
            let text = serde_json::to_string(&p.mean).map_err(|e| HarnessError::Config(e.to_string()))?;
            fs::write(&path, text).map_err(|source| HarnessError::Io { path, source })?;
        }
        Ok(())
    }

    /// Final learner checkpoint and population mean under `seed_<n>/`.
    pub fn write_checkpoints(&self) -> Result<(), HarnessError> {
        let dir = seed_dir(&self.config.output_dir, self.seed);
        self.write_checkpoints_to(&dir, self.population.as_ref())
    }
}

pub const TARGET_CHECKPOINT: &str = "target_actor.json";
pub const POP_MEAN_FILE: &str = "population_mean.json";

/// Trains one seed to the clock cap, writing `seed_<n>/record.jsonl` row by
/// row and final checkpoints.
pub fn run_seed(config: &RunConfig, seed: u64) -> Result<RunRecord, HarnessError> {
    let mut state = RunState::new(config.clone(), seed)?;
    let dir = seed_dir(&config.output_dir, seed);
    fs::create_dir_all(&dir).map_err(|source| HarnessError::Io {
        path: dir.clone(),
        source,
    })?;
    let mut writer = RecordWriter::create(&dir.join(RECORD_FILE))?;
    let mut record = RunRecord::new(seed);
    while !state.is_finished() {
        let row = state.step()?;
        log::debug!(
            "seed {seed} iteration {} steps {} eval {:?}",
            row.iteration,
            row.training_steps,
            row.target_eval_return
        );
        writer.append(&row)?;
        record.rows.push(row);
    }
    state.write_checkpoints()?;
    Ok(record)
}

/// Validates the configuration, writes it next to the results, and runs
/// every configured seed in order.
pub fn run_experiment(config: &RunConfig) -> Result<Vec<RunRecord>, HarnessError> {
    config.validate()?;
    let out = &config.output_dir;
    fs::create_dir_all(out).map_err(|source| HarnessError::Io {
        path: out.clone(),
        source,
    })?;
    let path = out.join(CONFIG_FILE);
    fs::write(&path, config.to_toml()?).map_err(|source| HarnessError::Io { path, source })?;
    let run = || config.seeds.iter().map(|&s| run_seed(config, s)).collect();
    if config.threads == 0 {
        run()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build()
            .map_err(|e| HarnessError::Config(e.to_string()))?
            .install(run)
    }
}

/// Trajectories of a uniformly random policy; used to estimate a
/// random-behaviour baseline return.
pub fn random_policy_returns(env: &dyn Environment, episodes: usize, seed: u64) -> Result<Vec<f64>, EnvError> {
    let spec = env.spec().clone();
    (0..episodes)
        .map(|e| {
            let rng = RefCell::new(ChaCha8Rng::seed_from_u64(derive_seed(seed, 0, 0, e as u64)));
            let policy = |_: &[f64]| -> Vec<f64> {
                let mut r = rng.borrow_mut();
                spec.action_low
                    .iter()
                    .zip(&spec.action_high)
                    .map(|(lo, hi)| r.random_range(*lo..*hi))
                    .collect()
            };
            rollout(env, policy, 0.0, derive_seed(seed, 1, 0, e as u64), Origin::Target).map(|t| t.episodic_return)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(algorithm: Algorithm) -> RunConfig {
        RunConfig {
            algorithm,
            env: "ridge-1d".into(),
            population_size: 3,
            parent_count: 2,
            total_training_steps: 400,
            eval_episodes: 2,
            hidden: vec![8],
            learner: Td3Hyper {
                batch_size: 16,
                ..Td3Hyper::default()
            },
            shared_capacity: 10_000,
            dual_capacity: 10_000,
            threads: 1,
            ..RunConfig::default()
        }
    }

    #[test]
    fn seeds_are_distinct_per_slot() {
        let a = derive_seed(7, STREAM_ROLLOUT, 3, 0);
        assert_ne!(a, derive_seed(7, STREAM_ROLLOUT, 3, 1));
        assert_ne!(a, derive_seed(7, STREAM_ROLLOUT, 4, 0));
        assert_ne!(a, derive_seed(7, STREAM_FITNESS, 3, 0));
        assert_ne!(a, derive_seed(8, STREAM_ROLLOUT, 3, 0));
        assert_eq!(a, derive_seed(7, STREAM_ROLLOUT, 3, 0));
    }

    #[test]
    fn config_validation() {
        assert!(small(Algorithm::ErlNormal).validate().is_ok());
        let mut c = small(Algorithm::NoPop);
        c.buffer_mode = BufferMode::Dual { mix_ratio: 0.5 };
        assert!(matches!(c.validate(), Err(HarnessError::Config(_))));
        let mut c = small(Algorithm::ErlAlways);
        c.parent_count = 4;
        assert!(c.validate().is_err());
        let mut c = small(Algorithm::ErlAlways);
        c.buffer_mode = BufferMode::Dual { mix_ratio: 0.0 };
        assert!(c.validate().is_err());
        let mut c = small(Algorithm::ParamNoise);
        c.parent_count = 0;
        assert!(c.validate().is_ok());
        let mut c = small(Algorithm::ErlAlways);
        c.env = "nowhere".into();
        assert_eq!(c.validate().unwrap_err().category(), "environment");
    }

    #[test]
    fn toml_round_trip() {
        let mut c = small(Algorithm::ErlAlwaysFirst);
        c.buffer_mode = BufferMode::Dual { mix_ratio: 0.25 };
        c.injection = Some(Injection {
            episodes_per_iteration: 2,
            policy_seed: 9,
            action_noise: 0.0,
        });
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
        assert!(RunConfig::from_toml("no_such_field = 1").is_err());
        let parsed = RunConfig::from_toml("algorithm = \"no_pop\"\n[learner]\nbatch_size = 32\n").unwrap();
        assert_eq!(parsed.learner.batch_size, 32);
        assert_eq!(parsed.learner.gamma, 0.99);
    }

    #[test]
    fn plan_worker_counts() {
        let mut c = small(Algorithm::ErlNormal);
        c.population_size = 10;
        assert_eq!(IterationPlan::for_config(&c, PhaseMask::FULL).episodes(), 12);
        c.algorithm = Algorithm::NoPop;
        let plan = IterationPlan::for_config(&c, PhaseMask::FULL);
        assert_eq!((plan.target_workers, plan.episodes()), (11, 11));
    }

    #[test]
    fn erl_iteration_collects_every_episode() {
        let mut state = RunState::new(small(Algorithm::ErlAlways), 1).unwrap();
        let row = state.run_iteration().unwrap();
        assert_eq!(row.fitness_list.as_ref().unwrap().len(), 3);
        assert_eq!(row.discrepancies.as_ref().unwrap().len(), 3);
        assert!(row.f_target.is_some());
        // Ridge episodes are always 100 steps: target, fitness, 3 individuals.
        assert_eq!(row.target_timesteps, 100);
        assert_eq!(row.collected_timesteps, 500);
        assert_eq!(state.buffer.len(), 500);
        assert_eq!(row.gradient_updates, 100);
        assert_eq!(state.training_steps, 100);
    }

    #[test]
    fn no_pop_clones_share_the_target() {
        let mut c = small(Algorithm::NoPop);
        c.total_training_steps = 0;
        let mut state = RunState::new(c, 2).unwrap();
        let before = state.learner.actor.clone();
        let row = state.run_iteration().unwrap();
        assert_eq!(row.collected_timesteps, 400);
        assert_eq!(row.gradient_updates, 0);
        assert_eq!(state.learner.actor, before);
        assert!(row.fitness_list.is_none());
    }

    #[test]
    fn param_noise_mean_tracks_target() {
        let mut state = RunState::new(small(Algorithm::ParamNoise), 3).unwrap();
        for _ in 0..3 {
            let actor_before = state.learner.actor.clone();
            state.run_iteration().unwrap();
            assert_eq!(state.population.as_ref().unwrap().mean, actor_before);
        }
    }

    #[test]
    fn zero_clock_runs_no_iterations() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small(Algorithm::ErlNormal);
        c.total_training_steps = 0;
        c.output_dir = dir.path().to_path_buf();
        let records = run_experiment(&c).unwrap();
        assert!(records[0].rows.is_empty());
        assert!(dir.path().join("seed_0").join(TARGET_CHECKPOINT).is_file());
    }

    #[test]
    fn clock_lands_on_total() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small(Algorithm::ErlNormal);
        c.total_training_steps = 250;
        c.output_dir = dir.path().to_path_buf();
        let record = run_seed(&c, 4).unwrap();
        let last = record.rows.last().unwrap();
        assert_eq!(last.training_steps, 250);
        let total: u64 = record.rows.iter().map(|r| r.gradient_updates).sum();
        assert_eq!(total, 250);
        let evals = record.rows.iter().filter(|r| r.target_eval_return.is_some()).count();
        assert_eq!(evals, record.rows.len() / 2);
        assert!(record.rows.iter().filter_map(|r| r.target_eval_return.map(|_| r.pop_mean_eval_return)).all(|p| p.is_some()));
    }
}
