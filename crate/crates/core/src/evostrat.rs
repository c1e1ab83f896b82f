//! Isotropic Gaussian evolution strategy with rank-weighted recombination.
//!
//! Each iteration samples `theta_i = theta_pop + sigma * eps_i`, evaluates the
//! individuals, and moves the mean by `sigma * sum_j w_j * eps_j` over the
//! ranked parents. The learner's actor joins recombination through its fake
//! noise `eps_target = (theta - theta_pop) / sigma`; the strategy decides how
//! strongly the population is pulled toward it.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::approximator::ParamVector;
use crate::envsim::Trajectory;

pub const DEFAULT_POPULATION_SIZE: usize = 10;
pub const DEFAULT_PARENT_COUNT: usize = 5;
pub const DEFAULT_SIGMA: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EsError {
    #[error("invalid evolution strategy setting: {0}")]
    Config(String),
    #[error("fitness of {0} not recorded for this iteration")]
    MissingFitness(String),
    #[error("{0}")]
    Domain(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Rank the target together with the population; keep the top `K + 1`.
    Normal,
    /// Top `K` of the population, target inserted at its fitness rank.
    Always,
    /// Top `K` of the population, target always ranked first.
    AlwaysFirst,
    /// The mean is pinned to the target actor and never recombined.
    ParamNoise,
}

/// `w_i = (ln(k + 0.5) - ln i) / sum_j (ln(k + 0.5) - ln j)` for `i = 1..=k`.
pub fn recombination_weights(k_hat: usize) -> Result<Vec<f64>, EsError> {
    if k_hat == 0 {
        return Err(EsError::Domain("recombination needs at least one parent".into()));
    }
    let top = (k_hat as f64 + 0.5).ln();
    let raw: Vec<f64> = (1..=k_hat).map(|i| top - (i as f64).ln()).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParentSource {
    Population(usize),
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Parent {
    pub source: ParentSource,
    pub fitness: f64,
}

/// Parents in recombination order (first entry gets the largest weight).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParentSet {
    pub parents: Vec<Parent>,
}

impl ParentSet {
    pub fn len(&self) -> usize {
        self.parents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parents.is_empty()
    }

    /// 1-based rank of the target, if selected.
    pub fn target_rank(&self) -> Option<usize> {
        self.parents
            .iter()
            .position(|p| p.source == ParentSource::Target)
            .map(|i| i + 1)
    }

    pub fn fitnesses(&self) -> Vec<f64> {
        self.parents.iter().map(|p| p.fitness).collect()
    }
}

#[derive(Debug, Clone)]
pub struct PopulationState {
    pub mean: ParamVector,
    pub sigma: f64,
    pub size: usize,
    pub parent_count: usize,
    pub strategy: Strategy,
    noises: Vec<Vec<f64>>,
    fitnesses: Vec<Option<f64>>,
    target_noise: Option<Vec<f64>>,
    target_params: Option<ParamVector>,
    target_fitness: Option<f64>,
}

impl PopulationState {
    pub fn new(
        mean: ParamVector,
        sigma: f64,
        size: usize,
        parent_count: usize,
        strategy: Strategy,
    ) -> Result<Self, EsError> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(EsError::Config(format!("sigma must be positive, got {sigma}")));
        }
        if size == 0 {
            return Err(EsError::Config("population size must be at least 1".into()));
        }
        if strategy != Strategy::ParamNoise && (parent_count == 0 || parent_count > size) {
            return Err(EsError::Config(format!(
                "parent count {parent_count} must lie in 1..={size}"
            )));
        }
        Ok(Self {
            mean,
            sigma,
            size,
            parent_count,
            strategy,
            noises: Vec::new(),
            fitnesses: Vec::new(),
            target_noise: None,
            target_params: None,
            target_fitness: None,
        })
    }

    pub fn noises(&self) -> &[Vec<f64>] {
        &self.noises
    }

    pub fn target_noise(&self) -> Option<&[f64]> {
        self.target_noise.as_deref()
    }

    pub fn fitnesses(&self) -> &[Option<f64>] {
        &self.fitnesses
    }

    pub fn target_fitness(&self) -> Option<f64> {
        self.target_fitness
    }

    /// `theta_pop + sigma * eps`.
    pub fn individual(&self, noise: &[f64]) -> ParamVector {
        ParamVector(
            self.mean
                .iter()
                .zip(noise)
                .map(|(m, e)| m + self.sigma * e)
                .collect(),
        )
    }

    /// Draws fresh standard-normal noises and returns the `N` individuals.
    /// Clears all fitness information from the previous iteration.
    pub fn sample_population<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<ParamVector> {
        let dim = self.mean.len();
        self.noises = (0..self.size)
            .map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        self.fitnesses = vec![None; self.size];
        self.target_noise = None;
        self.target_params = None;
        self.target_fitness = None;
        self.noises.iter().map(|e| self.individual(e)).collect()
    }

    pub fn set_fitness(&mut self, index: usize, fitness: f64) -> Result<(), EsError> {
        let slot = self
            .fitnesses
            .get_mut(index)
            .ok_or_else(|| EsError::Domain(format!("no individual {index} this iteration")))?;
        *slot = Some(fitness);
        Ok(())
    }

    /// Records the target actor and computes its fake noise
    /// `(theta - theta_pop) / sigma`.
    pub fn set_target(&mut self, theta: &ParamVector, fitness: f64) -> Result<(), EsError> {
        if theta.len() != self.mean.len() {
            return Err(EsError::Domain(format!(
                "target has {} parameters, population mean has {}",
                theta.len(),
                self.mean.len()
            )));
        }
        self.target_noise = Some(
            theta
                .iter()
                .zip(self.mean.iter())
                .map(|(t, m)| (t - m) / self.sigma)
                .collect(),
        );
        self.target_params = Some(theta.clone());
        self.target_fitness = Some(fitness);
        Ok(())
    }

    /// Sets the mean to `theta` directly (parameter-noise baseline).
    pub fn pin_mean(&mut self, theta: &ParamVector) {
        self.mean = theta.clone();
    }

    pub fn mean_fitness(&self) -> Option<f64> {
        let known: Option<Vec<f64>> = self.fitnesses.iter().copied().collect();
        let known = known?;
        if known.is_empty() {
            return None;
        }
        Some(known.iter().sum::<f64>() / known.len() as f64)
    }

    fn ranked_population(&self) -> Result<Vec<Parent>, EsError> {
        if self.fitnesses.len() != self.size {
            return Err(EsError::MissingFitness("population (not sampled)".into()));
        }
        let mut ranked = self
            .fitnesses
            .iter()
            .enumerate()
            .map(|(i, f)| {
                f.map(|fitness| Parent {
                    source: ParentSource::Population(i),
                    fitness,
                })
                .ok_or_else(|| EsError::MissingFitness(format!("individual {i}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        // Stable: equal fitness keeps ascending population index.
        ranked.sort_by(|a, b| b.fitness.total_cmp(&a.fitness));
        Ok(ranked)
    }

    /// Picks and orders the parents for this iteration's update.
    pub fn select_parents(&self) -> Result<ParentSet, EsError> {
        if self.strategy == Strategy::ParamNoise {
            return Ok(ParentSet::default());
        }
        let target_fitness = self
            .target_fitness
            .ok_or_else(|| EsError::MissingFitness("target".into()))?;
        let target = Parent {
            source: ParentSource::Target,
            fitness: target_fitness,
        };
        let ranked = self.ranked_population()?;
        let k = self.parent_count;
        let parents = match self.strategy {
            Strategy::Normal => {
                let mut all = ranked;
                all.push(target);
                // Stable sort: the target, appended last, loses ties.
                all.sort_by(|a, b| b.fitness.total_cmp(&a.fitness));
                all.truncate(k + 1);
                all
            }
            Strategy::Always => {
                let mut top: Vec<Parent> = ranked.into_iter().take(k).collect();
                let at = top.iter().take_while(|p| p.fitness >= target_fitness).count();
                top.insert(at, target);
                top
            }
            Strategy::AlwaysFirst => {
                let mut top = Vec::with_capacity(k + 1);
                top.push(target);
                top.extend(ranked.into_iter().take(k));
                top
            }
            Strategy::ParamNoise => unreachable!(),
        };
        Ok(ParentSet { parents })
    }

    fn noise_of(&self, source: ParentSource) -> Result<&[f64], EsError> {
        match source {
            ParentSource::Population(i) => self
                .noises
                .get(i)
                .map(Vec::as_slice)
                .ok_or_else(|| EsError::Domain(format!("no noise for individual {i}"))),
            ParentSource::Target => self
                .target_noise
                .as_deref()
                .ok_or_else(|| EsError::MissingFitness("target".into())),
        }
    }

    /// Moves the mean by `sigma * sum_j w_j * eps_j`. Under the parameter-noise
    /// strategy the mean is overwritten with the recorded target actor instead.
    pub fn es_update(&mut self, parents: &ParentSet) -> Result<(), EsError> {
        if self.strategy == Strategy::ParamNoise {
            let theta = self
                .target_params
                .clone()
                .ok_or_else(|| EsError::MissingFitness("target".into()))?;
            self.mean = theta;
            return Ok(());
        }
        let weights = recombination_weights(parents.len())?;
        let mut step = vec![0.0; self.mean.len()];
        for (parent, w) in parents.parents.iter().zip(&weights) {
            let noise = self.noise_of(parent.source)?;
            for (s, e) in step.iter_mut().zip(noise) {
                *s += w * e;
            }
        }
        for (m, s) in self.mean.iter_mut().zip(&step) {
            *m += self.sigma * s;
        }
        Ok(())
    }
}

/// Mean over the individual's own trajectory of the per-step mean squared
/// action difference between the target policy and the individual.
pub fn action_discrepancy<T, B>(target: T, individual: B, trajectory: &Trajectory) -> Result<f64, EsError>
where
    T: Fn(&[f64]) -> Vec<f64>,
    B: Fn(&[f64]) -> Vec<f64>,
{
    if trajectory.is_empty() {
        return Err(EsError::Domain("action discrepancy of an empty trajectory".into()));
    }
    let mut total = 0.0;
    for state in trajectory.states() {
        let a = target(state);
        let b = individual(state);
        if a.len() != b.len() || a.is_empty() {
            return Err(EsError::Domain("policies disagree on action dimension".into()));
        }
        total += a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    }
    Ok(total / trajectory.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsim::{Origin, Transition};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn population(strategy: Strategy, pop_fitness: &[f64], target: f64, k: usize) -> PopulationState {
        let mut pop = PopulationState::new(ParamVector(vec![0.0; 3]), 0.1, pop_fitness.len(), k, strategy).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        pop.sample_population(&mut rng);
        for (i, f) in pop_fitness.iter().enumerate() {
            pop.set_fitness(i, *f).unwrap();
        }
        pop.set_target(&ParamVector(vec![0.05, 0.0, -0.05]), target).unwrap();
        pop
    }

    #[test]
    fn weights_single_parent() {
        assert_eq!(recombination_weights(1).unwrap(), vec![1.0]);
        assert!(recombination_weights(0).is_err());
    }

    #[test]
    fn weights_for_three_parents() {
        let w = recombination_weights(3).unwrap();
        let expected = [0.6370425712412168, 0.28457025743803294, 0.07838717132075033];
        for (a, b) in w.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn weights_for_default_parents() {
        let w = recombination_weights(5).unwrap();
        let expected = [
            0.45627264690340597,
            0.2707530970017852,
            0.16223111715866978,
            0.08523354710016448,
            0.025509591835974777,
        ];
        for (a, b) in w.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn always_first_keeps_worst_target_first() {
        let pop = population(Strategy::AlwaysFirst, &[5.0, 4.0, 3.0, 2.0, 1.0, 0.5], -100.0, 5);
        let parents = pop.select_parents().unwrap();
        assert_eq!(parents.target_rank(), Some(1));
        assert_eq!(parents.len(), 6);
        assert_eq!(parents.fitnesses()[1..], [5.0, 4.0, 3.0, 2.0, 1.0]);
    }

    #[test]
    fn always_inserts_at_earned_rank() {
        let pop = population(Strategy::Always, &[5.0, 4.0, 3.0, 2.0, 1.0, 0.0, -1.0], 3.5, 5);
        let parents = pop.select_parents().unwrap();
        assert_eq!(parents.fitnesses(), vec![5.0, 4.0, 3.5, 3.0, 2.0, 1.0]);
        assert_eq!(parents.target_rank(), Some(3));

        // Worst-fitness target is still kept, at the end.
        let pop = population(Strategy::Always, &[5.0, 4.0, 3.0, 2.0, 1.0, 0.0], -9.0, 5);
        assert_eq!(pop.select_parents().unwrap().target_rank(), Some(6));
    }

    #[test]
    fn normal_can_drop_the_target() {
        let pop = population(Strategy::Normal, &[5.0, 4.0, 3.0, 2.0, 1.0, 0.0], -1.0, 5);
        let parents = pop.select_parents().unwrap();
        assert_eq!(parents.target_rank(), None);
        assert_eq!(parents.len(), 6);
    }

    #[test]
    fn normal_matches_always_first_when_target_leads() {
        let fits = [5.0, 4.0, 3.0, 2.0, 1.0, 0.0];
        let normal = population(Strategy::Normal, &fits, 10.0, 5).select_parents().unwrap();
        let first = population(Strategy::AlwaysFirst, &fits, 10.0, 5).select_parents().unwrap();
        assert_eq!(normal, first);
    }

    #[test]
    fn ties_go_against_the_target() {
        let fits = [3.0, 3.0, 1.0];
        let parents = population(Strategy::Normal, &fits, 3.0, 2).select_parents().unwrap();
        assert_eq!(
            parents.parents.iter().map(|p| p.source).collect::<Vec<_>>(),
            vec![ParentSource::Population(0), ParentSource::Population(1), ParentSource::Target]
        );
        let parents = population(Strategy::Always, &fits, 3.0, 2).select_parents().unwrap();
        assert_eq!(parents.target_rank(), Some(3));
    }

    #[test]
    fn missing_fitness_is_a_sequencing_error() {
        let mut pop = PopulationState::new(ParamVector(vec![0.0; 2]), 0.1, 3, 2, Strategy::Always).unwrap();
        pop.sample_population(&mut ChaCha8Rng::seed_from_u64(0));
        pop.set_fitness(0, 1.0).unwrap();
        pop.set_target(&ParamVector(vec![0.0; 2]), 1.0).unwrap();
        assert!(matches!(pop.select_parents(), Err(EsError::MissingFitness(_))));
    }

    #[test]
    fn individuals_reconstruct_exactly() {
        let mut pop = PopulationState::new(ParamVector(vec![0.3, -1.2, 4.0]), 0.01, 4, 2, Strategy::Normal).unwrap();
        let individuals = pop.sample_population(&mut ChaCha8Rng::seed_from_u64(3));
        for (ind, noise) in individuals.iter().zip(pop.noises()) {
            for ((x, m), e) in ind.iter().zip(pop.mean.iter()).zip(noise) {
                assert_eq!(*x, m + pop.sigma * e);
            }
        }
    }

    #[test]
    fn fake_noise_definition() {
        let mut pop = PopulationState::new(ParamVector(vec![1.0, 2.0]), 0.5, 2, 1, Strategy::Always).unwrap();
        pop.sample_population(&mut ChaCha8Rng::seed_from_u64(0));
        pop.set_target(&ParamVector(vec![2.0, 1.0]), 0.0).unwrap();
        assert_eq!(pop.target_noise().unwrap(), &[2.0, -2.0]);
    }

    #[test]
    fn update_with_single_parent_and_zero_noise() {
        let mut pop = PopulationState::new(ParamVector(vec![1.0, 1.0]), 0.5, 1, 1, Strategy::Always).unwrap();
        pop.sample_population(&mut ChaCha8Rng::seed_from_u64(0));
        let noise = pop.noises()[0].clone();
        let single = ParentSet {
            parents: vec![Parent {
                source: ParentSource::Population(0),
                fitness: 0.0,
            }],
        };
        pop.es_update(&single).unwrap();
        assert_eq!(pop.mean.0, vec![1.0 + 0.5 * noise[0], 1.0 + 0.5 * noise[1]]);

        // The target's fake noise is zero when theta equals the mean.
        let mean = pop.mean.clone();
        pop.set_target(&mean, 0.0).unwrap();
        let target_only = ParentSet {
            parents: vec![Parent {
                source: ParentSource::Target,
                fitness: 0.0,
            }],
        };
        pop.es_update(&target_only).unwrap();
        assert_eq!(pop.mean, mean);
    }

    #[test]
    fn param_noise_copies_target() {
        let mut pop = PopulationState::new(ParamVector(vec![0.0; 2]), 0.01, 3, 0, Strategy::ParamNoise).unwrap();
        pop.sample_population(&mut ChaCha8Rng::seed_from_u64(0));
        pop.set_target(&ParamVector(vec![0.7, -0.7]), 1.0).unwrap();
        let parents = pop.select_parents().unwrap();
        assert!(parents.is_empty());
        pop.es_update(&parents).unwrap();
        assert_eq!(pop.mean.0, vec![0.7, -0.7]);
    }

    #[test]
    fn sample_spread_matches_sigma() {
        let mut pop = PopulationState::new(ParamVector(vec![0.0; 8]), 0.01, 1000, 5, Strategy::Normal).unwrap();
        let individuals = pop.sample_population(&mut ChaCha8Rng::seed_from_u64(17));
        for d in 0..8 {
            let var = individuals.iter().map(|x| x[d] * x[d]).sum::<f64>() / 1000.0;
            let std = var.sqrt();
            assert!((std - 0.01).abs() < 0.05 * 0.01, "dim {d}: {std}");
        }
    }

    #[test]
    fn invalid_sigma() {
        assert!(PopulationState::new(ParamVector(vec![0.0]), 0.0, 2, 1, Strategy::Normal).is_err());
        assert!(PopulationState::new(ParamVector(vec![0.0]), 0.1, 2, 3, Strategy::Normal).is_err());
    }

    fn trajectory(states: &[f64]) -> Trajectory {
        Trajectory {
            transitions: states
                .iter()
                .map(|&s| Transition {
                    state: vec![s],
                    action: vec![0.0],
                    reward: 0.0,
                    next_state: vec![s],
                    done: false,
                    origin: Origin::Population(0),
                })
                .collect(),
            episodic_return: 0.0,
            clip_events: 0,
        }
    }

    #[test]
    fn discrepancy_cases() {
        let traj = trajectory(&[0.1, -0.4, 2.0]);
        let mu = |s: &[f64]| vec![s[0].tanh()];
        assert_eq!(action_discrepancy(mu, mu, &traj).unwrap(), 0.0);
        let shifted = |s: &[f64]| vec![s[0].tanh() + 0.5];
        assert!((action_discrepancy(mu, shifted, &traj).unwrap() - 0.25).abs() < 1e-15);
        assert!(action_discrepancy(mu, mu, &trajectory(&[])).is_err());
    }
}
