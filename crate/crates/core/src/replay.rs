//! Bounded FIFO transition stores.
//!
//! [`ReplayStore`] is the single shared buffer used by classic ERL and the
//! no-population baseline. [`DualReplayStore`] keeps target-actor and
//! population experience apart and draws a fixed fraction of every batch from
//! the target side.

use std::collections::VecDeque;
use std::io::{self, Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::envsim::{Origin, Transition};

/// Shared buffer size for single-buffer runs.
pub const DEFAULT_SHARED_CAPACITY: usize = 1_000_000;
/// Size of each half of a [`DualReplayStore`].
pub const DEFAULT_DUAL_CAPACITY: usize = 500_000;
pub const DEFAULT_BATCH_SIZE: usize = 256;

const SNAPSHOT_MAGIC: &[u8; 8] = b"ERLRPLY\0";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("replay store not ready: {0}")]
    NotReady(String),
    #[error("transition rejected: {what} has {got} dimensions, store expects {expected}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid replay configuration: {0}")]
    Config(String),
    #[error("bad replay snapshot: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTransition {
    /// Insertion counter, monotone over the store's lifetime.
    pub seq: u64,
    pub transition: Transition,
}

#[derive(Debug, Clone)]
pub struct ReplayStore {
    capacity: usize,
    state_dim: usize,
    action_dim: usize,
    entries: VecDeque<StoredTransition>,
    next_seq: u64,
}

impl ReplayStore {
    pub fn new(capacity: usize, state_dim: usize, action_dim: usize) -> Result<Self, ReplayError> {
        if capacity == 0 {
            return Err(ReplayError::Config("capacity must be at least 1".into()));
        }
        Ok(Self {
            capacity,
            state_dim,
            action_dim,
            entries: VecDeque::with_capacity(capacity.min(1 << 16)),
            next_seq: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of transitions ever pushed.
    pub fn total_pushed(&self) -> u64 {
        self.next_seq
    }

    pub fn entries(&self) -> impl Iterator<Item = &StoredTransition> {
        self.entries.iter()
    }

    pub fn push(&mut self, transition: Transition) -> Result<(), ReplayError> {
        for (what, expected, got) in [
            ("state", self.state_dim, transition.state.len()),
            ("next_state", self.state_dim, transition.next_state.len()),
            ("action", self.action_dim, transition.action.len()),
        ] {
            if expected != got {
                return Err(ReplayError::Dimension { what, expected, got });
            }
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(StoredTransition {
            seq: self.next_seq,
            transition,
        });
        self.next_seq += 1;
        Ok(())
    }

    /// Uniform draws with replacement.
    pub fn sample<'a, R: Rng + ?Sized>(
        &'a self,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Vec<&'a Transition>, ReplayError> {
        if self.entries.is_empty() {
            return Err(ReplayError::NotReady("store is empty".into()));
        }
        if batch_size == 0 {
            return Err(ReplayError::Config("batch size must be at least 1".into()));
        }
        let n = self.entries.len();
        Ok((0..batch_size)
            .map(|_| &self.entries[rng.random_range(0..n)].transition)
            .collect())
    }

    /// Writes the store as a versioned little-endian snapshot.
    pub fn write_snapshot<W: Write>(&self, mut out: W) -> Result<(), ReplayError> {
        out.write_all(SNAPSHOT_MAGIC)?;
        out.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        out.write_all(&(self.capacity as u64).to_le_bytes())?;
        out.write_all(&(self.state_dim as u32).to_le_bytes())?;
        out.write_all(&(self.action_dim as u32).to_le_bytes())?;
        out.write_all(&self.next_seq.to_le_bytes())?;
        out.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for entry in &self.entries {
            let t = &entry.transition;
            out.write_all(&entry.seq.to_le_bytes())?;
            let (tag, index) = match t.origin {
                Origin::Target => (0u8, 0u64),
                Origin::Population(i) => (1u8, i as u64),
            };
            out.write_all(&[tag, t.done as u8])?;
            out.write_all(&index.to_le_bytes())?;
            out.write_all(&t.reward.to_le_bytes())?;
            for v in t.state.iter().chain(&t.action).chain(&t.next_state) {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(mut input: R) -> Result<Self, ReplayError> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(ReplayError::Snapshot("missing header".into()));
        }
        let version = read_u32(&mut input)?;
        if version != SNAPSHOT_VERSION {
            return Err(ReplayError::Snapshot(format!("unsupported version {version}")));
        }
        let capacity = read_u64(&mut input)? as usize;
        let state_dim = read_u32(&mut input)? as usize;
        let action_dim = read_u32(&mut input)? as usize;
        let next_seq = read_u64(&mut input)?;
        let count = read_u64(&mut input)? as usize;
        if count > capacity {
            return Err(ReplayError::Snapshot(format!("{count} entries exceed capacity {capacity}")));
        }
        let mut store = Self::new(capacity, state_dim, action_dim)?;
        for _ in 0..count {
            let seq = read_u64(&mut input)?;
            let mut flags = [0u8; 2];
            input.read_exact(&mut flags)?;
            let index = read_u64(&mut input)?;
            let origin = match flags[0] {
                0 => Origin::Target,
                1 => Origin::Population(index as usize),
                tag => return Err(ReplayError::Snapshot(format!("bad origin tag {tag}"))),
            };
            let reward = read_f64(&mut input)?;
            let mut read_vec = |n: usize| (0..n).map(|_| read_f64(&mut input)).collect::<Result<Vec<_>, _>>();
            let state = read_vec(state_dim)?;
            let action = read_vec(action_dim)?;
            let next_state = read_vec(state_dim)?;
            store.entries.push_back(StoredTransition {
                seq,
                transition: Transition {
                    state,
                    action,
                    reward,
                    next_state,
                    done: flags[1] != 0,
                    origin,
                },
            });
        }
        store.next_seq = next_seq;
        Ok(store)
    }
}

fn read_u32<R: Read>(input: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(input: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(input: &mut R) -> io::Result<f64> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Number of target-side entries in a mixed batch of `batch_size`:
/// `round(m * B)` with ties rounded up.
pub fn target_share(mix_ratio: f64, batch_size: usize) -> usize {
    ((mix_ratio * batch_size as f64) + 0.5).floor() as usize
}

/// Separate stores for target-actor (`D_mu`) and population (`D_pop`) data.
#[derive(Debug, Clone)]
pub struct DualReplayStore {
    pub target: ReplayStore,
    pub population: ReplayStore,
    mix_ratio: f64,
}

impl DualReplayStore {
    /// `mix_ratio` is the fraction of each batch drawn from the target store.
    /// `1.0` is accepted as the degenerate target-only limit.
    pub fn new(
        capacity: usize,
        state_dim: usize,
        action_dim: usize,
        mix_ratio: f64,
    ) -> Result<Self, ReplayError> {
        if !(mix_ratio > 0.0 && mix_ratio <= 1.0) {
            return Err(ReplayError::Config(format!("mix ratio {mix_ratio} outside (0, 1]")));
        }
        Ok(Self {
            target: ReplayStore::new(capacity, state_dim, action_dim)?,
            population: ReplayStore::new(capacity, state_dim, action_dim)?,
            mix_ratio,
        })
    }

    pub fn mix_ratio(&self) -> f64 {
        self.mix_ratio
    }

    /// Routes by origin: target data to `D_mu`, everything else to `D_pop`.
    pub fn push(&mut self, transition: Transition) -> Result<(), ReplayError> {
        if transition.origin.is_target() {
            self.target.push(transition)
        } else {
            self.population.push(transition)
        }
    }

    pub fn len(&self) -> usize {
        self.target.len() + self.population.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Exactly `round(m * B)` target entries and the rest from the population
    /// store, shuffled together.
    pub fn sample_mixed<'a, R: Rng + ?Sized>(
        &'a self,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Vec<&'a Transition>, ReplayError> {
        let n_target = target_share(self.mix_ratio, batch_size);
        let n_pop = batch_size - n_target;
        if n_target > 0 && self.target.is_empty() {
            return Err(ReplayError::NotReady("target store is empty".into()));
        }
        if n_pop > 0 && self.population.is_empty() {
            return Err(ReplayError::NotReady("population store is empty".into()));
        }
        let mut batch = Vec::with_capacity(batch_size);
        if n_target > 0 {
            batch.extend(self.target.sample(n_target, rng)?);
        }
        if n_pop > 0 {
            batch.extend(self.population.sample(n_pop, rng)?);
        }
        batch.shuffle(rng);
        Ok(batch)
    }
}

/// Either buffer layout, as seen by the learner.
#[derive(Debug, Clone)]
pub enum ReplaySource {
    Single(ReplayStore),
    Dual(DualReplayStore),
}

impl ReplaySource {
    pub fn push(&mut self, transition: Transition) -> Result<(), ReplayError> {
        match self {
            ReplaySource::Single(store) => store.push(transition),
            ReplaySource::Dual(dual) => dual.push(transition),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ReplaySource::Single(store) => store.len(),
            ReplaySource::Dual(dual) => dual.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Warm-up rule: every store that contributes to a batch must hold at
    /// least `batch_size` transitions.
    pub fn is_ready(&self, batch_size: usize) -> bool {
        match self {
            ReplaySource::Single(store) => store.len() >= batch_size,
            ReplaySource::Dual(dual) => {
                let n_target = target_share(dual.mix_ratio, batch_size);
                (n_target == 0 || dual.target.len() >= batch_size)
                    && (n_target == batch_size || dual.population.len() >= batch_size)
            }
        }
    }

    pub fn sample_batch<'a, R: Rng + ?Sized>(
        &'a self,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Vec<&'a Transition>, ReplayError> {
        match self {
            ReplaySource::Single(store) => store.sample(batch_size, rng),
            ReplaySource::Dual(dual) => dual.sample_mixed(batch_size, rng),
        }
    }
}

/// `(target, population)` entry counts of a batch.
pub fn origin_counts<'a, I>(batch: I) -> (usize, usize)
where
    I: IntoIterator<Item = &'a Transition>,
{
    batch.into_iter().fold((0, 0), |(t, p), tr| {
        if tr.origin.is_target() {
            (t + 1, p)
        } else {
            (t, p + 1)
        }
    })
}
