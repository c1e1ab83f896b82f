//! Evolution-strategy population coupled to an off-policy TD3 learner
//! through a shared or a double replay buffer.

pub mod approximator;
pub mod envsim;
pub mod replay;
pub mod td3core;
pub mod evostrat;
pub mod propcheck;
pub mod metrics;
pub mod harness;
