//! Numerical checks of the mixed-data policy-gradient identity and of the
//! Bellman contraction under on-policy versus mismatched weightings.
//!
//! The identity: weighting states by `(1 - a) d_mu + a d_b` when
//! differentiating `Q_mu(s, mu_theta(s))` gives the same gradient as weighting
//! by `d_mu` alone and differentiating
//! `Q_a(s, a) = Q_mu(s, a) + a (rho(s) - 1) Q_mu(s, a)`, `rho = d_b / d_mu`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PropError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("singular linear system: {0}")]
    Singular(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Finite MDP with a continuous action space reached through a finite grid:
/// a continuous action drives the dynamics of its nearest grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct MdpInstance {
    pub action_grid: Vec<Vec<f64>>,
    /// `kernel[s][a][s']`.
    pub kernel: Vec<Vec<Vec<f64>>>,
    /// `reward[s][a]`.
    pub reward: Vec<Vec<f64>>,
    pub gamma: f64,
    pub start: Vec<f64>,
}

/// A deterministic continuous policy on a finite state set: one action per state.
pub type PolicyTable = Vec<Vec<f64>>;

fn random_simplex<R: Rng + ?Sized>(rng: &mut R, n: usize, floor: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| floor + rng.random::<f64>()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

impl MdpInstance {
    pub fn n_states(&self) -> usize {
        self.kernel.len()
    }

    pub fn n_actions(&self) -> usize {
        self.action_grid.len()
    }

    pub fn validate(&self) -> Result<(), PropError> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(PropError::Domain(format!("gamma {} must lie in [0, 1)", self.gamma)));
        }
        let n = self.n_states();
        if n == 0 || self.start.len() != n || self.reward.len() != n {
            return Err(PropError::Domain("inconsistent state counts".into()));
        }
        for (s, rows) in self.kernel.iter().enumerate() {
            if rows.len() != self.n_actions() || self.reward[s].len() != self.n_actions() {
                return Err(PropError::Domain(format!("state {s} has the wrong action count")));
            }
            for row in rows {
                let total: f64 = row.iter().sum();
                if row.len() != n || (total - 1.0).abs() > 1e-12 || row.iter().any(|p| *p < 0.0) {
                    return Err(PropError::Domain(format!("kernel row of state {s} is not a distribution")));
                }
            }
        }
        Ok(())
    }

    /// Dense random MDP with scalar grid actions spread over `[-1, 1]`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, n_states: usize, n_actions: usize, gamma: f64) -> Self {
        let action_grid = (0..n_actions)
            .map(|i| {
                let t = if n_actions == 1 { 0.0 } else { i as f64 / (n_actions - 1) as f64 };
                vec![-1.0 + 2.0 * t]
            })
            .collect();
        Self {
            action_grid,
            kernel: (0..n_states)
                .map(|_| (0..n_actions).map(|_| random_simplex(rng, n_states, 0.05)).collect())
                .collect(),
            reward: (0..n_states)
                .map(|_| (0..n_actions).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect(),
            gamma,
            start: random_simplex(rng, n_states, 0.1),
        }
    }

    pub fn grid_index(&self, action: &[f64]) -> usize {
        let dist = |g: &[f64]| g.iter().zip(action).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        (0..self.n_actions())
            .min_by(|&a, &b| dist(&self.action_grid[a]).total_cmp(&dist(&self.action_grid[b])))
            .expect("non-empty action grid")
    }

    /// State-to-state kernel under a deterministic policy.
    pub fn policy_kernel(&self, policy: &PolicyTable) -> DMatrix<f64> {
        let n = self.n_states();
        DMatrix::from_fn(n, n, |s, t| self.kernel[s][self.grid_index(&policy[s])][t])
    }

    /// Grid action index chosen by the policy in each state.
    pub fn policy_actions(&self, policy: &PolicyTable) -> Vec<usize> {
        policy.iter().map(|a| self.grid_index(a)).collect()
    }
}

/// Normalized discounted state visitation `(1 - g) sum_t g^t P(s_t = s)`,
/// solved exactly from `(I - g P^T) x = start`.
pub fn visitation(mdp: &MdpInstance, policy: &PolicyTable) -> Result<Vec<f64>, PropError> {
    mdp.validate()?;
    let n = mdp.n_states();
    let p = mdp.policy_kernel(policy);
    let system = DMatrix::identity(n, n) - p.transpose() * mdp.gamma;
    let rhs = DVector::from_vec(mdp.start.clone());
    let x = system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| PropError::Singular("visitation system".into()))?;
    let total: f64 = x.iter().sum();
    Ok(x.iter().map(|v| v / total).collect())
}

/// Stationary distribution of the policy's state chain (`d P = d`, `sum d = 1`).
pub fn stationary_distribution(mdp: &MdpInstance, policy: &PolicyTable) -> Result<Vec<f64>, PropError> {
    mdp.validate()?;
    let n = mdp.n_states();
    let p = mdp.policy_kernel(policy);
    let mut system = p.transpose() - DMatrix::identity(n, n);
    for c in 0..n {
        system[(n - 1, c)] = 1.0;
    }
    let mut rhs = DVector::zeros(n);
    rhs[n - 1] = 1.0;
    let d = system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| PropError::Singular("stationary distribution".into()))?;
    Ok(d.iter().copied().collect())
}

/// Exact `Q_mu(s, a)` on the grid by solving `(I - g P_mu) V = r_mu`.
pub fn policy_q_values(mdp: &MdpInstance, policy: &PolicyTable) -> Result<Vec<Vec<f64>>, PropError> {
    mdp.validate()?;
    let n = mdp.n_states();
    let actions = mdp.policy_actions(policy);
    let p = mdp.policy_kernel(policy);
    let r = DVector::from_fn(n, |s, _| mdp.reward[s][actions[s]]);
    let v = (DMatrix::identity(n, n) - p * mdp.gamma)
        .lu()
        .solve(&r)
        .ok_or_else(|| PropError::Singular("policy evaluation".into()))?;
    Ok((0..n)
        .map(|s| {
            (0..mdp.n_actions())
                .map(|a| {
                    let next: f64 = (0..n).map(|t| mdp.kernel[s][a][t] * v[t]).sum();
                    mdp.reward[s][a] + mdp.gamma * next
                })
                .collect()
        })
        .collect())
}

/// On-policy Bellman operator on a tabular `Q[s][a]`.
pub fn bellman_apply(mdp: &MdpInstance, policy: &PolicyTable, q: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let actions = mdp.policy_actions(policy);
    let n = mdp.n_states();
    (0..n)
        .map(|s| {
            (0..mdp.n_actions())
                .map(|a| {
                    let next: f64 = (0..n).map(|t| mdp.kernel[s][a][t] * q[t][actions[t]]).sum();
                    mdp.reward[s][a] + mdp.gamma * next
                })
                .collect()
        })
        .collect()
}

/// `||q1 - q2||_d` with `d` over state-action pairs.
pub fn weighted_distance(d: &[Vec<f64>], q1: &[Vec<f64>], q2: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for ((ds, a), b) in d.iter().zip(q1).zip(q2) {
        for ((w, x), y) in ds.iter().zip(a).zip(b) {
            total += w * (x - y) * (x - y);
        }
    }
    total.sqrt()
}

/// Puts each state's mass on the action the policy takes there.
pub fn on_policy_pairs(mdp: &MdpInstance, policy: &PolicyTable, state_dist: &[f64]) -> Vec<Vec<f64>> {
    let actions = mdp.policy_actions(policy);
    state_dist
        .iter()
        .enumerate()
        .map(|(s, &w)| {
            let mut row = vec![0.0; mdp.n_actions()];
            row[actions[s]] = w;
            row
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct ContractionReport {
    pub gamma: f64,
    pub ratios: Vec<f64>,
    pub max_ratio: f64,
}

impl ContractionReport {
    pub fn contracts(&self) -> bool {
        self.max_ratio <= self.gamma
    }
}

/// `||B Q - B Q'||_d / ||Q - Q'||_d` for one pair (0 when `Q = Q'`).
pub fn contraction_ratio(
    mdp: &MdpInstance,
    policy: &PolicyTable,
    d: &[Vec<f64>],
    q1: &[Vec<f64>],
    q2: &[Vec<f64>],
) -> f64 {
    let before = weighted_distance(d, q1, q2);
    if before == 0.0 {
        return 0.0;
    }
    weighted_distance(d, &bellman_apply(mdp, policy, q1), &bellman_apply(mdp, policy, q2)) / before
}

fn random_table<R: Rng + ?Sized>(rng: &mut R, n: usize, m: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..m).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect()
}

/// Measures the contraction ratio over `pairs` random `(Q, Q')` tables.
pub fn check_contraction<R: Rng + ?Sized>(
    mdp: &MdpInstance,
    policy: &PolicyTable,
    d: &[Vec<f64>],
    pairs: usize,
    rng: &mut R,
) -> Result<ContractionReport, PropError> {
    mdp.validate()?;
    let (n, m) = (mdp.n_states(), mdp.n_actions());
    if d.len() != n || d.iter().any(|row| row.len() != m) {
        return Err(PropError::Domain("distribution shape does not match the MDP".into()));
    }
    let ratios: Vec<f64> = (0..pairs)
        .map(|_| {
            let q1 = random_table(rng, n, m, 10.0);
            let q2 = random_table(rng, n, m, 10.0);
            contraction_ratio(mdp, policy, d, &q1, &q2)
        })
        .collect();
    let max_ratio = ratios.iter().copied().fold(0.0, f64::max);
    Ok(ContractionReport {
        gamma: mdp.gamma,
        ratios,
        max_ratio,
    })
}

#[derive(Debug, Clone)]
pub struct Counterexample {
    pub mdp: MdpInstance,
    pub policy: PolicyTable,
    pub distribution: Vec<Vec<f64>>,
    pub q1: Vec<Vec<f64>>,
    pub q2: Vec<Vec<f64>>,
    pub ratio: f64,
}

/// Random search over small MDPs and skewed state-action weightings for a
/// pair whose Bellman images are farther apart than `gamma` times the
/// original distance.
pub fn find_mismatch_counterexample<R: Rng + ?Sized>(rng: &mut R, attempts: usize) -> Option<Counterexample> {
    for _ in 0..attempts {
        let n = rng.random_range(2..5);
        let m = rng.random_range(1..3);
        let mdp = MdpInstance::random(rng, n, m, 0.99);
        let policy: PolicyTable = (0..n).map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
        // Heavy-tailed weights concentrate the metric on a few pairs.
        let raw = random_table(rng, n, m, 3.0);
        let raw: Vec<Vec<f64>> = raw.iter().map(|r| r.iter().map(|v| v.exp()).collect()).collect();
        let total: f64 = raw.iter().flatten().sum();
        let d: Vec<Vec<f64>> = raw.iter().map(|r| r.iter().map(|v| v / total).collect()).collect();
        let q1 = random_table(rng, n, m, 1.0);
        let q2 = random_table(rng, n, m, 1.0);
        let ratio = contraction_ratio(&mdp, &policy, &d, &q1, &q2);
        if ratio > mdp.gamma {
            return Some(Counterexample {
                mdp,
                policy,
                distribution: d,
                q1,
                q2,
                ratio,
            });
        }
    }
    None
}

/// Per-state polynomial action value
/// `c + g.a + a^T H a + sum_k c3_k a_k^3`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyQ {
    pub constant: f64,
    pub linear: Vec<f64>,
    pub quadratic: Vec<Vec<f64>>,
    pub cubic: Vec<f64>,
}

impl PolyQ {
    pub fn random<R: Rng + ?Sized>(rng: &mut R, action_dim: usize) -> Self {
        let mut quadratic = vec![vec![0.0; action_dim]; action_dim];
        for i in 0..action_dim {
            for j in 0..=i {
                let v: f64 = rng.sample(StandardNormal);
                quadratic[i][j] = v;
                quadratic[j][i] = v;
            }
        }
        Self {
            constant: rng.sample(StandardNormal),
            linear: (0..action_dim).map(|_| rng.sample(StandardNormal)).collect(),
            quadratic,
            cubic: (0..action_dim).map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal)).collect(),
        }
    }

    pub fn value(&self, a: &[f64]) -> f64 {
        let mut v = self.constant;
        for i in 0..a.len() {
            v += self.linear[i] * a[i] + self.cubic[i] * a[i].powi(3);
            for j in 0..a.len() {
                v += a[i] * self.quadratic[i][j] * a[j];
            }
        }
        v
    }

    pub fn action_gradient(&self, a: &[f64]) -> Vec<f64> {
        (0..a.len())
            .map(|i| {
                let quad: f64 = (0..a.len()).map(|j| (self.quadratic[i][j] + self.quadratic[j][i]) * a[j]).sum();
                self.linear[i] + quad + 3.0 * self.cubic[i] * a[i] * a[i]
            })
            .collect()
    }

    /// The same polynomial multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            constant: factor * self.constant,
            linear: self.linear.iter().map(|v| factor * v).collect(),
            quadratic: self
                .quadratic
                .iter()
                .map(|r| r.iter().map(|v| factor * v).collect())
                .collect(),
            cubic: self.cubic.iter().map(|v| factor * v).collect(),
        }
    }
}

/// Distributions, action values and a linear-in-features policy
/// `mu_theta(s) = Theta phi(s)` over a finite state set.
#[derive(Debug, Clone)]
pub struct FiniteInstance {
    pub d_mu: Vec<f64>,
    pub d_b: Vec<f64>,
    pub q_mu: Vec<PolyQ>,
    /// `phi(s)` for every state.
    pub features: Vec<Vec<f64>>,
    /// Row-major `action_dim x feature_dim`.
    pub theta: Vec<f64>,
    pub action_dim: usize,
    pub alpha: f64,
    /// Whether `d_mu` and `d_b` are visitations of an underlying MDP.
    pub grounded: bool,
}

impl FiniteInstance {
    pub fn n_states(&self) -> usize {
        self.d_mu.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn action(&self, theta: &[f64], s: usize) -> Vec<f64> {
        let f = self.feature_dim();
        (0..self.action_dim)
            .map(|k| (0..f).map(|j| theta[k * f + j] * self.features[s][j]).sum())
            .collect()
    }

    pub fn validate(&self) -> Result<(), PropError> {
        let n = self.n_states();
        if n == 0 || self.d_b.len() != n || self.q_mu.len() != n || self.features.len() != n {
            return Err(PropError::Domain("inconsistent state counts".into()));
        }
        if let Some(s) = self.d_mu.iter().position(|&p| p <= 0.0) {
            return Err(PropError::Domain(format!("d_mu({s}) is zero, density ratio undefined")));
        }
        if self.d_b.iter().any(|&p| p < 0.0) {
            return Err(PropError::Domain("d_b has negative mass".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(PropError::Domain(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.theta.len() != self.action_dim * self.feature_dim() {
            return Err(PropError::Domain("theta has the wrong length".into()));
        }
        Ok(())
    }

    /// Random instance; with `grounded`, `d_mu` and `d_b` are the discounted
    /// visitations of two policies in a random MDP.
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        n_states: usize,
        action_dim: usize,
        alpha: f64,
        grounded: bool,
    ) -> Result<Self, PropError> {
        let feature_dim = rng.random_range(1..5);
        let (d_mu, d_b) = if grounded {
            let mdp = MdpInstance::random(rng, n_states, 3, 0.9);
            let mu: PolicyTable = (0..n_states).map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
            let b: PolicyTable = (0..n_states).map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
            (visitation(&mdp, &mu)?, visitation(&mdp, &b)?)
        } else {
            (random_simplex(rng, n_states, 0.01), random_simplex(rng, n_states, 0.01))
        };
        Ok(Self {
            d_mu,
            d_b,
            q_mu: (0..n_states).map(|_| PolyQ::random(rng, action_dim)).collect(),
            features: (0..n_states)
                .map(|_| (0..feature_dim).map(|_| rng.sample(StandardNormal)).collect())
                .collect(),
            theta: (0..action_dim * feature_dim)
                .map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal))
                .collect(),
            action_dim,
            alpha,
            grounded,
        })
    }

    /// `sum_s w(s) grad_theta Q(s, mu_theta(s))` with the action gradient
    /// supplied per state; `d mu_k / d Theta_kj = phi_j(s)`.
    fn chain_gradient<F>(&self, weight: impl Fn(usize) -> f64, action_grad: F) -> Vec<f64>
    where
        F: Fn(usize, &[f64]) -> Vec<f64>,
    {
        let f = self.feature_dim();
        let mut grad = vec![0.0; self.theta.len()];
        for s in 0..self.n_states() {
            let a = self.action(&self.theta, s);
            let g = action_grad(s, &a);
            let w = weight(s);
            for k in 0..self.action_dim {
                for j in 0..f {
                    grad[k * f + j] += w * g[k] * self.features[s][j];
                }
            }
        }
        grad
    }

    /// Policy gradient under the mixed distribution `(1 - a) d_mu + a d_b`.
    pub fn mixed_gradient(&self) -> Vec<f64> {
        let alpha = self.alpha;
        self.chain_gradient(
            |s| (1.0 - alpha) * self.d_mu[s] + alpha * self.d_b[s],
            |s, a| self.q_mu[s].action_gradient(a),
        )
    }

    /// Policy gradient of the regularized value `Q_a` under `d_mu`.
    pub fn regularized_gradient(&self) -> Vec<f64> {
        let q_alpha: Vec<PolyQ> = (0..self.n_states())
            .map(|s| {
                let rho = self.d_b[s] / self.d_mu[s];
                self.q_mu[s].scaled(1.0 + self.alpha * (rho - 1.0))
            })
            .collect();
        self.chain_gradient(|s| self.d_mu[s], |s, a| q_alpha[s].action_gradient(a))
    }

    /// Central-difference gradient of `sum_s w(s) Q_mu(s, mu_theta(s))`.
    pub fn mixed_gradient_fd(&self, step: f64) -> Vec<f64> {
        let alpha = self.alpha;
        let objective = |theta: &[f64]| -> f64 {
            (0..self.n_states())
                .map(|s| {
                    let w = (1.0 - alpha) * self.d_mu[s] + alpha * self.d_b[s];
                    w * self.q_mu[s].value(&self.action(theta, s))
                })
                .sum()
        };
        (0..self.theta.len())
            .map(|i| {
                let mut plus = self.theta.clone();
                let mut minus = self.theta.clone();
                plus[i] += step;
                minus[i] -= step;
                (objective(&plus) - objective(&minus)) / (2.0 * step)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct IdentityCheck {
    pub mixed: Vec<f64>,
    pub regularized: Vec<f64>,
    /// Max-norm of the difference.
    pub residual: f64,
    /// `residual` divided by the larger max-norm of the two gradients.
    pub relative: f64,
}

pub fn check_identity(instance: &FiniteInstance) -> Result<IdentityCheck, PropError> {
    instance.validate()?;
    let mixed = instance.mixed_gradient();
    let regularized = instance.regularized_gradient();
    let residual = mixed
        .iter()
        .zip(&regularized)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = mixed
        .iter()
        .chain(&regularized)
        .map(|v| v.abs())
        .fold(0.0, f64::max);
    let relative = if scale > 0.0 { residual / scale } else { residual };
    Ok(IdentityCheck {
        mixed,
        regularized,
        residual,
        relative,
    })
}

pub const IDENTITY_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Serialize)]
pub struct ResidualRow {
    pub instance: usize,
    pub n_states: usize,
    pub action_dim: usize,
    pub alpha: f64,
    pub grounded: bool,
    pub residual: f64,
    pub relative: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub rows: Vec<ResidualRow>,
    pub max_relative: f64,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), PropError> {
        let mut writer = csv::Writer::from_writer(out);
        for row in &self.rows {
            writer.serialize(row)?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// Checks the identity on `instances` random instances (`|S| <= 20`, action
/// dimension `<= 3`, alpha cycling through `0, 0.1, ..., 1`). Every other
/// instance takes its distributions from MDP visitations.
pub fn verify_proposition<R: Rng + ?Sized>(instances: usize, rng: &mut R) -> Result<VerifyReport, PropError> {
    let mut rows = Vec::with_capacity(instances);
    for i in 0..instances {
        let n_states = rng.random_range(1..=20);
        let action_dim = rng.random_range(1..=3);
        let alpha = (i % 11) as f64 / 10.0;
        let instance = FiniteInstance::random(rng, n_states, action_dim, alpha, i % 2 == 1)?;
        let check = check_identity(&instance)?;
        rows.push(ResidualRow {
            instance: i,
            n_states,
            action_dim,
            alpha,
            grounded: instance.grounded,
            residual: check.residual,
            relative: check.relative,
            passed: check.relative <= IDENTITY_TOLERANCE,
        });
    }
    let max_relative = rows.iter().map(|r| r.relative).fold(0.0, f64::max);
    Ok(VerifyReport { rows, max_relative })
}

/// [`verify_proposition`] driven by a ChaCha8 stream seeded with `seed`.
pub fn verify_proposition_seeded(instances: usize, seed: u64) -> Result<VerifyReport, PropError> {
    verify_proposition(instances, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn absorbing_state_visitation_is_point_mass() {
        let mdp = MdpInstance {
            action_grid: vec![vec![0.0]],
            kernel: vec![vec![vec![1.0]]],
            reward: vec![vec![1.0]],
            gamma: 0.9,
            start: vec![1.0],
        };
        let d = visitation(&mdp, &vec![vec![0.0]]).unwrap();
        assert_eq!(d, vec![1.0]);
    }

    #[test]
    fn zero_discount_visitation_is_start() {
        let mut r = rng(1);
        let mut mdp = MdpInstance::random(&mut r, 6, 2, 0.0);
        mdp.gamma = 0.0;
        let policy: PolicyTable = (0..6).map(|_| vec![0.3]).collect();
        let d = visitation(&mdp, &policy).unwrap();
        for (a, b) in d.iter().zip(&mdp.start) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn visitation_matches_power_series() {
        let mut r = rng(2);
        let mdp = MdpInstance::random(&mut r, 5, 3, 0.9);
        let policy: PolicyTable = (0..5).map(|_| vec![r.random_range(-1.0..1.0)]).collect();
        let d = visitation(&mdp, &policy).unwrap();
        // Truncated sum of (1 - g) g^t start P^t; 0.9^400 is far below 1e-15.
        let p = mdp.policy_kernel(&policy);
        let mut term = DVector::from_vec(mdp.start.clone()).transpose();
        let mut series = term.clone() * (1.0 - mdp.gamma);
        for t in 1..400 {
            term = term * &p;
            series += term.clone() * ((1.0 - mdp.gamma) * mdp.gamma.powi(t));
        }
        for (a, b) in d.iter().zip(series.iter()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(d.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn stationary_distribution_is_invariant() {
        let mut r = rng(3);
        let mdp = MdpInstance::random(&mut r, 7, 2, 0.99);
        let policy: PolicyTable = (0..7).map(|_| vec![r.random_range(-1.0..1.0)]).collect();
        let d = stationary_distribution(&mdp, &policy).unwrap();
        let p = mdp.policy_kernel(&policy);
        let next = DVector::from_vec(d.clone()).transpose() * p;
        for (a, b) in d.iter().zip(next.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn policy_q_values_are_a_bellman_fixed_point() {
        let mut r = rng(4);
        let mdp = MdpInstance::random(&mut r, 4, 3, 0.95);
        let policy: PolicyTable = (0..4).map(|_| vec![r.random_range(-1.0..1.0)]).collect();
        let q = policy_q_values(&mdp, &policy).unwrap();
        let bq = bellman_apply(&mdp, &policy, &q);
        for (a, b) in q.iter().flatten().zip(bq.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_tables_have_zero_ratio() {
        let mut r = rng(5);
        let mdp = MdpInstance::random(&mut r, 3, 2, 0.99);
        let policy: PolicyTable = vec![vec![0.0]; 3];
        let q = random_table(&mut r, 3, 2, 1.0);
        let d = vec![vec![0.5 / 3.0; 2]; 3];
        assert_eq!(contraction_ratio(&mdp, &policy, &d, &q, &q), 0.0);
    }

    #[test]
    fn on_policy_metric_contracts() {
        let mut r = rng(6);
        for _ in 0..5 {
            let mdp = MdpInstance::random(&mut r, 6, 3, 0.99);
            let policy: PolicyTable = (0..6).map(|_| vec![r.random_range(-1.0..1.0)]).collect();
            let d = on_policy_pairs(&mdp, &policy, &stationary_distribution(&mdp, &policy).unwrap());
            let report = check_contraction(&mdp, &policy, &d, 200, &mut r).unwrap();
            assert!(report.contracts(), "max ratio {}", report.max_ratio);
        }
    }

    #[test]
    fn mismatched_metric_can_expand() {
        let found = find_mismatch_counterexample(&mut rng(7), 10_000).expect("counterexample");
        assert!(found.ratio > found.mdp.gamma);
        let again = contraction_ratio(&found.mdp, &found.policy, &found.distribution, &found.q1, &found.q2);
        assert_eq!(again, found.ratio);
    }

    #[test]
    fn identity_holds_trivially_at_zero_alpha_and_equal_distributions() {
        let mut r = rng(8);
        let mut inst = FiniteInstance::random(&mut r, 7, 2, 0.0, false).unwrap();
        let check = check_identity(&inst).unwrap();
        assert_eq!(check.residual, 0.0);
        inst.alpha = 0.7;
        inst.d_b = inst.d_mu.clone();
        assert!(check_identity(&inst).unwrap().relative < 1e-14);
    }

    #[test]
    fn zero_d_mu_is_rejected() {
        let mut inst = FiniteInstance::random(&mut rng(9), 3, 1, 0.5, false).unwrap();
        inst.d_mu[1] = 0.0;
        assert!(matches!(check_identity(&inst), Err(PropError::Domain(_))));
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut r = rng(10);
        for i in 0..20 {
            let inst = FiniteInstance::random(&mut r, 1 + i % 9, 1 + i % 3, (i % 11) as f64 / 10.0, i % 2 == 0).unwrap();
            let analytic = inst.mixed_gradient();
            let fd = inst.mixed_gradient_fd(1e-5);
            for (a, b) in analytic.iter().zip(&fd) {
                assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn polynomial_gradient_matches_finite_differences() {
        let mut r = rng(11);
        let q = PolyQ::random(&mut r, 3);
        let a = [0.2, -0.7, 0.5];
        let g = q.action_gradient(&a);
        for k in 0..3 {
            let mut plus = a;
            let mut minus = a;
            plus[k] += 1e-6;
            minus[k] -= 1e-6;
            let fd = (q.value(&plus) - q.value(&minus)) / 2e-6;
            assert!((fd - g[k]).abs() < 1e-7);
        }
    }

    #[test]
    fn randomized_suite_passes() {
        let report = verify_proposition(50, &mut rng(12)).unwrap();
        assert!(report.passed(), "max relative residual {}", report.max_relative);
        let mut out = Vec::new();
        report.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("instance,n_states,action_dim,alpha,grounded,residual,relative,passed\n"));
        assert_eq!(text.lines().count(), 51);
    }
}
