//! Finite MDPs with unit-ball embeddings and exact tabular oracles.
//!
//! Everything downstream (particle critics, PPO actors, representation
//! checks) is validated against the oracles here: Q^π / V^π / A^π from a
//! dense linear solve, discounted visitation measures, MSBE, and the
//! performance-difference identity.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{solve_lu, solve_lu_transposed};

/// Transition rows must sum to one within this tolerance.
pub const TRANSITION_ROW_TOL: f64 = 1e-12;
/// Policy rows must sum to one within this tolerance.
pub const POLICY_ROW_TOL: f64 = 1e-10;
/// Visitation measures must carry unit mass within this tolerance.
pub const VISITATION_MASS_TOL: f64 = 1e-10;
/// Probability floor applied when policies are built from probabilities,
/// keeping every log-probability finite and KL divergences against the
/// optimal policy bounded.
pub const POLICY_PROB_FLOOR: f64 = 1e-12;
/// Bellman residual permitted on the exact action-value solve.
pub const BELLMAN_RESIDUAL_TOL: f64 = 1e-10;
/// Default joint embedding radius: strict interior of the unit ball.
pub const DEFAULT_EMBEDDING_RADIUS: f64 = 0.9;

/// A finite MDP (S, A, γ, P, r, D₀) together with a geometric embedding of
/// state-action pairs into the unit ball of ℝ^d.
///
/// The network input for a pair (s, a) is x = (embedding(s, a), 1) ∈ ℝ^{d+1};
/// the appended constant coordinate is cached in `inputs`.
#[derive(Debug, Clone)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    /// P[s][a][s'], rows are probability vectors.
    transition: Array3<f64>,
    /// r[s][a] ≥ 0.
    reward: Array2<f64>,
    gamma: f64,
    /// Initial state distribution D₀.
    initial_dist: Array1<f64>,
    /// embedding[s][a][·] ∈ ℝ^d with ‖·‖₂ ≤ 1.
    embedding: Array3<f64>,
    /// Cached inputs x = (embedding, 1), one row per flattened (s, a).
    inputs: Array2<f64>,
}

impl TabularMdp {
    pub fn new(
        transition: Array3<f64>,
        reward: Array2<f64>,
        gamma: f64,
        initial_dist: Array1<f64>,
        embedding: Array3<f64>,
    ) -> Result<Self> {
        let (n_states, n_actions, n_next) = transition.dim();
        if n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidParameter("empty state or action space".into()));
        }
        if n_next != n_states {
            return Err(Error::DimensionMismatch(format!(
                "transition tensor is {n_states}x{n_actions}x{n_next}; expected last axis {n_states}"
            )));
        }
        if reward.dim() != (n_states, n_actions) {
            return Err(Error::DimensionMismatch("reward table shape".into()));
        }
        if initial_dist.len() != n_states {
            return Err(Error::DimensionMismatch("initial distribution length".into()));
        }
        if embedding.dim().0 != n_states || embedding.dim().1 != n_actions {
            return Err(Error::DimensionMismatch("embedding tensor shape".into()));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "gamma must lie strictly inside (0, 1), got {gamma}"
            )));
        }
        for s in 0..n_states {
            for a in 0..n_actions {
                let mut row_sum = 0.0;
                for s2 in 0..n_states {
                    let p = transition[[s, a, s2]];
                    if !(p >= 0.0) {
                        return Err(Error::InvalidDistribution(format!(
                            "P[{s}][{a}][{s2}] = {p} is negative or NaN"
                        )));
                    }
                    row_sum += p;
                }
                if (row_sum - 1.0).abs() > TRANSITION_ROW_TOL {
                    return Err(Error::InvalidDistribution(format!(
                        "transition row ({s}, {a}) sums to {row_sum}"
                    )));
                }
                let r = reward[[s, a]];
                if !(r >= 0.0) || !r.is_finite() {
                    return Err(Error::InvalidParameter(format!(
                        "reward r({s}, {a}) = {r} must be finite and nonnegative"
                    )));
                }
            }
        }
        let mass: f64 = initial_dist.iter().sum();
        if (mass - 1.0).abs() > TRANSITION_ROW_TOL || initial_dist.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::InvalidDistribution(format!(
                "initial distribution has mass {mass}"
            )));
        }
        let d = embedding.dim().2;
        for s in 0..n_states {
            for a in 0..n_actions {
                let norm2: f64 = (0..d).map(|i| embedding[[s, a, i]].powi(2)).sum();
                if norm2.sqrt() > 1.0 + 1e-12 {
                    return Err(Error::InvalidParameter(format!(
                        "embedding of ({s}, {a}) has norm {} > 1",
                        norm2.sqrt()
                    )));
                }
            }
        }
        let mut inputs = Array2::<f64>::zeros((n_states * n_actions, d + 1));
        for s in 0..n_states {
            for a in 0..n_actions {
                let row = s * n_actions + a;
                for i in 0..d {
                    inputs[[row, i]] = embedding[[s, a, i]];
                }
                inputs[[row, d]] = 1.0;
            }
        }
        Ok(TabularMdp {
            n_states,
            n_actions,
            transition,
            reward,
            gamma,
            initial_dist,
            embedding,
            inputs,
        })
    }

    /// Construct with the default embedding: state and action simplex
    /// vertices, jointly rescaled so every pair has norm
    /// [`DEFAULT_EMBEDDING_RADIUS`].
    pub fn with_simplex_embedding(
        transition: Array3<f64>,
        reward: Array2<f64>,
        gamma: f64,
        initial_dist: Array1<f64>,
    ) -> Result<Self> {
        let (n_states, n_actions, _) = transition.dim();
        let embedding = simplex_embedding(n_states, n_actions, DEFAULT_EMBEDDING_RADIUS);
        TabularMdp::new(transition, reward, gamma, initial_dist, embedding)
    }

    /// Random MDP: Dirichlet-like transition rows, uniform [0, 1) rewards,
    /// random initial distribution, default simplex embedding.
    pub fn random<R: Rng>(n_states: usize, n_actions: usize, gamma: f64, rng: &mut R) -> Self {
        let mut transition = Array3::<f64>::zeros((n_states, n_actions, n_states));
        for s in 0..n_states {
            for a in 0..n_actions {
                let mut row: Vec<f64> = (0..n_states)
                    .map(|_| -rng.random::<f64>().max(1e-12).ln())
                    .collect();
                let sum: f64 = row.iter().sum();
                row.iter_mut().for_each(|p| *p /= sum);
                // Exact renormalization against accumulated rounding.
                let sum2: f64 = row.iter().sum();
                for (s2, p) in row.iter().enumerate() {
                    transition[[s, a, s2]] = p / sum2;
                }
            }
        }
        let reward = Array2::from_shape_fn((n_states, n_actions), |_| rng.random::<f64>());
        let mut init: Vec<f64> = (0..n_states)
            .map(|_| -rng.random::<f64>().max(1e-12).ln())
            .collect();
        let sum: f64 = init.iter().sum();
        init.iter_mut().for_each(|p| *p /= sum);
        let sum2: f64 = init.iter().sum();
        init.iter_mut().for_each(|p| *p /= sum2);
        TabularMdp::with_simplex_embedding(transition, reward, gamma, Array1::from(init))
            .expect("randomly generated MDP must validate")
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_pairs(&self) -> usize {
        self.n_states * self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn reward(&self) -> &Array2<f64> {
        &self.reward
    }

    pub fn transition(&self) -> &Array3<f64> {
        &self.transition
    }

    pub fn initial_dist(&self) -> &Array1<f64> {
        &self.initial_dist
    }

    pub fn embedding(&self) -> &Array3<f64> {
        &self.embedding
    }

    /// Embedding dimension d (without the constant coordinate).
    pub fn embed_dim(&self) -> usize {
        self.embedding.dim().2
    }

    /// Flat index of a pair.
    pub fn pair_index(&self, s: usize, a: usize) -> usize {
        s * self.n_actions + a
    }

    /// Network input x = (s, a, 1) ∈ ℝ^{d+1} for a flattened pair index.
    pub fn input_row(&self, pair: usize) -> ndarray::ArrayView1<'_, f64> {
        self.inputs.row(pair)
    }

    /// All network inputs, one row per flattened (s, a).
    pub fn inputs(&self) -> &Array2<f64> {
        &self.inputs
    }

    /// Induced kernel P̃^π on state-action pairs as an SA×SA row-stochastic
    /// matrix: P̃^π[(s,a)][(s',a')] = P(s'|s,a) π(a'|s').
    pub fn induced_kernel(&self, policy: &Policy) -> Result<Array2<f64>> {
        self.check_policy(policy)?;
        let n = self.n_pairs();
        let mut kernel = Array2::<f64>::zeros((n, n));
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let row = self.pair_index(s, a);
                for s2 in 0..self.n_states {
                    let p = self.transition[[s, a, s2]];
                    if p == 0.0 {
                        continue;
                    }
                    for a2 in 0..self.n_actions {
                        kernel[[row, self.pair_index(s2, a2)]] = p * policy.prob(s2, a2);
                    }
                }
            }
        }
        Ok(kernel)
    }

    pub(crate) fn check_policy(&self, policy: &Policy) -> Result<()> {
        if policy.n_states() != self.n_states || policy.n_actions() != self.n_actions {
            return Err(Error::DimensionMismatch(format!(
                "policy is {}x{}, MDP is {}x{}",
                policy.n_states(),
                policy.n_actions(),
                self.n_states,
                self.n_actions
            )));
        }
        Ok(())
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        let file: MdpFile = self.into();
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: MdpFile = serde_json::from_str(&text)?;
        file.try_into()
    }
}

/// Place states and actions on simplex vertices and rescale jointly so every
/// pair sits at the given radius; pair (s, a) maps to (e_s, e_a) · scale.
pub fn simplex_embedding(n_states: usize, n_actions: usize, radius: f64) -> Array3<f64> {
    let d = n_states + n_actions;
    // Every (e_s, e_a) has norm √2 before scaling.
    let scale = radius / std::f64::consts::SQRT_2;
    let mut embedding = Array3::<f64>::zeros((n_states, n_actions, d));
    for s in 0..n_states {
        for a in 0..n_actions {
            embedding[[s, a, s]] = scale;
            embedding[[s, a, n_states + a]] = scale;
        }
    }
    embedding
}

/// Serialized MDP schema (JSON): explicit P, r, γ, D₀ and embedding arrays.
#[derive(Debug, Serialize, Deserialize)]
pub struct MdpFile {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    /// transition[s][a][s']
    pub transition: Vec<Vec<Vec<f64>>>,
    /// reward[s][a]
    pub reward: Vec<Vec<f64>>,
    /// initial_dist[s]
    pub initial_dist: Vec<f64>,
    /// embedding[s][a][i]
    pub embedding: Vec<Vec<Vec<f64>>>,
}

impl From<&TabularMdp> for MdpFile {
    fn from(mdp: &TabularMdp) -> Self {
        let (ns, na) = (mdp.n_states, mdp.n_actions);
        let d = mdp.embed_dim();
        MdpFile {
            n_states: ns,
            n_actions: na,
            gamma: mdp.gamma,
            transition: (0..ns)
                .map(|s| {
                    (0..na)
                        .map(|a| (0..ns).map(|s2| mdp.transition[[s, a, s2]]).collect())
                        .collect()
                })
                .collect(),
            reward: (0..ns)
                .map(|s| (0..na).map(|a| mdp.reward[[s, a]]).collect())
                .collect(),
            initial_dist: mdp.initial_dist.to_vec(),
            embedding: (0..ns)
                .map(|s| {
                    (0..na)
                        .map(|a| (0..d).map(|i| mdp.embedding[[s, a, i]]).collect())
                        .collect()
                })
                .collect(),
        }
    }
}

impl TryFrom<MdpFile> for TabularMdp {
    type Error = Error;

    fn try_from(file: MdpFile) -> Result<Self> {
        let (ns, na) = (file.n_states, file.n_actions);
        if file.transition.len() != ns || file.reward.len() != ns || file.embedding.len() != ns {
            return Err(Error::DimensionMismatch("MDP file row counts".into()));
        }
        let d = file
            .embedding
            .first()
            .and_then(|row| row.first())
            .map(|v| v.len())
            .unwrap_or(0);
        let mut transition = Array3::<f64>::zeros((ns, na, ns));
        let mut reward = Array2::<f64>::zeros((ns, na));
        let mut embedding = Array3::<f64>::zeros((ns, na, d));
        for s in 0..ns {
            if file.transition[s].len() != na
                || file.reward[s].len() != na
                || file.embedding[s].len() != na
            {
                return Err(Error::DimensionMismatch("MDP file column counts".into()));
            }
            for a in 0..na {
                if file.transition[s][a].len() != ns || file.embedding[s][a].len() != d {
                    return Err(Error::DimensionMismatch("MDP file inner lengths".into()));
                }
                for s2 in 0..ns {
                    transition[[s, a, s2]] = file.transition[s][a][s2];
                }
                reward[[s, a]] = file.reward[s][a];
                for i in 0..d {
                    embedding[[s, a, i]] = file.embedding[s][a][i];
                }
            }
        }
        TabularMdp::new(
            transition,
            reward,
            file.gamma,
            Array1::from(file.initial_dist),
            embedding,
        )
    }
}

/// A per-state action distribution stored in log space.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    log_probs: Array2<f64>,
}

impl Policy {
    pub fn uniform(n_states: usize, n_actions: usize) -> Policy {
        let lp = -(n_actions as f64).ln();
        Policy {
            log_probs: Array2::from_elem((n_states, n_actions), lp),
        }
    }

    /// Build from probabilities, flooring each entry at
    /// [`POLICY_PROB_FLOOR`] and renormalizing so no log-prob is -∞.
    pub fn from_probs(probs: &Array2<f64>) -> Result<Policy> {
        let (n_states, n_actions) = probs.dim();
        if n_actions == 0 {
            return Err(Error::InvalidParameter("policy needs at least one action".into()));
        }
        let mut log_probs = Array2::<f64>::zeros((n_states, n_actions));
        for s in 0..n_states {
            let mut row: Vec<f64> = (0..n_actions).map(|a| probs[[s, a]]).collect();
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(Error::InvalidDistribution(format!(
                    "policy row {s} has negative or non-finite entries"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > POLICY_ROW_TOL {
                return Err(Error::InvalidDistribution(format!(
                    "policy row {s} sums to {sum}"
                )));
            }
            row.iter_mut().for_each(|p| *p = p.max(POLICY_PROB_FLOOR));
            let sum: f64 = row.iter().sum();
            for a in 0..n_actions {
                log_probs[[s, a]] = (row[a] / sum).ln();
            }
        }
        Ok(Policy { log_probs })
    }

    /// Build from validated log-probabilities.
    pub fn from_log_probs(log_probs: Array2<f64>) -> Result<Policy> {
        let (n_states, _) = log_probs.dim();
        for s in 0..n_states {
            if log_probs.row(s).iter().any(|&lp| !lp.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "policy row {s} has non-finite log-probs"
                )));
            }
            let sum: f64 = log_probs.row(s).iter().map(|&lp| lp.exp()).sum();
            if (sum - 1.0).abs() > POLICY_ROW_TOL {
                return Err(Error::InvalidDistribution(format!(
                    "policy row {s} exponentiates to mass {sum}"
                )));
            }
        }
        Ok(Policy { log_probs })
    }

    /// Softmax of arbitrary finite logits, row by row.
    pub fn from_logits(logits: &Array2<f64>) -> Result<Policy> {
        let (n_states, n_actions) = logits.dim();
        let mut log_probs = Array2::<f64>::zeros((n_states, n_actions));
        for s in 0..n_states {
            let row = logits.row(s);
            if row.iter().any(|&z| !z.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "logits row {s} has non-finite entries"
                )));
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
            for a in 0..n_actions {
                log_probs[[s, a]] = row[a] - lse;
            }
        }
        Ok(Policy { log_probs })
    }

    pub fn n_states(&self) -> usize {
        self.log_probs.dim().0
    }

    pub fn n_actions(&self) -> usize {
        self.log_probs.dim().1
    }

    pub fn log_prob(&self, s: usize, a: usize) -> f64 {
        self.log_probs[[s, a]]
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.log_probs[[s, a]].exp()
    }

    pub fn log_probs(&self) -> &Array2<f64> {
        &self.log_probs
    }

    pub fn probs(&self) -> Array2<f64> {
        self.log_probs.mapv(f64::exp)
    }
}

/// Discounted occupancy distribution over state-action pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct VisitationMeasure {
    weights: Array2<f64>,
}

impl VisitationMeasure {
    /// Validate weights: nonnegative entries (tiny solver negatives down to
    /// -1e-12 are clamped to zero) and unit mass.
    pub fn new(weights: Array2<f64>) -> Result<VisitationMeasure> {
        let mut weights = weights;
        for w in weights.iter_mut() {
            if !w.is_finite() || *w < -1e-12 {
                return Err(Error::InvalidDistribution(format!(
                    "visitation entry {w} is negative or non-finite"
                )));
            }
            if *w < 0.0 {
                *w = 0.0;
            }
        }
        let mass: f64 = weights.iter().sum();
        if (mass - 1.0).abs() > VISITATION_MASS_TOL {
            return Err(Error::InvalidDistribution(format!(
                "visitation mass is {mass}"
            )));
        }
        Ok(VisitationMeasure { weights })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> VisitationMeasure {
        let w = 1.0 / (n_states * n_actions) as f64;
        VisitationMeasure {
            weights: Array2::from_elem((n_states, n_actions), w),
        }
    }

    /// Product table D ⊗ π.
    pub fn product(state_dist: &Array1<f64>, policy: &Policy) -> Result<VisitationMeasure> {
        if state_dist.len() != policy.n_states() {
            return Err(Error::DimensionMismatch("state distribution length".into()));
        }
        let table = Array2::from_shape_fn((policy.n_states(), policy.n_actions()), |(s, a)| {
            state_dist[s] * policy.prob(s, a)
        });
        VisitationMeasure::new(table)
    }

    pub fn weight(&self, s: usize, a: usize) -> f64 {
        self.weights[[s, a]]
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn state_marginal(&self) -> Array1<f64> {
        let (n_states, n_actions) = self.weights.dim();
        Array1::from_shape_fn(n_states, |s| {
            (0..n_actions).map(|a| self.weights[[s, a]]).sum()
        })
    }

    pub fn mass(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Exact Q^π: solves (I − γ P̃^π) q = r over the flattened pair space and
/// verifies the Bellman residual.
pub fn exact_q(mdp: &TabularMdp, policy: &Policy) -> Result<Array2<f64>> {
    let kernel = mdp.induced_kernel(policy)?;
    let n = mdp.n_pairs();
    let mut system = Array2::<f64>::eye(n);
    system.scaled_add(-mdp.gamma(), &kernel);
    let rhs: Vec<f64> = (0..n)
        .map(|i| mdp.reward()[[i / mdp.n_actions(), i % mdp.n_actions()]])
        .collect();
    let q_flat = solve_lu(&system, &rhs)
        .ok_or_else(|| Error::SingularSystem("Bellman system (I - γP̃^π)".into()))?;
    // Residual check: ‖q − r − γ P̃^π q‖_∞.
    let mut residual = 0.0f64;
    for i in 0..n {
        let mut pq = 0.0;
        for j in 0..n {
            pq += kernel[[i, j]] * q_flat[j];
        }
        residual = residual.max((q_flat[i] - rhs[i] - mdp.gamma() * pq).abs());
    }
    if residual > BELLMAN_RESIDUAL_TOL {
        return Err(Error::SingularSystem(format!(
            "Bellman residual {residual} exceeds {BELLMAN_RESIDUAL_TOL}; inputs look corrupted"
        )));
    }
    Ok(Array2::from_shape_fn((mdp.n_states(), mdp.n_actions()), |(s, a)| {
        q_flat[mdp.pair_index(s, a)]
    }))
}

/// Exact V^π(s) = ⟨Q^π(s, ·), π(·|s)⟩.
pub fn exact_v(mdp: &TabularMdp, policy: &Policy) -> Result<Array1<f64>> {
    let q = exact_q(mdp, policy)?;
    Ok(v_from_q(&q, policy))
}

/// V^π from the S×S system (I − γP^π) V = r_π; the cheap route used in run
/// loops. Agrees with [`exact_v`] to solver precision.
pub fn state_values(mdp: &TabularMdp, policy: &Policy) -> Result<Array1<f64>> {
    mdp.check_policy(policy)?;
    let ns = mdp.n_states();
    let na = mdp.n_actions();
    let mut system = Array2::<f64>::eye(ns);
    for s in 0..ns {
        for s2 in 0..ns {
            let mut p = 0.0;
            for a in 0..na {
                p += policy.prob(s, a) * mdp.transition()[[s, a, s2]];
            }
            system[[s, s2]] -= mdp.gamma() * p;
        }
    }
    let rhs: Vec<f64> = (0..ns)
        .map(|s| (0..na).map(|a| policy.prob(s, a) * mdp.reward()[[s, a]]).sum())
        .collect();
    let v = solve_lu(&system, &rhs)
        .ok_or_else(|| Error::SingularSystem("state-value system".into()))?;
    Ok(Array1::from(v))
}

/// Q^π expanded from state values: Q(s,a) = r(s,a) + γ Σ_{s'} P(s'|s,a) V(s').
pub fn q_from_state_values(mdp: &TabularMdp, v: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((mdp.n_states(), mdp.n_actions()), |(s, a)| {
        let mut next = 0.0;
        for s2 in 0..mdp.n_states() {
            next += mdp.transition()[[s, a, s2]] * v[s2];
        }
        mdp.reward()[[s, a]] + mdp.gamma() * next
    })
}

/// V from a given Q table: V(s) = ⟨Q(s,·), π(·|s)⟩.
pub fn v_from_q(q: &Array2<f64>, policy: &Policy) -> Array1<f64> {
    let (n_states, n_actions) = q.dim();
    Array1::from_shape_fn(n_states, |s| {
        (0..n_actions).map(|a| policy.prob(s, a) * q[[s, a]]).sum()
    })
}

/// Exact advantage A^π = Q^π − V^π.
pub fn advantage(mdp: &TabularMdp, policy: &Policy) -> Result<Array2<f64>> {
    let q = exact_q(mdp, policy)?;
    let v = v_from_q(&q, policy);
    Ok(Array2::from_shape_fn(q.dim(), |(s, a)| q[[s, a]] - v[s]))
}

/// Expected total reward J(π) = Σ_s D₀(s) V^π(s).
pub fn expected_return(mdp: &TabularMdp, policy: &Policy) -> Result<f64> {
    let v = exact_v(mdp, policy)?;
    Ok(mdp.initial_dist().iter().zip(v.iter()).map(|(d, v)| d * v).sum())
}

/// Discounted visitation measure 𝓔̃ = (1−γ) start (I − γP̃^π)^{-1}, as a
/// probability table over pairs.
pub fn visitation(
    mdp: &TabularMdp,
    policy: &Policy,
    start: &VisitationMeasure,
) -> Result<VisitationMeasure> {
    if start.weights().dim() != (mdp.n_states(), mdp.n_actions()) {
        return Err(Error::DimensionMismatch("start table shape".into()));
    }
    let kernel = mdp.induced_kernel(policy)?;
    let n = mdp.n_pairs();
    let mut system = Array2::<f64>::eye(n);
    system.scaled_add(-mdp.gamma(), &kernel);
    let rhs: Vec<f64> = (0..n)
        .map(|i| (1.0 - mdp.gamma()) * start.weight(i / mdp.n_actions(), i % mdp.n_actions()))
        .collect();
    // Row-vector identity e = (1−γ) start (I − γP̃)^{-1} ⇔ (I − γP̃)^T e^T = (1−γ) start^T.
    let e_flat = solve_lu_transposed(&system, &rhs)
        .ok_or_else(|| Error::SingularSystem("visitation system".into()))?;
    VisitationMeasure::new(Array2::from_shape_fn(
        (mdp.n_states(), mdp.n_actions()),
        |(s, a)| e_flat[mdp.pair_index(s, a)],
    ))
}

/// Mean-squared Bellman error of a Q table under a weighting distribution:
/// ½ E_w[(Q − r − γ E_{P̃^π} Q)²].
pub fn msbe(
    mdp: &TabularMdp,
    policy: &Policy,
    q_table: &Array2<f64>,
    weighting: &VisitationMeasure,
) -> Result<f64> {
    if q_table.dim() != (mdp.n_states(), mdp.n_actions()) {
        return Err(Error::DimensionMismatch("Q table shape".into()));
    }
    let residual = bellman_residual_table(mdp, policy, q_table)?;
    let mut acc = 0.0;
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            acc += weighting.weight(s, a) * residual[[s, a]].powi(2);
        }
    }
    Ok(0.5 * acc)
}

/// TD residual table δ(s,a) = Q(s,a) − r(s,a) − γ E_{(s',a')~P̃^π}[Q(s',a')].
pub fn bellman_residual_table(
    mdp: &TabularMdp,
    policy: &Policy,
    q_table: &Array2<f64>,
) -> Result<Array2<f64>> {
    mdp.check_policy(policy)?;
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    // E_π[Q](s') precomputed per next state.
    let qbar = v_from_q(q_table, policy);
    let mut out = Array2::<f64>::zeros((ns, na));
    for s in 0..ns {
        for a in 0..na {
            let mut next = 0.0;
            for s2 in 0..ns {
                next += mdp.transition()[[s, a, s2]] * qbar[s2];
            }
            out[[s, a]] = q_table[[s, a]] - mdp.reward()[[s, a]] - mdp.gamma() * next;
        }
    }
    Ok(out)
}

/// Performance-difference form of J(π_a) − J(π_b):
/// (1−γ)^{-1} E_{s~𝓔^{π_a}_{D₀}}[⟨A^{π_b}(s,·), π_a(·|s) − π_b(·|s)⟩].
pub fn perf_diff(mdp: &TabularMdp, policy_a: &Policy, policy_b: &Policy) -> Result<f64> {
    let start = VisitationMeasure::product(mdp.initial_dist(), policy_a)?;
    let visit = visitation(mdp, policy_a, &start)?;
    let states = visit.state_marginal();
    let adv_b = advantage(mdp, policy_b)?;
    let mut acc = 0.0;
    for s in 0..mdp.n_states() {
        let mut inner = 0.0;
        for a in 0..mdp.n_actions() {
            inner += adv_b[[s, a]] * (policy_a.prob(s, a) - policy_b.prob(s, a));
        }
        acc += states[s] * inner;
    }
    Ok(acc / (1.0 - mdp.gamma()))
}

/// Greedy policy from value iteration run to Bellman residual ≤ 1e-12,
/// with probabilities floored so KL(π* ‖ ·) stays finite.
pub fn optimal_policy(mdp: &TabularMdp) -> Result<Policy> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let tol = 1e-12;
    let mut v = Array1::<f64>::zeros(ns);
    let max_iters = 20_000_000usize;
    let mut iters = 0usize;
    loop {
        let mut new_v = Array1::<f64>::zeros(ns);
        let mut residual = 0.0f64;
        for s in 0..ns {
            let mut best = f64::NEG_INFINITY;
            for a in 0..na {
                let mut q = mdp.reward()[[s, a]];
                for s2 in 0..ns {
                    q += mdp.gamma() * mdp.transition()[[s, a, s2]] * v[s2];
                }
                best = best.max(q);
            }
            new_v[s] = best;
            residual = residual.max((best - v[s]).abs());
        }
        v = new_v;
        iters += 1;
        if residual <= tol {
            break;
        }
        if iters >= max_iters {
            return Err(Error::Convergence(format!(
                "value iteration residual {residual} after {iters} iterations"
            )));
        }
    }
    let mut probs = Array2::<f64>::zeros((ns, na));
    for s in 0..ns {
        let mut best_a = 0;
        let mut best_q = f64::NEG_INFINITY;
        for a in 0..na {
            let mut q = mdp.reward()[[s, a]];
            for s2 in 0..ns {
                q += mdp.gamma() * mdp.transition()[[s, a, s2]] * v[s2];
            }
            if q > best_q {
                best_q = q;
                best_a = a;
            }
        }
        probs[[s, best_a]] = 1.0;
    }
    Policy::from_probs(&probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Truncated power-series oracle for Q^π: Σ_{m≤M*} γ^m (P̃^π)^m r with
    /// M* = ⌈log(1e-10 (1−γ)) / log γ⌉.
    fn truncated_q_oracle(mdp: &TabularMdp, policy: &Policy) -> Array2<f64> {
        let kernel = mdp.induced_kernel(policy).unwrap();
        let n = mdp.n_pairs();
        let r: Vec<f64> = (0..n)
            .map(|i| mdp.reward()[[i / mdp.n_actions(), i % mdp.n_actions()]])
            .collect();
        let m_star = ((1e-10 * (1.0 - mdp.gamma())).ln() / mdp.gamma().ln()).ceil() as usize;
        let mut term = r.clone();
        let mut acc = r.clone();
        for _ in 1..=m_star {
            let mut next = vec![0.0; n];
            for i in 0..n {
                let mut dot = 0.0;
                for j in 0..n {
                    dot += kernel[[i, j]] * term[j];
                }
                next[i] = mdp.gamma() * dot;
            }
            for i in 0..n {
                acc[i] += next[i];
            }
            term = next;
        }
        Array2::from_shape_fn((mdp.n_states(), mdp.n_actions()), |(s, a)| {
            acc[mdp.pair_index(s, a)]
        })
    }

    /// Truncated-sum oracle for the visitation measure.
    fn truncated_visitation_oracle(
        mdp: &TabularMdp,
        policy: &Policy,
        start: &VisitationMeasure,
    ) -> Array2<f64> {
        let kernel = mdp.induced_kernel(policy).unwrap();
        let n = mdp.n_pairs();
        let m_star = ((1e-10 * (1.0 - mdp.gamma())).ln() / mdp.gamma().ln()).ceil() as usize;
        let mut row: Vec<f64> = (0..n)
            .map(|i| start.weight(i / mdp.n_actions(), i % mdp.n_actions()))
            .collect();
        let mut acc = row.clone();
        let mut scale = 1.0;
        for _ in 1..=m_star {
            let mut next = vec![0.0; n];
            for j in 0..n {
                let mut dot = 0.0;
                for i in 0..n {
                    dot += row[i] * kernel[[i, j]];
                }
                next[j] = dot;
            }
            scale *= mdp.gamma();
            for j in 0..n {
                acc[j] += scale * next[j];
                // acc accumulates γ^m start P̃^m with row carrying P̃^m start.
            }
            row = next;
        }
        Array2::from_shape_fn((mdp.n_states(), mdp.n_actions()), |(s, a)| {
            (1.0 - mdp.gamma()) * acc[mdp.pair_index(s, a)]
        })
    }

    /// Expected truncated-rollout oracle for V^π: the exact mean of episode
    /// returns truncated at M* steps, computed by backward dynamic
    /// programming (sampling noise would swamp the 1e-8 tolerance).
    fn truncated_rollout_v(mdp: &TabularMdp, policy: &Policy) -> Array1<f64> {
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        let r_pi = Array1::from_shape_fn(ns, |s| {
            (0..na).map(|a| policy.prob(s, a) * mdp.reward()[[s, a]]).sum()
        });
        let m_star = ((1e-10 * (1.0 - mdp.gamma())).ln() / mdp.gamma().ln()).ceil() as usize;
        let mut v = r_pi.clone();
        for _ in 0..m_star {
            let mut next = r_pi.clone();
            for s in 0..ns {
                let mut acc = 0.0;
                for a in 0..na {
                    let mut step = 0.0;
                    for s2 in 0..ns {
                        step += mdp.transition()[[s, a, s2]] * v[s2];
                    }
                    acc += policy.prob(s, a) * step;
                }
                next[s] += mdp.gamma() * acc;
            }
            v = next;
        }
        v
    }

    fn random_policy<R: Rng>(ns: usize, na: usize, rng: &mut R) -> Policy {
        let logits = Array2::from_shape_fn((ns, na), |_| rng.random_range(-1.5..1.5));
        Policy::from_logits(&logits).unwrap()
    }

    fn single_pair_mdp(r: f64, gamma: f64) -> TabularMdp {
        TabularMdp::with_simplex_embedding(
            array![[[1.0]]],
            array![[r]],
            gamma,
            array![1.0],
        )
        .unwrap()
    }

    #[test]
    fn zero_reward_gives_zero_q_v_a_j() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut mdp = TabularMdp::random(4, 3, 0.85, &mut rng);
        mdp.reward.fill(0.0);
        let pi = random_policy(4, 3, &mut rng);
        let q = exact_q(&mdp, &pi).unwrap();
        assert!(q.iter().all(|&x| x.abs() < 1e-12));
        let v = exact_v(&mdp, &pi).unwrap();
        assert!(v.iter().all(|&x| x.abs() < 1e-12));
        let a = advantage(&mdp, &pi).unwrap();
        assert!(a.iter().all(|&x| x.abs() < 1e-12));
        assert_abs_diff_eq!(expected_return(&mdp, &pi).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn geometric_series_single_pair() {
        let mdp = single_pair_mdp(1.0, 0.5);
        let pi = Policy::uniform(1, 1);
        let q = exact_q(&mdp, &pi).unwrap();
        assert_abs_diff_eq!(q[[0, 0]], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(expected_return(&mdp, &pi).unwrap(), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn exact_q_matches_truncated_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mdp = TabularMdp::random(5, 3, 0.9, &mut rng);
        let pi = random_policy(5, 3, &mut rng);
        let q = exact_q(&mdp, &pi).unwrap();
        let oracle = truncated_q_oracle(&mdp, &pi);
        for (a, b) in q.iter().zip(oracle.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-8);
        }
    }

    #[test]
    fn state_value_route_agrees_with_pair_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mdp = TabularMdp::random(6, 3, 0.92, &mut rng);
        let pi = random_policy(6, 3, &mut rng);
        let v_fast = state_values(&mdp, &pi).unwrap();
        let v_full = exact_v(&mdp, &pi).unwrap();
        for (a, b) in v_fast.iter().zip(v_full.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
        let q_fast = q_from_state_values(&mdp, &v_fast);
        let q_full = exact_q(&mdp, &pi).unwrap();
        for (a, b) in q_fast.iter().zip(q_full.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn exact_v_matches_truncated_rollout_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mdp = TabularMdp::random(5, 3, 0.9, &mut rng);
        let pi = random_policy(5, 3, &mut rng);
        let v = exact_v(&mdp, &pi).unwrap();
        let oracle = truncated_rollout_v(&mdp, &pi);
        for (a, b) in v.iter().zip(oracle.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-8);
        }
    }

    #[test]
    fn deterministic_policy_v_equals_q_at_chosen_action() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mdp = TabularMdp::random(4, 3, 0.8, &mut rng);
        let mut probs = Array2::<f64>::zeros((4, 3));
        let picks = [2usize, 0, 1, 2];
        for (s, &a) in picks.iter().enumerate() {
            probs[[s, a]] = 1.0;
        }
        let pi = Policy::from_probs(&probs).unwrap();
        let q = exact_q(&mdp, &pi).unwrap();
        let v = exact_v(&mdp, &pi).unwrap();
        for (s, &a) in picks.iter().enumerate() {
            // Floored off-actions carry 1e-12 mass; tolerance reflects that.
            assert_abs_diff_eq!(v[s], q[[s, a]], epsilon = 1e-9);
        }
    }

    #[test]
    fn advantage_recomposition_and_zero_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mdp = TabularMdp::random(5, 3, 0.9, &mut rng);
        let pi = random_policy(5, 3, &mut rng);
        let q = exact_q(&mdp, &pi).unwrap();
        let v = exact_v(&mdp, &pi).unwrap();
        let adv = advantage(&mdp, &pi).unwrap();
        for s in 0..5 {
            let mut mean = 0.0;
            for a in 0..3 {
                assert_abs_diff_eq!(adv[[s, a]], q[[s, a]] - v[s], epsilon = 1e-12);
                mean += pi.prob(s, a) * adv[[s, a]];
            }
            assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn single_action_advantage_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mdp = TabularMdp::random(4, 1, 0.9, &mut rng);
        let pi = Policy::uniform(4, 1);
        let adv = advantage(&mdp, &pi).unwrap();
        assert!(adv.iter().all(|&x| x.abs() < 1e-10));
    }

    #[test]
    fn expected_return_consistent_with_visitation_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mdp = TabularMdp::random(5, 3, 0.9, &mut rng);
        let pi = random_policy(5, 3, &mut rng);
        let j = expected_return(&mdp, &pi).unwrap();
        let start = VisitationMeasure::product(mdp.initial_dist(), &pi).unwrap();
        let visit = visitation(&mdp, &pi, &start).unwrap();
        let mut j_visit = 0.0;
        for s in 0..5 {
            for a in 0..3 {
                j_visit += visit.weight(s, a) * mdp.reward()[[s, a]];
            }
        }
        j_visit /= 1.0 - mdp.gamma();
        assert_abs_diff_eq!(j, j_visit, epsilon = 1e-10);
    }

    #[test]
    fn visitation_gamma_to_zero_recovers_start() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mdp = TabularMdp::random(4, 2, 1e-12, &mut rng);
        let pi = random_policy(4, 2, &mut rng);
        let start = VisitationMeasure::uniform(4, 2);
        let visit = visitation(&mdp, &pi, &start).unwrap();
        for s in 0..4 {
            for a in 0..2 {
                assert_abs_diff_eq!(visit.weight(s, a), start.weight(s, a), epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn visitation_absorbing_point_mass() {
        // Single state, two actions; policy always picks action 0, start is a
        // point mass at (0, 0): the chain never leaves that pair.
        let transition = array![[[1.0], [1.0]]];
        let reward = array![[0.0, 0.0]];
        let mdp =
            TabularMdp::with_simplex_embedding(transition, reward, 0.9, array![1.0]).unwrap();
        let mut probs = Array2::<f64>::zeros((1, 2));
        probs[[0, 0]] = 1.0;
        let pi = Policy::from_probs(&probs).unwrap();
        let mut table = Array2::<f64>::zeros((1, 2));
        table[[0, 0]] = 1.0;
        let start = VisitationMeasure::new(table).unwrap();
        let visit = visitation(&mdp, &pi, &start).unwrap();
        assert_abs_diff_eq!(visit.weight(0, 0), 1.0, epsilon = 1e-9);
        assert!(visit.weight(0, 1) < 1e-9);
    }

    #[test]
    fn visitation_matches_truncated_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let mdp = TabularMdp::random(5, 3, 0.9, &mut rng);
        let pi = random_policy(5, 3, &mut rng);
        let start = VisitationMeasure::uniform(5, 3);
        let visit = visitation(&mdp, &pi, &start).unwrap();
        let oracle = truncated_visitation_oracle(&mdp, &pi, &start);
        for s in 0..5 {
            for a in 0..3 {
                assert_abs_diff_eq!(visit.weight(s, a), oracle[[s, a]], epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn visitation_product_identity() {
        // Starting from D ⊗ π, the visitation factorizes as 𝓔 ⊗ π.
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mdp = TabularMdp::random(5, 3, 0.9, &mut rng);
        let pi = random_policy(5, 3, &mut rng);
        let start = VisitationMeasure::product(mdp.initial_dist(), &pi).unwrap();
        let visit = visitation(&mdp, &pi, &start).unwrap();
        let marginal = visit.state_marginal();
        for s in 0..5 {
            for a in 0..3 {
                assert_abs_diff_eq!(
                    visit.weight(s, a),
                    marginal[s] * pi.prob(s, a),
                    epsilon = 1e-10
                );
            }
        }
    }

    #[test]
    fn msbe_zero_at_fixed_point_and_half_for_unit_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let mdp = TabularMdp::random(5, 3, 0.9, &mut rng);
        let pi = random_policy(5, 3, &mut rng);
        let q = exact_q(&mdp, &pi).unwrap();
        let w = VisitationMeasure::uniform(5, 3);
        assert!(msbe(&mdp, &pi, &q, &w).unwrap() < 1e-12);

        // Q ≡ 0 with r ≡ 1 makes the residual -1 everywhere; MSBE = 1/2.
        let mut mdp2 = mdp.clone();
        mdp2.reward.fill(1.0);
        let zero = Array2::<f64>::zeros((5, 3));
        let start = VisitationMeasure::product(mdp2.initial_dist(), &pi).unwrap();
        let visit = visitation(&mdp2, &pi, &start).unwrap();
        assert_abs_diff_eq!(msbe(&mdp2, &pi, &zero, &w).unwrap(), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(msbe(&mdp2, &pi, &zero, &visit).unwrap(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn msbe_matches_naive_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let mdp = TabularMdp::random(4, 3, 0.85, &mut rng);
        let pi = random_policy(4, 3, &mut rng);
        let q = Array2::from_shape_fn((4, 3), |_| rng.random_range(-2.0..2.0));
        let w = VisitationMeasure::uniform(4, 3);
        let got = msbe(&mdp, &pi, &q, &w).unwrap();
        let mut naive = 0.0;
        for s in 0..4 {
            for a in 0..3 {
                let mut target = 0.0;
                for s2 in 0..4 {
                    for a2 in 0..3 {
                        target += mdp.transition()[[s, a, s2]] * pi.prob(s2, a2) * q[[s2, a2]];
                    }
                }
                let delta = q[[s, a]] - mdp.reward()[[s, a]] - mdp.gamma() * target;
                naive += w.weight(s, a) * delta * delta;
            }
        }
        naive *= 0.5;
        assert_abs_diff_eq!(got, naive, epsilon = 1e-12);
    }

    #[test]
    fn perf_diff_identity_and_antisymmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        for _ in 0..10 {
            let mdp = TabularMdp::random(5, 3, 0.9, &mut rng);
            let pa = random_policy(5, 3, &mut rng);
            let pb = random_policy(5, 3, &mut rng);
            let diff = perf_diff(&mdp, &pa, &pb).unwrap();
            let j_gap =
                expected_return(&mdp, &pa).unwrap() - expected_return(&mdp, &pb).unwrap();
            assert_abs_diff_eq!(diff, j_gap, epsilon = 1e-8);
            let swapped = perf_diff(&mdp, &pb, &pa).unwrap();
            assert_abs_diff_eq!(swapped, -j_gap, epsilon = 1e-8);
            assert!(perf_diff(&mdp, &pa, &pa).unwrap().abs() < 1e-10);
        }
    }

    #[test]
    fn optimal_policy_dominates_random_policies() {
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let mdp = TabularMdp::random(5, 3, 0.9, &mut rng);
        let star = optimal_policy(&mdp).unwrap();
        let j_star = expected_return(&mdp, &star).unwrap();
        for _ in 0..100 {
            let pi = random_policy(5, 3, &mut rng);
            assert!(j_star + 1e-10 >= expected_return(&mdp, &pi).unwrap());
        }
    }

    #[test]
    fn optimal_policy_picks_dominant_action() {
        // Two states, two actions, identical dynamics; action 1 pays 1.
        let transition = array![
            [[0.5, 0.5], [0.5, 0.5]],
            [[0.4, 0.6], [0.4, 0.6]]
        ];
        let reward = array![[0.0, 1.0], [0.0, 1.0]];
        let mdp =
            TabularMdp::with_simplex_embedding(transition, reward, 0.9, array![0.5, 0.5]).unwrap();
        let star = optimal_policy(&mdp).unwrap();
        for s in 0..2 {
            assert!(star.prob(s, 1) > 0.999);
        }
    }

    #[test]
    fn single_action_optimal_policy_is_that_action() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let mdp = TabularMdp::random(3, 1, 0.9, &mut rng);
        let star = optimal_policy(&mdp).unwrap();
        for s in 0..3 {
            assert_abs_diff_eq!(star.prob(s, 0), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn embedding_norms_within_unit_ball() {
        let mdp = TabularMdp::random(6, 4, 0.9, &mut ChaCha8Rng::seed_from_u64(67));
        let d = mdp.embed_dim();
        for s in 0..6 {
            for a in 0..4 {
                let n2: f64 = (0..d).map(|i| mdp.embedding()[[s, a, i]].powi(2)).sum();
                assert_abs_diff_eq!(n2.sqrt(), DEFAULT_EMBEDDING_RADIUS, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn json_round_trip_preserves_tables() {
        let dir = std::env::temp_dir().join("mfac_mdp_roundtrip");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("mdp.json");
        let mdp = TabularMdp::random(4, 3, 0.875, &mut ChaCha8Rng::seed_from_u64(71));
        mdp.save_json(&path).unwrap();
        let back = TabularMdp::load_json(&path).unwrap();
        assert_eq!(mdp.transition(), back.transition());
        assert_eq!(mdp.reward(), back.reward());
        assert_eq!(mdp.initial_dist(), back.initial_dist());
        assert_eq!(mdp.embedding(), back.embedding());
        assert_eq!(mdp.gamma(), back.gamma());
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let bad_row = array![[[0.6, 0.3]]]; // sums to 0.9
        assert!(TabularMdp::with_simplex_embedding(
            bad_row,
            array![[0.0]],
            0.9,
            array![1.0, 0.0]
        )
        .is_err());
        let neg_reward = array![[[1.0]]];
        assert!(TabularMdp::with_simplex_embedding(
            neg_reward.clone(),
            array![[-0.1]],
            0.9,
            array![1.0]
        )
        .is_err());
        assert!(
            TabularMdp::with_simplex_embedding(neg_reward, array![[0.1]], 1.0, array![1.0])
                .is_err()
        );
        let bad_start = Array2::from_elem((2, 2), 0.3);
        assert!(VisitationMeasure::new(bad_start).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn bellman_fixed_point_residual(seed in 0u64..5000, ns in 2usize..7, na in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gamma = 0.5 + 0.45 * rng.random::<f64>();
            let mdp = TabularMdp::random(ns, na, gamma, &mut rng);
            let pi = random_policy(ns, na, &mut rng);
            let q = exact_q(&mdp, &pi).unwrap();
            let res = bellman_residual_table(&mdp, &pi, &q).unwrap();
            prop_assert!(res.iter().all(|&x| x.abs() <= 1e-10));
        }

        #[test]
        fn j_invariant_under_action_relabeling(seed in 0u64..5000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (ns, na) = (4, 3);
            let mdp = TabularMdp::random(ns, na, 0.9, &mut rng);
            let pi = random_policy(ns, na, &mut rng);
            let perm = [2usize, 0, 1];
            let mut transition = Array3::<f64>::zeros((ns, na, ns));
            let mut reward = Array2::<f64>::zeros((ns, na));
            let mut probs = Array2::<f64>::zeros((ns, na));
            for s in 0..ns {
                for a in 0..na {
                    for s2 in 0..ns {
                        transition[[s, perm[a], s2]] = mdp.transition()[[s, a, s2]];
                    }
                    reward[[s, perm[a]]] = mdp.reward()[[s, a]];
                    probs[[s, perm[a]]] = pi.prob(s, a);
                }
            }
            let relabeled = TabularMdp::with_simplex_embedding(
                transition, reward, mdp.gamma(), mdp.initial_dist().clone()).unwrap();
            let pi2 = Policy::from_probs(&probs).unwrap();
            let j1 = expected_return(&mdp, &pi).unwrap();
            let j2 = expected_return(&relabeled, &pi2).unwrap();
            prop_assert!((j1 - j2).abs() < 1e-9);
        }
    }
}
