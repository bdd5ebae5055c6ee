//! Closed-form PPO actor updates and the replicator right-hand side.
//!
//! The discrete update is the exact exponential-Euler integrator of the
//! replicator flow for a piecewise-constant Q:
//! log π'(a|s) = log π(a|s) + ε Q(s,a) − log Σ_a exp(log π(a|s) + ε Q(s,a)).

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{Policy, VisitationMeasure};

/// Actor stepsize ε and continuous-time horizon T ≈ K·ε.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ActorConfig {
    pub eps_actor: f64,
    pub t_end: f64,
}

impl ActorConfig {
    /// Iteration count K = round(T/ε); the ratio must be integral within
    /// rounding and at least one.
    pub fn steps(&self) -> Result<usize> {
        if !(self.eps_actor > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "eps_actor must be positive to derive a step count, got {}",
                self.eps_actor
            )));
        }
        let ratio = self.t_end / self.eps_actor;
        let k = ratio.round();
        if (ratio - k).abs() > 1e-6 * ratio.max(1.0) {
            return Err(Error::InvalidParameter(format!(
                "t_end/eps_actor = {ratio} is not an integer step count"
            )));
        }
        if k < 1.0 {
            return Err(Error::InvalidParameter("horizon shorter than one step".into()));
        }
        Ok(k as usize)
    }
}

/// One closed-form PPO step with the exact log-sum-exp normalizer.
pub fn df_ppo_step(policy: &Policy, q_table: &Array2<f64>, eps_actor: f64) -> Result<Policy> {
    let (ns, na) = (policy.n_states(), policy.n_actions());
    if q_table.dim() != (ns, na) {
        return Err(Error::DimensionMismatch("Q table shape for PPO step".into()));
    }
    if q_table.iter().any(|q| !q.is_finite()) {
        return Err(Error::InvalidParameter("Q table has non-finite entries".into()));
    }
    let mut log_probs = Array2::<f64>::zeros((ns, na));
    for s in 0..ns {
        let shifted: Vec<f64> = (0..na)
            .map(|a| policy.log_prob(s, a) + eps_actor * q_table[[s, a]])
            .collect();
        let max = shifted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + shifted.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        for a in 0..na {
            log_probs[[s, a]] = shifted[a] - lse;
        }
    }
    Policy::from_log_probs(log_probs)
}

/// Replicator right-hand side dπ(a|s) = π(a|s)(Q(s,a) − ⟨Q(s,·), π(·|s)⟩);
/// rows sum to zero.
pub fn replicator_rhs(policy: &Policy, q_table: &Array2<f64>) -> Result<Array2<f64>> {
    let (ns, na) = (policy.n_states(), policy.n_actions());
    if q_table.dim() != (ns, na) {
        return Err(Error::DimensionMismatch("Q table shape for replicator".into()));
    }
    let mut out = Array2::<f64>::zeros((ns, na));
    for s in 0..ns {
        let mean: f64 = (0..na).map(|a| policy.prob(s, a) * q_table[[s, a]]).sum();
        for a in 0..na {
            out[[s, a]] = policy.prob(s, a) * (q_table[[s, a]] - mean);
        }
    }
    Ok(out)
}

/// State-weighted KL divergence Σ_s w(s) KL(π*(·|s) ‖ π(·|s)); this is the
/// quantity ζ when w is the optimal policy's state visitation.
pub fn kl_weighted(
    policy_star: &Policy,
    policy: &Policy,
    state_weights: &Array1<f64>,
) -> Result<f64> {
    let (ns, na) = (policy_star.n_states(), policy_star.n_actions());
    if policy.n_states() != ns || policy.n_actions() != na {
        return Err(Error::DimensionMismatch("policy shapes for KL".into()));
    }
    if state_weights.len() != ns {
        return Err(Error::DimensionMismatch("state weight length".into()));
    }
    let mut acc = 0.0;
    for s in 0..ns {
        let mut kl = 0.0;
        for a in 0..na {
            let p = policy_star.prob(s, a);
            if p > 0.0 {
                kl += p * (policy_star.log_prob(s, a) - policy.log_prob(s, a));
            }
        }
        acc += state_weights[s] * kl;
    }
    Ok(acc)
}

/// Concentrability coefficient κ = ‖visitation_star / base‖_∞.
///
/// The base must be strictly positive wherever the visitation carries mass;
/// a zero-base cell on the support is an infinite-support violation.
pub fn concentrability(
    visitation_star: &VisitationMeasure,
    base: &VisitationMeasure,
) -> Result<f64> {
    if visitation_star.weights().dim() != base.weights().dim() {
        return Err(Error::DimensionMismatch("visitation/base shapes".into()));
    }
    let max_v = visitation_star
        .weights()
        .iter()
        .cloned()
        .fold(0.0f64, f64::max);
    let support_tol = 1e-14 * max_v;
    let mut kappa: f64 = 0.0;
    for (v, b) in visitation_star.weights().iter().zip(base.weights().iter()) {
        if *b > 0.0 {
            kappa = kappa.max(v / b);
        } else if *v > support_tol {
            return Err(Error::Domain(format!(
                "base distribution vanishes on the support (visitation mass {v})"
            )));
        }
    }
    Ok(kappa)
}
