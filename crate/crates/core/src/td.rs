//! TD semigradient updates for the particle critic.
//!
//! The vector field driving a particle is
//! g(θ; ρ, π) = −E_{(s,a)~Φ̃^π, (s',a')~P̃^π}[(Q(x) − r(x) − γQ(x')) α^{-1} ∇_θσ(x;θ)],
//! evaluated exactly by summation over the finite grid. Expected steps apply
//! ε′·g per particle; stochastic steps realize the sampled update with the
//! same (ε′/α) scaling. Draws come i.i.d. from the exact categorical
//! distributions, not a Markovian trajectory.

use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{self, Policy, TabularMdp, VisitationMeasure};
use crate::net::{grad_sigma_act, Activation, ParticleEnsemble};

/// Updates abort when a rescaling coordinate passes this magnitude: tanh is
/// saturated there and further motion is meaningless.
pub const B_SATURATION_ABORT: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TdMode {
    /// Exact summation over the finite grid (default for theorem-checking).
    Expected,
    /// Sampled transitions from the exact categorical distributions.
    Stochastic,
}

/// Critic stepsize configuration. ε′ = η·ε when driven by the harness.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TdConfig {
    /// TD stepsize ε′.
    pub eps_prime: f64,
    /// Relative TD timescale η = ε′/ε.
    pub eta: f64,
    pub mode: TdMode,
    /// Batch size for stochastic mode.
    pub batch: usize,
}

impl Default for TdConfig {
    fn default() -> Self {
        TdConfig {
            eps_prime: 1e-3,
            eta: 1.0,
            mode: TdMode::Expected,
            batch: 1,
        }
    }
}

/// The evaluation distribution φ̃^π and the TD weighting Φ̃^π built from a
/// base distribution φ̃₀.
#[derive(Debug, Clone)]
pub struct Weighting {
    /// φ̃^π = ½ φ̃₀ + ½ (φ₀ ⊗ π), with φ₀ the state marginal of φ̃₀.
    pub eval_dist: VisitationMeasure,
    /// Φ̃^π = 𝓔̃^π_{φ̃^π}, the visitation measure started from φ̃^π.
    pub sampling: VisitationMeasure,
}

/// Construct φ̃^π and Φ̃^π from the base distribution.
pub fn weighting_distribution(
    mdp: &TabularMdp,
    policy: &Policy,
    base: &VisitationMeasure,
) -> Result<Weighting> {
    if base.weights().dim() != (mdp.n_states(), mdp.n_actions()) {
        return Err(Error::DimensionMismatch("base distribution shape".into()));
    }
    let phi0 = base.state_marginal();
    let table = Array2::from_shape_fn((mdp.n_states(), mdp.n_actions()), |(s, a)| {
        0.5 * base.weight(s, a) + 0.5 * phi0[s] * policy.prob(s, a)
    });
    let eval_dist = VisitationMeasure::new(table)?;
    let sampling = mdp::visitation(mdp, policy, &eval_dist)?;
    Ok(Weighting { eval_dist, sampling })
}

/// g(θ) from a frozen Q table:
/// g = −Σ_x Φ̃(x) δ(x) α^{-1} ∇σ(x; θ) with δ the expected TD residual.
#[allow(clippy::too_many_arguments)]
pub fn td_vector_field_with_q(
    theta: &[f64],
    q_table: &Array2<f64>,
    mdp: &TabularMdp,
    policy: &Policy,
    weighting: &VisitationMeasure,
    alpha: f64,
    b_beta: f64,
    act: Activation,
) -> Result<Vec<f64>> {
    let residual = mdp::bellman_residual_table(mdp, policy, q_table)?;
    let mut g = vec![0.0; theta.len()];
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            let w = weighting.weight(s, a);
            if w == 0.0 {
                continue;
            }
            let coeff = -w * residual[[s, a]] / alpha;
            let x = mdp.input_row(mdp.pair_index(s, a));
            let grad = grad_sigma_act(act, theta, x.as_slice().expect("contiguous row"), b_beta);
            for (gi, gr) in g.iter_mut().zip(&grad) {
                *gi += coeff * gr;
            }
        }
    }
    Ok(g)
}

/// g(θ; ρ, π) for the ensemble's own Q.
pub fn td_vector_field(
    theta: &[f64],
    ens: &ParticleEnsemble,
    mdp: &TabularMdp,
    policy: &Policy,
    weighting: &VisitationMeasure,
) -> Result<Vec<f64>> {
    let q_table = ens.q_table(mdp)?;
    td_vector_field_with_q(
        theta,
        &q_table,
        mdp,
        policy,
        weighting,
        ens.alpha(),
        ens.b_beta(),
        ens.activation(),
    )
}

/// Per-step statistics reported by the update routines.
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    /// Largest per-particle displacement norm this step.
    pub max_displacement: f64,
}

/// One expected (exact-summation) TD step: θ^{(i)} ← θ^{(i)} + ε′ g(θ^{(i)}).
///
/// Two phases: the Q table and residual are frozen first, then all particle
/// displacements are applied by a single writer; an abort leaves the
/// ensemble untouched.
pub fn expected_td_step(
    ens: &mut ParticleEnsemble,
    mdp: &TabularMdp,
    policy: &Policy,
    weighting: &VisitationMeasure,
    cfg: &TdConfig,
    iteration: usize,
) -> Result<StepStats> {
    let q_table = ens.q_table(mdp)?;
    let residual = mdp::bellman_residual_table(mdp, policy, &q_table)?;
    let mut terms: Vec<(f64, usize)> = Vec::new();
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            let w = weighting.weight(s, a);
            if w != 0.0 {
                terms.push((w * residual[[s, a]], mdp.pair_index(s, a)));
            }
        }
    }
    apply_weighted_terms(ens, mdp, &terms, cfg.eps_prime, iteration)
}

/// One stochastic DF-TD step: draws `cfg.batch` pairs (s,a) ~ Φ̃^π and
/// next pairs (s',a') ~ P̃^π(·|s,a), then applies the batch-averaged update.
pub fn stochastic_td_step(
    ens: &mut ParticleEnsemble,
    mdp: &TabularMdp,
    policy: &Policy,
    weighting: &VisitationMeasure,
    cfg: &TdConfig,
    iteration: usize,
    rng: &mut ChaCha8Rng,
) -> Result<StepStats> {
    if cfg.batch == 0 {
        return Err(Error::InvalidParameter("stochastic batch must be >= 1".into()));
    }
    let sampler = PairSampler::new(mdp, policy, weighting)?;
    let q_table = ens.q_table(mdp)?;
    let mut batch = Vec::with_capacity(cfg.batch);
    let w = 1.0 / cfg.batch as f64;
    for _ in 0..cfg.batch {
        let (pair, next_pair) = sampler.draw(rng);
        let (s, a) = (pair / mdp.n_actions(), pair % mdp.n_actions());
        let (s2, a2) = (next_pair / mdp.n_actions(), next_pair % mdp.n_actions());
        let delta = q_table[[s, a]] - mdp.reward()[[s, a]] - mdp.gamma() * q_table[[s2, a2]];
        batch.push((w * delta, pair));
    }
    apply_weighted_terms(ens, mdp, &batch, cfg.eps_prime, iteration)
}

/// Weighted-batch DF-TD primitive: applies
/// θ^{(i)} ← θ^{(i)} − (ε′/α) Σ_k weight_k δ_k ∇σ(x_k; θ^{(i)}),
/// where each term carries a residual sample δ_k at grid input x_k.
/// Enumerating the full support with exact probabilities recovers the
/// expected step.
pub fn td_step_from_samples(
    ens: &mut ParticleEnsemble,
    mdp: &TabularMdp,
    samples: &[TdSample],
    eps_prime: f64,
    iteration: usize,
) -> Result<StepStats> {
    let q_table = ens.q_table(mdp)?;
    let terms: Vec<(f64, usize)> = samples
        .iter()
        .map(|smp| {
            let (s, a) = (smp.pair / mdp.n_actions(), smp.pair % mdp.n_actions());
            let (s2, a2) = (smp.next_pair / mdp.n_actions(), smp.next_pair % mdp.n_actions());
            let delta =
                q_table[[s, a]] - mdp.reward()[[s, a]] - mdp.gamma() * q_table[[s2, a2]];
            (smp.weight * delta, smp.pair)
        })
        .collect();
    apply_weighted_terms(ens, mdp, &terms, eps_prime, iteration)
}

/// A weighted transition sample for [`td_step_from_samples`].
#[derive(Debug, Clone, Copy)]
pub struct TdSample {
    /// Flattened (s, a).
    pub pair: usize,
    /// Flattened (s', a').
    pub next_pair: usize,
    pub weight: f64,
}

/// Shared displacement application: terms are (coefficient, pair index) with
/// coefficient already carrying weight × residual.
fn apply_weighted_terms(
    ens: &mut ParticleEnsemble,
    mdp: &TabularMdp,
    terms: &[(f64, usize)],
    eps_prime: f64,
    iteration: usize,
) -> Result<StepStats> {
    let m = ens.m();
    let dim = ens.dim();
    let scale = -eps_prime / ens.alpha();
    let act = ens.activation();
    let b_beta = ens.b_beta();
    let mut disp = Array2::<f64>::zeros((m, dim));
    let mut max_disp: f64 = 0.0;
    for i in 0..m {
        let theta = ens.particle(i).to_vec();
        let mut row = vec![0.0; dim];
        for &(coeff, pair) in terms {
            let x = mdp.input_row(pair);
            let grad = grad_sigma_act(act, &theta, x.as_slice().expect("contiguous row"), b_beta);
            for (acc, g) in row.iter_mut().zip(&grad) {
                *acc += coeff * g;
            }
        }
        let mut norm2 = 0.0;
        for j in 0..dim {
            let v = scale * row[j];
            disp[[i, j]] = v;
            norm2 += v * v;
        }
        max_disp = max_disp.max(norm2.sqrt());
    }
    ens.apply_displacements(&disp, B_SATURATION_ABORT, iteration)?;
    Ok(StepStats {
        max_displacement: max_disp,
    })
}

/// Exact categorical sampler over pairs from Φ̃^π, and next pairs from P̃^π.
pub struct PairSampler {
    pair_index: WeightedIndex<f64>,
    next_index: Vec<WeightedIndex<f64>>,
}

impl PairSampler {
    pub fn new(mdp: &TabularMdp, policy: &Policy, weighting: &VisitationMeasure) -> Result<Self> {
        let n = mdp.n_pairs();
        let weights: Vec<f64> = (0..n)
            .map(|i| weighting.weight(i / mdp.n_actions(), i % mdp.n_actions()))
            .collect();
        let pair_index = WeightedIndex::new(&weights)
            .map_err(|e| Error::InvalidDistribution(format!("pair sampler: {e}")))?;
        let kernel = mdp.induced_kernel(policy)?;
        let mut next_index = Vec::with_capacity(n);
        for i in 0..n {
            let row: Vec<f64> = (0..n).map(|j| kernel[[i, j]]).collect();
            next_index.push(
                WeightedIndex::new(&row)
                    .map_err(|e| Error::InvalidDistribution(format!("next sampler: {e}")))?,
            );
        }
        Ok(PairSampler { pair_index, next_index })
    }

    /// Draw ((s,a), (s',a')) as flattened pair indices.
    pub fn draw(&self, rng: &mut ChaCha8Rng) -> (usize, usize) {
        let pair = self.pair_index.sample(rng);
        let next = self.next_index[pair].sample(rng);
        (pair, next)
    }
}

/// Weighted L2 policy-evaluation error ‖Q_ens − Q^π‖_{2,φ̃} with Q^π exact.
pub fn policy_eval_error(
    ens: &ParticleEnsemble,
    mdp: &TabularMdp,
    policy: &Policy,
    eval_dist: &VisitationMeasure,
) -> Result<f64> {
    let q_star = mdp::exact_q(mdp, policy)?;
    let q_ens = ens.q_table(mdp)?;
    Ok(policy_eval_error_with_q(&q_ens, &q_star, eval_dist))
}

/// Same error from precomputed tables.
pub fn policy_eval_error_with_q(
    q_ens: &Array2<f64>,
    q_star: &Array2<f64>,
    eval_dist: &VisitationMeasure,
) -> f64 {
    let mut acc = 0.0;
    for ((sa, &qe), &qs) in q_ens.indexed_iter().zip(q_star.iter()) {
        acc += eval_dist.weight(sa.0, sa.1) * (qe - qs).powi(2);
    }
    acc.sqrt()
}
