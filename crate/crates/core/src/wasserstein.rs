//! Empirical Wasserstein-2 distances, the scaled metric W̃₂ = α·W₂, and the
//! restarting mechanism.
//!
//! The exact estimator solves a min-cost perfect matching with squared
//! Euclidean costs (shortest-augmenting-path Hungarian, O(N³), N ≤ 1024);
//! the sliced estimator is the RMS of one-dimensional W₂ distances along
//! random unit directions.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::ParticleEnsemble;

/// The exact matcher is quadratic in memory and cubic in time; beyond this
/// many samples use the sliced estimator.
pub const EXACT_MATCH_LIMIT: usize = 1024;

/// Minimum-cost perfect matching on a square cost matrix via the Hungarian
/// algorithm with potentials. Returns the column assigned to each row.
fn solve_assignment(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.dim().0;
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    // p[j] = row matched to column j (1-indexed; 0 means free).
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

fn check_samples(a: &Array2<f64>, b: &Array2<f64>) -> Result<(usize, usize)> {
    let (na, da) = a.dim();
    let (nb, db) = b.dim();
    if na != nb || da != db {
        return Err(Error::DimensionMismatch(format!(
            "sample shapes {na}x{da} vs {nb}x{db}; equal counts and dimensions required"
        )));
    }
    if na == 0 {
        return Err(Error::InvalidParameter("empty sample sets".into()));
    }
    Ok((na, da))
}

/// Exact empirical W₂ between equal-size sample sets:
/// √(min-cost perfect matching with squared Euclidean costs / N).
pub fn w2_exact(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    let (n, d) = check_samples(a, b)?;
    if n > EXACT_MATCH_LIMIT {
        return Err(Error::InvalidParameter(format!(
            "exact matcher limited to {EXACT_MATCH_LIMIT} samples, got {n}"
        )));
    }
    let mut cost = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let mut c = 0.0;
            for k in 0..d {
                let diff = a[[i, k]] - b[[j, k]];
                c += diff * diff;
            }
            cost[[i, j]] = c;
        }
    }
    let assign = solve_assignment(&cost);
    let total: f64 = (0..n).map(|i| cost[[i, assign[i]]]).sum();
    Ok((total / n as f64).max(0.0).sqrt())
}

/// One-dimensional empirical W₂ via the monotone (sorted) coupling.
pub fn w2_one_dim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::DimensionMismatch("1-D samples need equal nonzero lengths".into()));
    }
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let acc: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - y).powi(2)).sum();
    Ok((acc / a.len() as f64).sqrt())
}

/// Sliced W₂: RMS over `n_proj` random unit directions of the 1-D W₂ of the
/// projected samples. Deterministic given the seed.
pub fn w2_sliced(a: &Array2<f64>, b: &Array2<f64>, n_proj: usize, seed: u64) -> Result<f64> {
    let (n, d) = check_samples(a, b)?;
    if n_proj == 0 {
        return Err(Error::InvalidParameter("need at least one projection".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    let mut pa = vec![0.0; n];
    let mut pb = vec![0.0; n];
    for _ in 0..n_proj {
        let mut dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm: f64 = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        dir.iter_mut().for_each(|v| *v /= norm);
        for i in 0..n {
            pa[i] = (0..d).map(|k| a[[i, k]] * dir[k]).sum();
            pb[i] = (0..d).map(|k| b[[i, k]] * dir[k]).sum();
        }
        let w = w2_one_dim(&pa, &pb)?;
        acc += w * w;
    }
    Ok((acc / n_proj as f64).sqrt())
}

/// Which empirical estimator backs a W̃₂ measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum W2Estimator {
    Exact,
    Sliced { n_projections: usize, seed: u64 },
}

impl W2Estimator {
    pub fn distance(&self, a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
        match self {
            W2Estimator::Exact => w2_exact(a, b),
            W2Estimator::Sliced { n_projections, seed } => w2_sliced(a, b, *n_projections, *seed),
        }
    }
}

/// Scaled metric W̃₂ = α·W₂ between the ensemble's empirical measure and a
/// frozen reference sample.
pub fn tilde_w2(
    ens: &ParticleEnsemble,
    ref_sample: &Array2<f64>,
    estimator: &W2Estimator,
) -> Result<f64> {
    Ok(ens.alpha() * estimator.distance(ens.particles(), ref_sample)?)
}

/// Draw an N×D standard-normal sample on a dedicated ChaCha stream.
pub fn standard_normal_sample(n: usize, dim: usize, seed: u64, stream: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    Array2::from_shape_fn((n, dim), |_| StandardNormal.sample(&mut rng))
}

/// Sampling-noise floor of the chosen estimator at this sample size: the raw
/// (unscaled) W₂ between two independent N-sample draws from N(0, I_D).
/// Restart thresholds should sit above α times this value.
pub fn noise_floor(n: usize, dim: usize, seed: u64, estimator: &W2Estimator) -> Result<f64> {
    let a = standard_normal_sample(n, dim, seed, 0);
    let b = standard_normal_sample(n, dim, seed, 1);
    estimator.distance(&a, &b)
}

/// Restart configuration: threshold W̃₀ (a config surrogate for λD̄), check
/// cadence in TD steps, the frozen reference draw from ρ₀, and the estimator.
#[derive(Debug, Clone)]
pub struct RestartPolicy {
    pub threshold: f64,
    pub check_every: usize,
    /// λ, kept as metadata; thresholds default to λ × (noise floor) × α.
    pub lambda_scale: f64,
    pub ref_sample: Array2<f64>,
    pub estimator: W2Estimator,
}

impl RestartPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "restart threshold must be positive, got {}",
                self.threshold
            )));
        }
        if self.check_every == 0 {
            return Err(Error::InvalidParameter("restart cadence must be >= 1".into()));
        }
        Ok(())
    }
}

/// A restart that actually fired.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RestartEvent {
    pub step: usize,
    pub t: f64,
    pub tilde_w2: f64,
    pub threshold: f64,
    pub restart_index: usize,
}

/// Outcome of a restart check.
#[derive(Debug, Clone, Copy)]
pub struct RestartCheck {
    pub tilde_w2: f64,
    pub event: Option<RestartEvent>,
}

/// Stateful monitor wrapping a [`RestartPolicy`]: measures W̃₂(ρ_t, ρ₀) on
/// cadence and resamples the ensemble from ρ₀ when the threshold is hit,
/// leaving α, B_β, and the actor policy untouched.
#[derive(Debug)]
pub struct RestartMonitor {
    pub policy: RestartPolicy,
    pub restarts: usize,
    rng: ChaCha8Rng,
}

impl RestartMonitor {
    pub fn new(policy: RestartPolicy, resample_seed: u64) -> Result<RestartMonitor> {
        policy.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(resample_seed);
        rng.set_stream(4);
        Ok(RestartMonitor { policy, restarts: 0, rng })
    }

    /// Whether `step` is a check point.
    pub fn due(&self, step: usize) -> bool {
        step > 0 && step % self.policy.check_every == 0
    }

    /// Measure W̃₂ without side effects.
    pub fn measure(&self, ens: &ParticleEnsemble) -> Result<f64> {
        tilde_w2(ens, &self.policy.ref_sample, &self.policy.estimator)
    }

    /// Measure and, if at or above threshold, resample the particles from
    /// N(0, I_D) on a fresh seed stream.
    pub fn check(&mut self, ens: &mut ParticleEnsemble, step: usize, t: f64) -> Result<RestartCheck> {
        let w = self.measure(ens)?;
        if w >= self.policy.threshold {
            ens.resample_standard_normal(&mut self.rng);
            self.restarts += 1;
            let event = RestartEvent {
                step,
                t,
                tilde_w2: w,
                threshold: self.policy.threshold,
                restart_index: self.restarts,
            };
            return Ok(RestartCheck { tilde_w2: w, event: Some(event) });
        }
        Ok(RestartCheck { tilde_w2: w, event: None })
    }
}
