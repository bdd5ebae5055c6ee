//! Particle-ensemble realization of the mean-field critic.
//!
//! A single particle θ = (b, w) ∈ ℝ^D with D = d + 2 contributes
//! σ(s,a;θ) = B_β · β(b) · σ̃(wᵀ(s,a,1)), and the critic is the scaled
//! ensemble average Q(x) = (α/M) Σ_i σ(x; θ^{(i)}).

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::TabularMdp;

/// Activation pair used for both the rescaling function β and the inner
/// activation σ̃. Any member must be odd, bounded, Lipschitz, and smooth.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    #[default]
    Tanh,
}

impl Activation {
    #[inline]
    pub fn value(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
        }
    }

    /// First derivative; for tanh this is sech²(z) = 1 − tanh²(z).
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

/// σ(x; θ) = B_β · β(b) · σ̃(wᵀx) with x already carrying the constant
/// coordinate, θ = (b, w).
pub fn sigma_forward_act(act: Activation, theta: &[f64], x: &[f64], b_beta: f64) -> f64 {
    debug_assert_eq!(theta.len(), x.len() + 1);
    let b = theta[0];
    let u = dot(&theta[1..], x);
    b_beta * act.value(b) * act.value(u)
}

/// σ with the default tanh pair.
pub fn sigma_forward(theta: &[f64], x: &[f64], b_beta: f64) -> f64 {
    sigma_forward_act(Activation::Tanh, theta, x, b_beta)
}

/// Analytic ∇_θ σ(x; θ):
/// ∂b = B_β β'(b) σ̃(wᵀx), ∂w = B_β β(b) σ̃'(wᵀx) x.
pub fn grad_sigma_act(act: Activation, theta: &[f64], x: &[f64], b_beta: f64) -> Vec<f64> {
    debug_assert_eq!(theta.len(), x.len() + 1);
    let b = theta[0];
    let u = dot(&theta[1..], x);
    let mut grad = vec![0.0; theta.len()];
    grad[0] = b_beta * act.derivative(b) * act.value(u);
    let scale = b_beta * act.value(b) * act.derivative(u);
    for (g, &xi) in grad[1..].iter_mut().zip(x) {
        *g = scale * xi;
    }
    grad
}

/// ∇σ with the default tanh pair.
pub fn grad_sigma(theta: &[f64], x: &[f64], b_beta: f64) -> Vec<f64> {
    grad_sigma_act(Activation::Tanh, theta, x, b_beta)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// M parameter particles θ^{(i)} = (b, w) with scaling α, realizing the
/// critic Q(x) = (α/M) Σ_i σ(x; θ^{(i)}).
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    /// M×D matrix, one particle per row.
    particles: Array2<f64>,
    alpha: f64,
    b_beta: f64,
    seed: u64,
    activation: Activation,
}

impl ParticleEnsemble {
    /// Draw M particles i.i.d. from N(0, I_D) with D = d + 2. In antithetic
    /// mode consecutive rows are paired as (b, w) / (−b, w) so Q ≡ 0 exactly
    /// at initialization; M must be even there.
    pub fn init(
        m: usize,
        input_dim: usize,
        alpha: f64,
        b_beta: f64,
        seed: u64,
        antithetic: bool,
    ) -> Result<ParticleEnsemble> {
        if m == 0 {
            return Err(Error::InvalidParameter("ensemble needs at least one particle".into()));
        }
        if antithetic && m % 2 != 0 {
            return Err(Error::InvalidParameter(format!(
                "antithetic initialization needs an even particle count, got {m}"
            )));
        }
        if !(alpha >= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "scaling alpha must satisfy alpha >= 1, got {alpha}"
            )));
        }
        if !(b_beta > 0.0) {
            return Err(Error::InvalidParameter(format!("B_beta must be positive, got {b_beta}")));
        }
        let d_total = input_dim + 2;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut particles = Array2::<f64>::zeros((m, d_total));
        if antithetic {
            for pair in 0..m / 2 {
                let row: Vec<f64> = (0..d_total)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                for j in 0..d_total {
                    particles[[2 * pair, j]] = row[j];
                    particles[[2 * pair + 1, j]] = row[j];
                }
                particles[[2 * pair + 1, 0]] = -row[0];
            }
        } else {
            for i in 0..m {
                for j in 0..d_total {
                    particles[[i, j]] = StandardNormal.sample(&mut rng);
                }
            }
        }
        Ok(ParticleEnsemble {
            particles,
            alpha,
            b_beta,
            seed,
            activation: Activation::Tanh,
        })
    }

    pub fn from_particles(particles: Array2<f64>, alpha: f64, b_beta: f64) -> Result<ParticleEnsemble> {
        if particles.dim().0 == 0 || particles.dim().1 < 3 {
            return Err(Error::InvalidParameter("particle matrix must be M×(d+2) with d ≥ 1".into()));
        }
        if particles.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("particle matrix has non-finite entries".into()));
        }
        Ok(ParticleEnsemble {
            particles,
            alpha,
            b_beta,
            seed: 0,
            activation: Activation::Tanh,
        })
    }

    pub fn m(&self) -> usize {
        self.particles.dim().0
    }

    /// Parameter dimension D = d + 2.
    pub fn dim(&self) -> usize {
        self.particles.dim().1
    }

    /// Embedding dimension d.
    pub fn input_dim(&self) -> usize {
        self.dim() - 2
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn b_beta(&self) -> f64 {
        self.b_beta
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn particles(&self) -> &Array2<f64> {
        &self.particles
    }

    pub fn particle(&self, i: usize) -> ndarray::ArrayView1<'_, f64> {
        self.particles.row(i)
    }

    /// Q(x) = (α/M) Σ_i σ(x; θ^{(i)}).
    pub fn q_forward(&self, x: &[f64]) -> f64 {
        if x.len() + 1 != self.dim() {
            panic!(
                "input has dimension {}, ensemble expects {}",
                x.len(),
                self.dim() - 1
            );
        }
        let mut acc = 0.0;
        for i in 0..self.m() {
            let row = self.particles.row(i);
            acc += sigma_forward_act(
                self.activation,
                row.as_slice().expect("row-major layout"),
                x,
                self.b_beta,
            );
        }
        self.alpha * acc / self.m() as f64
    }

    /// Batch Q over the MDP's embedded grid.
    pub fn q_table(&self, mdp: &TabularMdp) -> Result<Array2<f64>> {
        if mdp.embed_dim() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "MDP embedding dimension {} vs ensemble input dimension {}",
                mdp.embed_dim(),
                self.input_dim()
            )));
        }
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        let mut table = Array2::<f64>::zeros((ns, na));
        for s in 0..ns {
            for a in 0..na {
                let x = mdp.input_row(mdp.pair_index(s, a));
                table[[s, a]] = self.q_forward(x.as_slice().expect("contiguous input row"));
            }
        }
        Ok(table)
    }

    /// Apply precomputed per-particle displacements (two-phase update:
    /// contributors freeze the Q table first, then a single writer applies).
    /// Aborts without mutating when any displaced entry is non-finite or a
    /// displaced |b| exceeds `max_abs_b`.
    pub fn apply_displacements(
        &mut self,
        displacements: &Array2<f64>,
        max_abs_b: f64,
        iteration: usize,
    ) -> Result<()> {
        if displacements.dim() != self.particles.dim() {
            return Err(Error::DimensionMismatch("displacement matrix shape".into()));
        }
        for i in 0..self.m() {
            for j in 0..self.dim() {
                let new = self.particles[[i, j]] + displacements[[i, j]];
                if !new.is_finite() {
                    return Err(Error::NumericalAbort {
                        iteration,
                        detail: format!(
                            "particle {i} coordinate {j}: {} + {} is not finite",
                            self.particles[[i, j]],
                            displacements[[i, j]]
                        ),
                    });
                }
                if j == 0 && new.abs() > max_abs_b {
                    return Err(Error::NumericalAbort {
                        iteration,
                        detail: format!(
                            "particle {i} rescaling coordinate |b| = {} exceeds {max_abs_b} \
                             (tanh saturation; further motion is meaningless)",
                            new.abs()
                        ),
                    });
                }
            }
        }
        self.particles += displacements;
        Ok(())
    }

    /// Redraw every particle i.i.d. from N(0, I_D); used by the restarting
    /// mechanism. α and B_β are unchanged.
    pub fn resample_standard_normal(&mut self, rng: &mut ChaCha8Rng) {
        for v in self.particles.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
    }

    /// Checkpoint: header `M D alpha b_beta seed`, then one whitespace-separated
    /// row per particle. Floats print with Rust's shortest round-trip
    /// representation, so decode is exact.
    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<()> {
        use std::fmt::Write as _;
        let mut text = String::new();
        let _ = writeln!(
            text,
            "{} {} {} {} {}",
            self.m(),
            self.dim(),
            self.alpha,
            self.b_beta,
            self.seed
        );
        for i in 0..self.m() {
            let row: Vec<String> = self.particles.row(i).iter().map(|v| format!("{v}")).collect();
            let _ = writeln!(text, "{}", row.join(" "));
        }
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &std::path::Path) -> Result<ParticleEnsemble> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty checkpoint".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(Error::Parse(format!(
                "checkpoint header needs 5 fields, got {}",
                fields.len()
            )));
        }
        let m: usize = fields[0].parse().map_err(|_| Error::Parse("bad M".into()))?;
        let dim: usize = fields[1].parse().map_err(|_| Error::Parse("bad D".into()))?;
        let alpha: f64 = fields[2].parse().map_err(|_| Error::Parse("bad alpha".into()))?;
        let b_beta: f64 = fields[3].parse().map_err(|_| Error::Parse("bad B_beta".into()))?;
        let seed: u64 = fields[4].parse().map_err(|_| Error::Parse("bad seed".into()))?;
        let mut particles = Array2::<f64>::zeros((m, dim));
        for i in 0..m {
            let line = lines
                .next()
                .ok_or_else(|| Error::Parse(format!("checkpoint truncated at row {i}")))?;
            let row: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| Error::Parse(format!("bad float {t}"))))
                .collect::<Result<_>>()?;
            if row.len() != dim {
                return Err(Error::Parse(format!("row {i} has {} entries", row.len())));
            }
            for j in 0..dim {
                particles[[i, j]] = row[j];
            }
        }
        Ok(ParticleEnsemble {
            particles,
            alpha,
            b_beta,
            seed,
            activation: Activation::Tanh,
        })
    }
}
