//! Gauss–Hermite quadrature for one-dimensional Gaussian expectations.
//!
//! All Gaussian-vs-activation integrals in this crate reduce to
//! E_{z~N(m,s²)}[f(z)] along a projected direction and are evaluated with a
//! fixed 64-node rule.

use std::sync::OnceLock;

use nalgebra::{DMatrix, SymmetricEigen};

/// Number of nodes used by the shared rule.
pub const GH_NODES: usize = 64;

/// A Gauss–Hermite rule in the physicists' convention:
/// ∫ e^{-t²} f(t) dt ≈ Σ w_i f(t_i).
#[derive(Debug, Clone)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    /// Build an n-node rule via Golub–Welsch: eigenvalues of the symmetric
    /// tridiagonal companion matrix with off-diagonal sqrt(k/2) are the nodes,
    /// and the squared first eigenvector components (times √π) the weights.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "quadrature degree must be at least 1");
        let mut companion = DMatrix::<f64>::zeros(n, n);
        for k in 0..n - 1 {
            let off = ((k as f64 + 1.0) / 2.0).sqrt();
            companion[(k, k + 1)] = off;
            companion[(k + 1, k)] = off;
        }
        let eig = SymmetricEigen::new(companion);
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let node = eig.eigenvalues[i];
                let v0 = eig.eigenvectors[(0, i)];
                let weight = std::f64::consts::PI.sqrt() * v0 * v0;
                (node, weight)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        GaussHermite {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1).collect(),
        }
    }

    /// E_{z~N(0,1)}[f(z)] = (1/√π) Σ w_i f(√2 t_i).
    pub fn expect_standard_normal(&self, f: impl Fn(f64) -> f64) -> f64 {
        let inv_sqrt_pi = 1.0 / std::f64::consts::PI.sqrt();
        let mut acc = 0.0;
        for (&t, &w) in self.nodes.iter().zip(&self.weights) {
            acc += w * f(std::f64::consts::SQRT_2 * t);
        }
        acc * inv_sqrt_pi
    }

    /// E_{z~N(mean, std²)}[f(z)].
    pub fn expect_normal(&self, mean: f64, std: f64, f: impl Fn(f64) -> f64) -> f64 {
        let inv_sqrt_pi = 1.0 / std::f64::consts::PI.sqrt();
        let mut acc = 0.0;
        for (&t, &w) in self.nodes.iter().zip(&self.weights) {
            acc += w * f(mean + std * std::f64::consts::SQRT_2 * t);
        }
        acc * inv_sqrt_pi
    }
}

/// Shared 64-node rule.
pub fn gh64() -> &'static GaussHermite {
    static RULE: OnceLock<GaussHermite> = OnceLock::new();
    RULE.get_or_init(|| GaussHermite::new(GH_NODES))
}
