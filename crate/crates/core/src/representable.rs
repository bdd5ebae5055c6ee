//! MDPs whose reward and transition kernel are activation integrals against
//! mixture measures, and the representing measure ρ_π that realizes Q^π.
//!
//! The reward is represented as r(s,a) = B_r ∫ σ̃(wᵀx) μ(dw) and the kernel
//! as P(s'|s,a) = ∫ σ̃(wᵀx) φ(s') ψ(s'; dw), with μ and ψ(s';·) probability
//! mixtures. From these the representing measure is assembled as
//!   Z_π  = B_r + γ Σ_{s'} φ(s') V^π(s'),
//!   ν_π  = Z_π^{-1} (B_r μ + γ Σ_{s'} φ(s') V^π(s') ψ(s';·)),
//!   p_π  = N(β_ε̄^{-1}(Z_π/B_β), ε̄²),
//!   ρ̄_π = ν_π × p_π,        ρ_π = α^{-1} ρ̄_π + (1 − α^{-1}) ρ₀,
//! and the symmetric ρ₀ part contributes nothing to Q because σ is odd in b.

use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::lstsq_min_norm;
use crate::mdp::{self, Policy, TabularMdp, VisitationMeasure};
use crate::net::Activation;
use crate::quad::gh64;
use crate::td;

/// Fit residual at or below this is acceptance-grade.
pub const FIT_TOLERANCE: f64 = 1e-3;
/// Isotropic stddev of dictionary atoms. Must stay below √2 so the
/// chi-squared divergence against N(0, I) stays finite, and below √(4/3) so
/// its Monte Carlo estimator has finite variance.
pub const ATOM_STDDEV: f64 = 0.4;
/// Spread of random dictionary atom means.
const ATOM_MEAN_SPREAD: f64 = 1.0;

/// One isotropic Gaussian component of a mixture over first-layer weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub stddev: f64,
}

/// A finite Gaussian mixture with explicit total mass. Probability mixtures
/// carry total weight one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureMixture {
    components: Vec<GaussianComponent>,
    total_weight: f64,
}

impl MeasureMixture {
    pub fn new(components: Vec<GaussianComponent>) -> Result<MeasureMixture> {
        if components.is_empty() {
            return Err(Error::InvalidParameter("mixture needs at least one component".into()));
        }
        let dim = components[0].mean.len();
        for (i, c) in components.iter().enumerate() {
            if !(c.weight >= 0.0) || !c.weight.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "component {i} has weight {}",
                    c.weight
                )));
            }
            if !(c.stddev > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "component {i} has stddev {}",
                    c.stddev
                )));
            }
            if c.mean.len() != dim {
                return Err(Error::DimensionMismatch("mixture component dimensions".into()));
            }
        }
        let total_weight = components.iter().map(|c| c.weight).sum();
        Ok(MeasureMixture { components, total_weight })
    }

    /// A probability mixture: total weight must be 1 within 1e-12.
    pub fn probability(components: Vec<GaussianComponent>) -> Result<MeasureMixture> {
        let mix = MeasureMixture::new(components)?;
        if (mix.total_weight - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidDistribution(format!(
                "probability mixture has total weight {}",
                mix.total_weight
            )));
        }
        Ok(mix)
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn total_weight(&self) -> f64 {
        self.total_weight
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    /// ∫ act(wᵀx) dμ(w) = Σ_j weight_j E_{N(m_jᵀx, σ_j²‖x‖²)}[act]; for a
    /// probability mixture this is the expectation.
    pub fn expect_activation(&self, x: &[f64], act: Activation) -> f64 {
        let xnorm: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let gh = gh64();
        self.components
            .iter()
            .map(|c| {
                let proj: f64 = c.mean.iter().zip(x).map(|(m, xi)| m * xi).sum();
                c.weight * gh.expect_normal(proj, c.stddev * xnorm, |z| act.value(z))
            })
            .sum()
    }

    /// ∫ act'(wᵀx) dμ(w); used by the nonlinear fit refinement.
    pub fn expect_activation_deriv(&self, x: &[f64], act: Activation) -> f64 {
        let xnorm: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let gh = gh64();
        self.components
            .iter()
            .map(|c| {
                let proj: f64 = c.mean.iter().zip(x).map(|(m, xi)| m * xi).sum();
                c.weight * gh.expect_normal(proj, c.stddev * xnorm, |z| act.derivative(z))
            })
            .sum()
    }

    /// Mixture density at a point.
    pub fn density(&self, w: &[f64]) -> f64 {
        let d = self.dim() as f64;
        self.components
            .iter()
            .map(|c| {
                let mut sq = 0.0;
                for (m, wi) in c.mean.iter().zip(w) {
                    sq += (wi - m).powi(2);
                }
                let norm =
                    (2.0 * std::f64::consts::PI).powf(d / 2.0) * c.stddev.powf(d);
                c.weight * (-0.5 * sq / (c.stddev * c.stddev)).exp() / norm
            })
            .sum()
    }

    /// Draw from a probability mixture.
    pub fn sampler(&self) -> Result<MixtureSampler<'_>> {
        if (self.total_weight - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidDistribution(
                "sampling requires a probability mixture".into(),
            ));
        }
        let weights: Vec<f64> = self.components.iter().map(|c| c.weight).collect();
        let index = WeightedIndex::new(&weights)
            .map_err(|e| Error::InvalidDistribution(format!("mixture sampler: {e}")))?;
        Ok(MixtureSampler { mixture: self, index })
    }
}

pub struct MixtureSampler<'a> {
    mixture: &'a MeasureMixture,
    index: WeightedIndex<f64>,
}

impl MixtureSampler<'_> {
    pub fn draw(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let c = &self.mixture.components[self.index.sample(rng)];
        c.mean
            .iter()
            .map(|m| m + c.stddev * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            .collect()
    }
}

/// A fitted mixture representation of an MDP: μ, per-state ψ, φ, B_r, and
/// the derived network scale B_β.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepresentableSpec {
    pub mu: MeasureMixture,
    pub psi: Vec<MeasureMixture>,
    pub phi: Vec<f64>,
    pub b_r: f64,
    pub b_beta: f64,
    pub activation: Activation,
    /// Max absolute fit residual over the reward and all kernel columns.
    pub fit_residual: f64,
    /// Whether the residual meets [`FIT_TOLERANCE`].
    pub conforming: bool,
}

impl RepresentableSpec {
    /// Fitted reward B_r ∫ σ̃(wᵀx) μ(dw).
    pub fn reward_at(&self, x: &[f64]) -> f64 {
        self.b_r * self.mu.expect_activation(x, self.activation)
    }

    /// Fitted kernel value φ(s') ∫ σ̃(wᵀx) ψ(s'; dw).
    pub fn kernel_at(&self, s_next: usize, x: &[f64]) -> f64 {
        self.phi[s_next] * self.psi[s_next].expect_activation(x, self.activation)
    }

    /// Σ_{s'} φ(s'), the grid realization of the φ-mass bound.
    pub fn phi_total(&self) -> f64 {
        self.phi.iter().sum()
    }

    /// Smallest admissible B_β: 2 (B_r + γ(1−γ)^{-1} B_r Σφ). It guarantees
    /// |Z_π / B_β| ≤ ½ for every policy.
    pub fn min_b_beta(b_r: f64, gamma: f64, phi_total: f64) -> f64 {
        2.0 * (b_r + gamma / (1.0 - gamma) * b_r * phi_total)
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &std::path::Path) -> Result<RepresentableSpec> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn feature_matrix(
    inputs: &Array2<f64>,
    means: &Array2<f64>,
    stddev: f64,
    act: Activation,
) -> Array2<f64> {
    let (n, _) = inputs.dim();
    let k = means.dim().0;
    let gh = gh64();
    let mut f = Array2::<f64>::zeros((n, k));
    for i in 0..n {
        let x = inputs.row(i);
        let xnorm: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        for j in 0..k {
            let proj: f64 = means.row(j).iter().zip(x.iter()).map(|(m, xi)| m * xi).sum();
            f[[i, j]] = gh.expect_normal(proj, stddev * xnorm, |z| act.value(z));
        }
    }
    f
}

fn max_abs_residual(features: &Array2<f64>, coeffs: &[f64], y: &[f64]) -> f64 {
    let (n, k) = features.dim();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let mut pred = 0.0;
        for j in 0..k {
            pred += features[[i, j]] * coeffs[j];
        }
        worst = worst.max((pred - y[i]).abs());
    }
    worst
}

/// Fit one target column y over the dictionary: linear minimal-norm solve
/// for the weights first, then a damped Gauss–Newton refinement of the atom
/// means (weights re-solved linearly after every mean update) if the linear
/// fit misses the tolerance.
fn fit_column(
    inputs: &Array2<f64>,
    y: &[f64],
    means0: &Array2<f64>,
    stddev: f64,
    act: Activation,
) -> (Vec<f64>, Array2<f64>, f64) {
    let mut means = means0.clone();
    let mut features = feature_matrix(inputs, &means, stddev, act);
    let mut coeffs = lstsq_min_norm(&features, y, 1e-12);
    let mut residual = max_abs_residual(&features, &coeffs, y);
    if residual <= 0.5 * FIT_TOLERANCE {
        return (coeffs, means, residual);
    }

    let (n, dp1) = inputs.dim();
    let k = means.dim().0;
    let gh = gh64();
    let mut lambda = 1e-3;
    for _ in 0..60 {
        // Residual vector and Jacobian with respect to the means.
        let mut r = vec![0.0; n];
        for i in 0..n {
            let mut pred = 0.0;
            for j in 0..k {
                pred += features[[i, j]] * coeffs[j];
            }
            r[i] = pred - y[i];
        }
        let p = k * dp1;
        let mut jac = Array2::<f64>::zeros((n, p));
        for i in 0..n {
            let x = inputs.row(i);
            let xnorm: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            for j in 0..k {
                let proj: f64 = means.row(j).iter().zip(x.iter()).map(|(m, xi)| m * xi).sum();
                let deriv = gh.expect_normal(proj, stddev * xnorm, |z| act.derivative(z));
                for c in 0..dp1 {
                    jac[[i, j * dp1 + c]] = coeffs[j] * deriv * x[c];
                }
            }
        }
        // Damped normal equations (JᵀJ + λI) δ = −Jᵀ r.
        let mut jtj = Array2::<f64>::zeros((p, p));
        let mut jtr = vec![0.0; p];
        for a in 0..p {
            for b in a..p {
                let mut acc = 0.0;
                for i in 0..n {
                    acc += jac[[i, a]] * jac[[i, b]];
                }
                jtj[[a, b]] = acc;
                jtj[[b, a]] = acc;
            }
            let mut acc = 0.0;
            for i in 0..n {
                acc += jac[[i, a]] * r[i];
            }
            jtr[a] = -acc;
        }
        for a in 0..p {
            jtj[[a, a]] += lambda;
        }
        let delta = match crate::linalg::solve_lu(&jtj, &jtr) {
            Some(d) => d,
            None => break,
        };
        let mut trial = means.clone();
        for j in 0..k {
            for c in 0..dp1 {
                trial[[j, c]] += delta[j * dp1 + c];
            }
        }
        let trial_features = feature_matrix(inputs, &trial, stddev, act);
        let trial_coeffs = lstsq_min_norm(&trial_features, y, 1e-12);
        let trial_res = max_abs_residual(&trial_features, &trial_coeffs, y);
        if trial_res < residual {
            means = trial;
            features = trial_features;
            coeffs = trial_coeffs;
            residual = trial_res;
            lambda = (lambda / 3.0).max(1e-12);
            if residual <= 0.25 * FIT_TOLERANCE {
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e8 {
                break;
            }
        }
    }
    (coeffs, means, residual)
}

/// Split signed coefficients into a nonnegative mixture using the ±w
/// reflection: a negative coefficient becomes a positive weight on the
/// mirrored atom (σ̃ is odd). Returns (components, total weight).
fn signed_split(coeffs: &[f64], means: &Array2<f64>, stddev: f64) -> (Vec<GaussianComponent>, f64) {
    let mut components = Vec::new();
    let mut total = 0.0;
    let scale: f64 = coeffs.iter().map(|c| c.abs()).sum::<f64>().max(1.0);
    for (j, &c) in coeffs.iter().enumerate() {
        if c.abs() <= 1e-14 * scale {
            continue;
        }
        let mean: Vec<f64> = if c >= 0.0 {
            means.row(j).to_vec()
        } else {
            means.row(j).iter().map(|m| -m).collect()
        };
        components.push(GaussianComponent { weight: c.abs(), mean, stddev });
        total += c.abs();
    }
    (components, total)
}

/// Antisymmetric ±w atom pair: a unit-mass probability mixture whose
/// activation integral is exactly zero (σ̃ is odd).
fn antisymmetric_pair(dim: usize, stddev: f64) -> Vec<GaussianComponent> {
    let mut mean = vec![0.0; dim];
    mean[dim - 1] = 1.0;
    let neg: Vec<f64> = mean.iter().map(|m| -m).collect();
    vec![
        GaussianComponent { weight: 0.5, mean, stddev },
        GaussianComponent { weight: 0.5, mean: neg, stddev },
    ]
}

/// Fit mixture representations for a given tabular MDP: the reward as
/// B_r E_μ[σ̃] and each kernel column as φ(s') E_{ψ(s')}[σ̃].
///
/// A spec whose residual exceeds [`FIT_TOLERANCE`] is returned flagged
/// non-conforming; callers may reject it.
pub fn fit_representation(mdp: &TabularMdp, n_atoms: usize, seed: u64) -> Result<RepresentableSpec> {
    if n_atoms == 0 {
        return Err(Error::InvalidParameter("need at least one dictionary atom".into()));
    }
    let act = Activation::Tanh;
    let inputs = mdp.inputs().clone();
    let dp1 = mdp.embed_dim() + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means0 = Array2::from_shape_fn((n_atoms, dp1), |_| {
        ATOM_MEAN_SPREAD * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
    });

    let n_pairs = mdp.n_pairs();
    let mut worst_residual = 0.0f64;

    // Reward column.
    let y_r: Vec<f64> = (0..n_pairs)
        .map(|i| mdp.reward()[[i / mdp.n_actions(), i % mdp.n_actions()]])
        .collect();
    let (coeffs, means, res_r) = fit_column(&inputs, &y_r, &means0, ATOM_STDDEV, act);
    worst_residual = worst_residual.max(res_r);
    let (mu_components, b_r) = {
        let (components, total) = signed_split(&coeffs, &means, ATOM_STDDEV);
        if total < 1e-12 {
            // Zero target: antisymmetric pair, arbitrary positive scale.
            (antisymmetric_pair(dp1, ATOM_STDDEV), 1.0)
        } else {
            let normalized = components
                .into_iter()
                .map(|mut c| {
                    c.weight /= total;
                    c
                })
                .collect();
            (normalized, total)
        }
    };
    let mu = MeasureMixture::probability(mu_components)?;

    // One kernel column per next state.
    let mut psi = Vec::with_capacity(mdp.n_states());
    let mut phi = Vec::with_capacity(mdp.n_states());
    for s_next in 0..mdp.n_states() {
        let y: Vec<f64> = (0..n_pairs)
            .map(|i| mdp.transition()[[i / mdp.n_actions(), i % mdp.n_actions(), s_next]])
            .collect();
        let (coeffs, means, res) = fit_column(&inputs, &y, &means0, ATOM_STDDEV, act);
        worst_residual = worst_residual.max(res);
        let (components, total) = signed_split(&coeffs, &means, ATOM_STDDEV);
        if total < 1e-12 {
            psi.push(MeasureMixture::probability(antisymmetric_pair(dp1, ATOM_STDDEV))?);
            phi.push(0.0);
        } else {
            let normalized: Vec<GaussianComponent> = components
                .into_iter()
                .map(|mut c| {
                    c.weight /= total;
                    c
                })
                .collect();
            psi.push(MeasureMixture::probability(normalized)?);
            phi.push(total);
        }
    }

    let phi_total: f64 = phi.iter().sum();
    let b_beta = RepresentableSpec::min_b_beta(b_r, mdp.gamma(), phi_total);
    Ok(RepresentableSpec {
        mu,
        psi,
        phi,
        b_r,
        b_beta,
        activation: act,
        fit_residual: worst_residual,
        conforming: worst_residual <= FIT_TOLERANCE,
    })
}

/// Mollifier width ε̄ = min(1, √(π/2)/(6 L₀β), √(π/2)/(2 ℓβ L₁β)) with the
/// tanh constants L₀β = 1, L₁β = 4/(3√3), and ℓβ = Lip(arctanh on [-2/3, 2/3])
/// = 1/(1 − (2/3)²) = 1.8.
pub fn mollifier_width() -> f64 {
    let l0 = 1.0f64;
    let l1 = 4.0 / (3.0 * 3.0f64.sqrt());
    let ell = 1.8f64;
    let sqrt_pi_half = (std::f64::consts::PI / 2.0).sqrt();
    (sqrt_pi_half / (6.0 * l0))
        .min(sqrt_pi_half / (2.0 * ell * l1))
        .min(1.0)
}

/// Mollified rescaling function β_ε(z) = E_{b~N(z, ε²)}[β(b)] with β = tanh.
pub fn mollified_beta(z: f64, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::InvalidParameter(format!("mollifier width must be positive, got {eps}")));
    }
    Ok(gh64().expect_normal(z, eps, |b| b.tanh()))
}

/// Inverse of β_ε by bisection on an adaptively grown bracket; β_ε is odd and
/// strictly increasing. Targets outside the verified range are a domain error.
pub fn mollified_beta_inverse(target: f64, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::InvalidParameter(format!("mollifier width must be positive, got {eps}")));
    }
    if !target.is_finite() || target.abs() >= 1.0 {
        return Err(Error::Domain(format!("target {target} outside the range of β_ε")));
    }
    if target == 0.0 {
        return Ok(0.0);
    }
    let sign = target.signum();
    let t = target.abs();
    let mut hi = 1.0f64;
    while mollified_beta(hi, eps)? < t {
        hi *= 2.0;
        if hi > 64.0 {
            return Err(Error::Domain(format!(
                "target {target} outside the verified range of β_ε (ε = {eps})"
            )));
        }
    }
    let mut lo = 0.0f64;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mollified_beta(mid, eps)? < t {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-13 {
            break;
        }
    }
    Ok(sign * 0.5 * (lo + hi))
}

/// The representing measure for Q^π: ρ̄_π = ν_π × p_π mixed into ρ₀ with
/// weight α^{-1}.
#[derive(Debug, Clone)]
pub struct RhoPi {
    /// First-layer mixture ν_π (probability).
    pub nu: MeasureMixture,
    /// Mean of the scalar Gaussian p_π over b: β_ε̄^{-1}(Z_π/B_β).
    pub p_mean: f64,
    /// Stddev of p_π: the mollifier width ε̄.
    pub p_stddev: f64,
    /// Z_π = B_r + γ Σ φ V^π.
    pub z: f64,
    pub alpha: f64,
}

impl RhoPi {
    /// Mixing weight of ρ̄_π inside ρ_π.
    pub fn mix_weight(&self) -> f64 {
        self.alpha.recip()
    }

    /// Deterministic quadrature evaluation of Q(x; ρ_π) over the grid:
    /// the symmetric ρ₀ part vanishes, and E_{p_π}[β(b)] = Z_π/B_β exactly,
    /// so Q(x) = Z_π E_{ν_π}[σ̃(wᵀx)].
    pub fn q_quadrature(&self, mdp: &TabularMdp, act: Activation) -> Array2<f64> {
        Array2::from_shape_fn((mdp.n_states(), mdp.n_actions()), |(s, a)| {
            let x = mdp.input_row(mdp.pair_index(s, a));
            self.z * self.nu.expect_activation(x.as_slice().expect("contiguous row"), act)
        })
    }
}

/// Assemble ρ_π from a conforming spec: Z_π from exact V^π, ν_π as the convex
/// combination of μ and the ψ(s';·), and p_π from the mollified inverse.
pub fn construct_rho_pi(
    spec: &RepresentableSpec,
    mdp: &TabularMdp,
    policy: &Policy,
    alpha: f64,
) -> Result<RhoPi> {
    if !spec.conforming {
        return Err(Error::NonConforming(format!(
            "fit residual {} exceeds {FIT_TOLERANCE}",
            spec.fit_residual
        )));
    }
    if spec.psi.len() != mdp.n_states() || spec.phi.len() != mdp.n_states() {
        return Err(Error::DimensionMismatch("spec/MDP state counts".into()));
    }
    if !(alpha >= 1.0) {
        return Err(Error::InvalidParameter(format!("alpha must be >= 1, got {alpha}")));
    }
    let v = mdp::exact_v(mdp, policy)?;
    let z = spec.b_r
        + mdp.gamma()
            * spec
                .phi
                .iter()
                .zip(v.iter())
                .map(|(phi, v)| phi * v)
                .sum::<f64>();
    if (z / spec.b_beta).abs() > 0.5 {
        return Err(Error::NonConforming(format!(
            "|Z_π/B_β| = {} exceeds 1/2; B_β violates its lower bound",
            (z / spec.b_beta).abs()
        )));
    }
    let mut components: Vec<GaussianComponent> = Vec::new();
    for c in spec.mu.components() {
        let mut c = c.clone();
        c.weight *= spec.b_r / z;
        components.push(c);
    }
    for (s_next, psi) in spec.psi.iter().enumerate() {
        let scale = mdp.gamma() * spec.phi[s_next] * v[s_next] / z;
        if scale == 0.0 {
            continue;
        }
        for c in psi.components() {
            let mut c = c.clone();
            c.weight *= scale;
            components.push(c);
        }
    }
    let nu = MeasureMixture::probability(components)?;
    let eps = mollifier_width();
    let p_mean = mollified_beta_inverse(z / spec.b_beta, eps)?;
    Ok(RhoPi { nu, p_mean, p_stddev: eps, z, alpha })
}

/// Monte Carlo verification report for Q(·; ρ_π) against the exact oracle.
#[derive(Debug, Clone, Copy)]
pub struct VerifyReport {
    /// max over the grid of |Q̂(x; ρ_π) − Q^π(x)|.
    pub max_abs_error: f64,
    /// 3× the largest per-point standard error of the MC estimate.
    pub mc_radius_3sigma: f64,
}

/// Estimate Q(x; ρ_π) at every grid point by sampling θ ~ ρ̄_π (the symmetric
/// (1 − α^{-1}) ρ₀ part contributes zero analytically and is skipped) and
/// compare against exact Q^π.
pub fn verify_representation(
    rho: &RhoPi,
    spec: &RepresentableSpec,
    mdp: &TabularMdp,
    policy: &Policy,
    n_samples: usize,
    seed: u64,
) -> Result<VerifyReport> {
    if n_samples < 2 {
        return Err(Error::InvalidParameter("need at least two MC samples".into()));
    }
    let q_star = mdp::exact_q(mdp, policy)?;
    let q_hat = rho_pi_q_mc(rho, spec, mdp, n_samples, seed)?;
    let mut max_err: f64 = 0.0;
    let mut max_sigma: f64 = 0.0;
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            max_err = max_err.max((q_hat.mean[[s, a]] - q_star[[s, a]]).abs());
            max_sigma = max_sigma.max(q_hat.std_err[[s, a]]);
        }
    }
    Ok(VerifyReport { max_abs_error: max_err, mc_radius_3sigma: 3.0 * max_sigma })
}

/// Per-point MC estimate of Q(x; ρ_π) with standard errors.
pub struct McQTable {
    pub mean: Array2<f64>,
    pub std_err: Array2<f64>,
}

/// Sample-based evaluation of ∫ σ(x;θ) ρ̄_π(dθ) at every grid point.
pub fn rho_pi_q_mc(
    rho: &RhoPi,
    spec: &RepresentableSpec,
    mdp: &TabularMdp,
    n_samples: usize,
    seed: u64,
) -> Result<McQTable> {
    let act = spec.activation;
    let sampler = rho.nu.sampler()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let n_pairs = mdp.n_pairs();
    let mut sums = vec![0.0f64; n_pairs];
    let mut sq_sums = vec![0.0f64; n_pairs];
    for _ in 0..n_samples {
        let b: f64 = rho.p_mean
            + rho.p_stddev * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
        let w = sampler.draw(&mut rng);
        let beta_b = spec.b_beta * act.value(b);
        for pair in 0..n_pairs {
            let x = mdp.input_row(pair);
            let proj: f64 = w.iter().zip(x.iter()).map(|(wi, xi)| wi * xi).sum();
            let val = beta_b * act.value(proj);
            sums[pair] += val;
            sq_sums[pair] += val * val;
        }
    }
    let n = n_samples as f64;
    let mut mean = Array2::<f64>::zeros((ns, na));
    let mut std_err = Array2::<f64>::zeros((ns, na));
    for pair in 0..n_pairs {
        let m = sums[pair] / n;
        let var = (sq_sums[pair] / n - m * m).max(0.0) * n / (n - 1.0);
        mean[[pair / na, pair % na]] = m;
        std_err[[pair / na, pair % na]] = (var / n).sqrt();
    }
    Ok(McQTable { mean, std_err })
}

/// Where the Q table driving the vector-field probe comes from.
pub enum QSource<'a> {
    /// An explicit table, e.g. exact Q^π.
    Table(&'a Array2<f64>),
    /// Deterministic quadrature through ρ_π.
    Quadrature,
    /// Monte Carlo through ρ̄_π.
    MonteCarlo { n_samples: usize, seed: u64 },
}

/// Max ‖g(θ; ρ_π, π)‖ over probe parameters, with Q(·; ρ_π) supplied by the
/// chosen source. At the representing measure the field vanishes up to MC
/// and fit error.
pub fn vector_field_at_rho_pi(
    rho: &RhoPi,
    spec: &RepresentableSpec,
    mdp: &TabularMdp,
    policy: &Policy,
    probe_points: &[Vec<f64>],
    weighting: &VisitationMeasure,
    q_source: QSource<'_>,
) -> Result<f64> {
    let q_table = match q_source {
        QSource::Table(t) => t.clone(),
        QSource::Quadrature => rho.q_quadrature(mdp, spec.activation),
        QSource::MonteCarlo { n_samples, seed } => {
            rho_pi_q_mc(rho, spec, mdp, n_samples, seed)?.mean
        }
    };
    let mut worst: f64 = 0.0;
    for theta in probe_points {
        let g = td::td_vector_field_with_q(
            theta,
            &q_table,
            mdp,
            policy,
            weighting,
            rho.alpha,
            spec.b_beta,
            spec.activation,
        )?;
        worst = worst.max(g.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    Ok(worst)
}

/// Closed-form χ²(N(m, s²) ‖ N(0, 1)) = exp(m²/(2−s²)) / (s √(2−s²)) − 1.
pub fn chi2_gaussian_1d(mean: f64, stddev: f64) -> Result<f64> {
    let s2 = stddev * stddev;
    if !(s2 > 0.0 && s2 < 2.0) {
        return Err(Error::Domain(format!(
            "chi-squared against N(0,1) diverges unless 0 < stddev² < 2, got {s2}"
        )));
    }
    Ok((mean * mean / (2.0 - s2)).exp() / (stddev * (2.0 - s2).sqrt()) - 1.0)
}

/// MC estimate of χ²(mixture ‖ N(0, I_dim)) = E_{w~N(0,I)}[(q(w)/ρ₀(w) − 1)²].
pub fn chi2_vs_standard_normal_mc(mix: &MeasureMixture, n_samples: usize, seed: u64) -> f64 {
    let dim = mix.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let log_norm = -0.5 * dim as f64 * (2.0 * std::f64::consts::PI).ln();
    let mut acc = 0.0;
    for _ in 0..n_samples {
        let w: Vec<f64> = (0..dim)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        let sq: f64 = w.iter().map(|v| v * v).sum();
        let rho0 = (log_norm - 0.5 * sq).exp();
        let ratio = mix.density(&w) / rho0;
        acc += (ratio - 1.0).powi(2);
    }
    acc / n_samples as f64
}

/// Forward-generate an MDP whose reward is exactly B_r E_μ[σ̃] for a known
/// random mixture μ (lifted by a constant-direction atom so r ≥ 0), with
/// random Dirichlet-style dynamics. Returns the MDP, the true μ, and B_r.
pub fn generate_representable_mdp(
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    seed: u64,
) -> Result<(TabularMdp, MeasureMixture, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = n_states + n_actions;
    let dp1 = d + 1;
    let act = Activation::Tanh;

    // Raw mixture: a handful of random atoms with Dirichlet-like weights.
    let n_raw = 6;
    let mut raw: Vec<GaussianComponent> = (0..n_raw)
        .map(|_| {
            let mean: Vec<f64> = (0..dp1)
                .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect();
            let weight = -rng.random::<f64>().max(1e-12).ln();
            GaussianComponent { weight, mean, stddev: ATOM_STDDEV }
        })
        .collect();
    let total: f64 = raw.iter().map(|c| c.weight).sum();
    raw.iter_mut().for_each(|c| c.weight /= total);
    let total2: f64 = raw.iter().map(|c| c.weight).sum();
    raw.iter_mut().for_each(|c| c.weight /= total2);
    let raw_mix = MeasureMixture::probability(raw.clone())?;

    // Grid inputs for the default simplex embedding.
    let embedding = mdp::simplex_embedding(n_states, n_actions, mdp::DEFAULT_EMBEDDING_RADIUS);
    let mut inputs = Vec::with_capacity(n_states * n_actions);
    for s in 0..n_states {
        for a in 0..n_actions {
            let mut x: Vec<f64> = (0..d).map(|i| embedding[[s, a, i]]).collect();
            x.push(1.0);
            inputs.push(x);
        }
    }

    // Constant-direction lift atom: its expectation is positive and nearly
    // constant across the grid, so mixing it in raises the minimum above zero.
    let mut lift_mean = vec![0.0; dp1];
    lift_mean[dp1 - 1] = 1.2;
    let lift = GaussianComponent { weight: 1.0, mean: lift_mean, stddev: ATOM_STDDEV };
    let lift_mix = MeasureMixture::new(vec![lift.clone()])?;
    let f_raw: Vec<f64> = inputs.iter().map(|x| raw_mix.expect_activation(x, act)).collect();
    let f_lift: Vec<f64> = inputs.iter().map(|x| lift_mix.expect_activation(x, act)).collect();
    let min_raw = f_raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let min_lift = f_lift.iter().cloned().fold(f64::INFINITY, f64::min);
    let margin = 0.05;
    let lambda = if min_raw >= margin {
        0.0
    } else {
        (margin - min_raw) / (min_lift - min_raw)
    };
    let mut components: Vec<GaussianComponent> = raw
        .into_iter()
        .map(|mut c| {
            c.weight *= 1.0 - lambda;
            c
        })
        .collect();
    if lambda > 0.0 {
        components.push(GaussianComponent { weight: lambda, ..lift });
    }
    // Exact renormalization of accumulated rounding.
    let total: f64 = components.iter().map(|c| c.weight).sum();
    components.iter_mut().for_each(|c| c.weight /= total);
    let mu = MeasureMixture::probability(components)?;

    let b_r = 1.0;
    let mut reward = Array2::<f64>::zeros((n_states, n_actions));
    for s in 0..n_states {
        for a in 0..n_actions {
            let value = b_r * mu.expect_activation(&inputs[s * n_actions + a], act);
            reward[[s, a]] = value.max(0.0);
        }
    }

    let template = TabularMdp::random(n_states, n_actions, gamma, &mut rng);
    let mdp = TabularMdp::new(
        template.transition().clone(),
        reward,
        gamma,
        template.initial_dist().clone(),
        embedding,
    )?;
    Ok((mdp, mu, b_r))
}

/// One full fit → construct → verify pass; the CSV row behind `mfac fit`.
#[derive(Debug, Clone, Serialize)]
pub struct PipelineReport {
    pub instance: String,
    pub fit_residual: f64,
    pub conforming: bool,
    pub z_pi: f64,
    pub max_q_error: f64,
    pub mc_radius_3sigma: f64,
    pub chi2_mu_mc: f64,
    pub chi2_p_closed_form: f64,
    pub max_g_norm_exact_q: f64,
}

/// Run the Appendix-style pipeline on an MDP under a policy.
pub fn representation_pipeline(
    mdp: &TabularMdp,
    policy: &Policy,
    instance: &str,
    n_atoms: usize,
    alpha: f64,
    n_samples: usize,
    seed: u64,
) -> Result<PipelineReport> {
    let spec = fit_representation(mdp, n_atoms, seed)?;
    let rho = construct_rho_pi(&spec, mdp, policy, alpha)?;
    let report = verify_representation(&rho, &spec, mdp, policy, n_samples, seed ^ 0x5eed)?;
    let base = VisitationMeasure::uniform(mdp.n_states(), mdp.n_actions());
    let weighting = td::weighting_distribution(mdp, policy, &base)?;
    let q_star = mdp::exact_q(mdp, policy)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    let probes: Vec<Vec<f64>> = (0..16)
        .map(|_| {
            (0..mdp.embed_dim() + 2)
                .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect()
        })
        .collect();
    let max_g = vector_field_at_rho_pi(
        &rho,
        &spec,
        mdp,
        policy,
        &probes,
        &weighting.sampling,
        QSource::Table(&q_star),
    )?;
    let chi2_mu = chi2_vs_standard_normal_mc(&spec.mu, 200_000, seed ^ 0xc2b2);
    let chi2_p = chi2_gaussian_1d(rho.p_mean, rho.p_stddev)?;
    Ok(PipelineReport {
        instance: instance.to_string(),
        fit_residual: spec.fit_residual,
        conforming: spec.conforming,
        z_pi: rho.z,
        max_q_error: report.max_abs_error,
        mc_radius_3sigma: report.mc_radius_3sigma,
        chi2_mu_mc: chi2_mu,
        chi2_p_closed_form: chi2_p,
        max_g_norm_exact_q: max_g,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn random_policy(ns: usize, na: usize, rng: &mut ChaCha8Rng) -> Policy {
        let logits = Array2::from_shape_fn((ns, na), |_| rng.random_range(-1.0..1.0));
        Policy::from_logits(&logits).unwrap()
    }

    #[test]
    fn mollified_beta_basics() {
        // Odd with Gaussian smoothing: β_ε(0) = 0 for any ε.
        for eps in [1e-6, 0.1, 0.5, 1.0] {
            assert_abs_diff_eq!(mollified_beta(0.0, eps).unwrap(), 0.0, epsilon = 1e-14);
        }
        // ε → 0 recovers tanh.
        assert_abs_diff_eq!(
            mollified_beta(0.5, 1e-6).unwrap(),
            0.5f64.tanh(),
            epsilon = 1e-6
        );
        // Strictly increasing on the working bracket.
        let eps = mollifier_width();
        let mut prev = mollified_beta(-2.0, eps).unwrap();
        let mut z = -2.0 + 1e-2;
        while z <= 2.0 {
            let cur = mollified_beta(z, eps).unwrap();
            assert!(cur > prev);
            prev = cur;
            z += 1e-2;
        }
    }

    #[test]
    fn mollified_beta_inverse_round_trip() {
        let y = mollified_beta(0.3, 0.5).unwrap();
        let z = mollified_beta_inverse(y, 0.5).unwrap();
        assert_abs_diff_eq!(z, 0.3, epsilon = 1e-10);
        // Round trips across the worked range.
        let eps = mollifier_width();
        for target in [-0.5, -0.31, -0.05, 0.02, 0.17, 0.44, 0.5] {
            let z = mollified_beta_inverse(target, eps).unwrap();
            assert_abs_diff_eq!(mollified_beta(z, eps).unwrap(), target, epsilon = 1e-10);
        }
        assert!(mollified_beta_inverse(1.0, 0.5).is_err());
        assert!(mollified_beta_inverse(0.999_999_999, 1.0).is_err());
    }

    #[test]
    fn mollifier_width_value() {
        // min(1, √(π/2)/6, √(π/2)/(2·1.8·0.7698…)) = √(π/2)/6 ≈ 0.2089.
        let eps = mollifier_width();
        assert_abs_diff_eq!(eps, (std::f64::consts::PI / 2.0).sqrt() / 6.0, epsilon = 1e-12);
    }

    #[test]
    fn forward_generate_then_fit_recovers_reward() {
        let (mdp, _mu, _br) = generate_representable_mdp(4, 2, 0.9, 11).unwrap();
        assert!(mdp.reward().iter().all(|&r| r >= 0.0));
        let spec = fit_representation(&mdp, 24, 13).unwrap();
        assert!(spec.conforming, "residual {}", spec.fit_residual);
        for pair in 0..mdp.n_pairs() {
            let x = mdp.input_row(pair);
            let fitted = spec.reward_at(x.as_slice().unwrap());
            let truth = mdp.reward()[[pair / 2, pair % 2]];
            assert_abs_diff_eq!(fitted, truth, epsilon = 1e-6);
        }
    }

    #[test]
    fn zero_reward_fit_uses_antisymmetric_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let template = TabularMdp::random(3, 2, 0.9, &mut rng);
        let mdp = TabularMdp::new(
            template.transition().clone(),
            Array2::zeros((3, 2)),
            0.9,
            template.initial_dist().clone(),
            template.embedding().clone(),
        )
        .unwrap();
        let spec = fit_representation(&mdp, 12, 19).unwrap();
        for pair in 0..mdp.n_pairs() {
            let x = mdp.input_row(pair);
            assert!(spec.reward_at(x.as_slice().unwrap()).abs() <= 1e-8);
        }
        // The μ fallback is a ±w pair with equal masses.
        assert_eq!(spec.mu.components().len(), 2);
        assert_abs_diff_eq!(spec.mu.components()[0].weight, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn fitted_kernel_rows_sum_to_one() {
        // Uniform kernel target over 3 states.
        let n_states = 3;
        let n_actions = 2;
        let transition =
            ndarray::Array3::from_elem((n_states, n_actions, n_states), 1.0 / n_states as f64);
        let reward = Array2::from_elem((n_states, n_actions), 0.3);
        let init = ndarray::Array1::from_elem(n_states, 1.0 / n_states as f64);
        let mdp = TabularMdp::with_simplex_embedding(transition, reward, 0.9, init).unwrap();
        let spec = fit_representation(&mdp, 18, 23).unwrap();
        assert!(spec.conforming);
        for pair in 0..mdp.n_pairs() {
            let x = mdp.input_row(pair);
            let row_sum: f64 = (0..n_states)
                .map(|s2| spec.kernel_at(s2, x.as_slice().unwrap()))
                .sum();
            assert_abs_diff_eq!(row_sum, 1.0, epsilon = 1e-3);
        }
    }

    #[test]
    fn underparameterized_fit_improves_with_refinement() {
        // Fewer atoms than grid points: the linear solve alone cannot close
        // the residual, so the Gauss-Newton polish must improve on it.
        let (mdp, _, _) = generate_representable_mdp(4, 3, 0.9, 29).unwrap();
        let act = Activation::Tanh;
        let inputs = mdp.inputs().clone();
        let y: Vec<f64> = (0..mdp.n_pairs())
            .map(|i| mdp.reward()[[i / 3, i % 3]])
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let means0 = Array2::from_shape_fn((4, mdp.embed_dim() + 1), |_| {
            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        });
        let features = feature_matrix(&inputs, &means0, ATOM_STDDEV, act);
        let coeffs = lstsq_min_norm(&features, &y, 1e-12);
        let linear_res = max_abs_residual(&features, &coeffs, &y);
        let (_, _, refined_res) = fit_column(&inputs, &y, &means0, ATOM_STDDEV, act);
        assert!(
            refined_res < linear_res,
            "refinement did not improve: {refined_res} vs {linear_res}"
        );
    }

    #[test]
    fn rho_pi_construction_cases() {
        // Zero reward: V ≡ 0, Z = B_r, ν = μ.
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let template = TabularMdp::random(3, 2, 0.9, &mut rng);
        let mdp0 = TabularMdp::new(
            template.transition().clone(),
            Array2::zeros((3, 2)),
            0.9,
            template.initial_dist().clone(),
            template.embedding().clone(),
        )
        .unwrap();
        let pi = random_policy(3, 2, &mut rng);
        let spec = fit_representation(&mdp0, 12, 41).unwrap();
        let rho = construct_rho_pi(&spec, &mdp0, &pi, 2.0).unwrap();
        assert_abs_diff_eq!(rho.z, spec.b_r, epsilon = 1e-12);
        assert_eq!(rho.nu.components().len(), spec.mu.components().len());

        // Vanishing discount kills the integral: Z ≈ B_r.
        let (mdp_small, _, _) = generate_representable_mdp(3, 2, 1e-12, 43).unwrap();
        let pi2 = random_policy(3, 2, &mut rng);
        let spec2 = fit_representation(&mdp_small, 18, 47).unwrap();
        let rho2 = construct_rho_pi(&spec2, &mdp_small, &pi2, 1.5).unwrap();
        assert!((rho2.z - spec2.b_r).abs() <= 1e-10 * spec2.b_r);

        // Z matches direct summation via the exact oracle, ν is a probability
        // mixture, and Z ≥ B_r.
        let (mdp3, _, _) = generate_representable_mdp(4, 2, 0.85, 53).unwrap();
        let pi3 = random_policy(4, 2, &mut rng);
        let spec3 = fit_representation(&mdp3, 24, 59).unwrap();
        let rho3 = construct_rho_pi(&spec3, &mdp3, &pi3, 4.0).unwrap();
        let v = mdp::exact_v(&mdp3, &pi3).unwrap();
        let z_direct = spec3.b_r
            + mdp3.gamma()
                * spec3.phi.iter().zip(v.iter()).map(|(p, v)| p * v).sum::<f64>();
        assert_abs_diff_eq!(rho3.z, z_direct, epsilon = 1e-10);
        assert!(rho3.z >= spec3.b_r);
        assert_abs_diff_eq!(rho3.nu.total_weight(), 1.0, epsilon = 1e-12);
        assert!((rho3.z / spec3.b_beta).abs() <= 0.5);
        assert!(rho3.p_mean.abs() <= 1.8);
    }

    #[test]
    fn verify_representation_zero_reward_and_sigma_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let template = TabularMdp::random(3, 2, 0.9, &mut rng);
        let mdp0 = TabularMdp::new(
            template.transition().clone(),
            Array2::zeros((3, 2)),
            0.9,
            template.initial_dist().clone(),
            template.embedding().clone(),
        )
        .unwrap();
        let pi = random_policy(3, 2, &mut rng);
        let spec = fit_representation(&mdp0, 12, 67).unwrap();
        let rho = construct_rho_pi(&spec, &mdp0, &pi, 2.0).unwrap();
        let report = verify_representation(&rho, &spec, &mdp0, &pi, 50_000, 71).unwrap();
        assert!(report.max_abs_error <= report.mc_radius_3sigma.max(1e-8));

        // Doubling samples shrinks the radius by about 1/√2.
        let r1 = verify_representation(&rho, &spec, &mdp0, &pi, 40_000, 73).unwrap();
        let r2 = verify_representation(&rho, &spec, &mdp0, &pi, 80_000, 73).unwrap();
        let ratio = r2.mc_radius_3sigma / r1.mc_radius_3sigma;
        let expected = 1.0 / 2.0f64.sqrt();
        assert!(
            (ratio - expected).abs() <= 0.2 * expected,
            "σ_MC ratio {ratio} vs {expected}"
        );
    }

    #[test]
    fn verify_representation_on_generated_instance() {
        let (mdp, _, _) = generate_representable_mdp(4, 2, 0.85, 79).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        let pi = random_policy(4, 2, &mut rng);
        let spec = fit_representation(&mdp, 24, 89).unwrap();
        assert!(spec.conforming);
        let rho = construct_rho_pi(&spec, &mdp, &pi, 2.0).unwrap();
        let report = verify_representation(&rho, &spec, &mdp, &pi, 200_000, 97).unwrap();
        let tolerance = report
            .mc_radius_3sigma
            .max(5.0 * spec.fit_residual / (1.0 - mdp.gamma()));
        assert!(
            report.max_abs_error <= tolerance,
            "max error {} vs tolerance {tolerance}",
            report.max_abs_error
        );

        // Deterministic quadrature agrees with exact Q up to amplified fit
        // residual.
        let q_quad = rho.q_quadrature(&mdp, spec.activation);
        let q_star = mdp::exact_q(&mdp, &pi).unwrap();
        let bound = 5.0 * spec.fit_residual.max(1e-12) / (1.0 - mdp.gamma());
        for (a, b) in q_quad.iter().zip(q_star.iter()) {
            assert!((a - b).abs() <= bound.max(1e-9), "quadrature {a} vs exact {b}");
        }
    }

    #[test]
    fn vector_field_probes() {
        let (mdp, _, _) = generate_representable_mdp(4, 2, 0.85, 101).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(103);
        let pi = random_policy(4, 2, &mut rng);
        let spec = fit_representation(&mdp, 24, 107).unwrap();
        let rho = construct_rho_pi(&spec, &mdp, &pi, 2.0).unwrap();
        let base = VisitationMeasure::uniform(4, 2);
        let weighting = td::weighting_distribution(&mdp, &pi, &base).unwrap();
        let probes: Vec<Vec<f64>> = (0..8)
            .map(|_| {
                (0..mdp.embed_dim() + 2)
                    .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                    .collect()
            })
            .collect();

        // Exact-Q substitution: the residual is identically zero.
        let q_star = mdp::exact_q(&mdp, &pi).unwrap();
        let g_exact = vector_field_at_rho_pi(
            &rho, &spec, &mdp, &pi, &probes, &weighting.sampling, QSource::Table(&q_star),
        )
        .unwrap();
        assert!(g_exact <= 1e-10, "g with exact Q = {g_exact}");

        // MC Q: ‖g‖ is bounded by B₁ × (max Bellman residual of the MC table) / α.
        let n_samples = 100_000;
        let mc = rho_pi_q_mc(&rho, &spec, &mdp, n_samples, 109).unwrap();
        let g_mc = vector_field_at_rho_pi(
            &rho,
            &spec,
            &mdp,
            &pi,
            &probes,
            &weighting.sampling,
            QSource::MonteCarlo { n_samples, seed: 109 },
        )
        .unwrap();
        let residual_table = mdp::bellman_residual_table(&mdp, &pi, &mc.mean).unwrap();
        let max_res = residual_table.iter().fold(0.0f64, |m, r| m.max(r.abs()));
        let mut b1: f64 = 0.0;
        for theta in &probes {
            for pair in 0..mdp.n_pairs() {
                let x = mdp.input_row(pair);
                let g = crate::net::grad_sigma_act(
                    spec.activation,
                    theta,
                    x.as_slice().unwrap(),
                    spec.b_beta,
                );
                b1 = b1.max(g.iter().map(|v| v * v).sum::<f64>().sqrt());
            }
        }
        assert!(
            g_mc <= b1 * max_res / rho.alpha + 1e-12,
            "g_mc {g_mc} vs bound {}",
            b1 * max_res / rho.alpha
        );

        // One-step problem: γ → 0 makes Q = r exactly representable, so the
        // quadrature field is tiny.
        let (mdp1, _, _) = generate_representable_mdp(3, 2, 1e-12, 113).unwrap();
        let pi1 = random_policy(3, 2, &mut rng);
        let spec1 = fit_representation(&mdp1, 18, 127).unwrap();
        let rho1 = construct_rho_pi(&spec1, &mdp1, &pi1, 2.0).unwrap();
        let base1 = VisitationMeasure::uniform(3, 2);
        let weighting1 = td::weighting_distribution(&mdp1, &pi1, &base1).unwrap();
        let probes1: Vec<Vec<f64>> = probes.iter().map(|p| p[..mdp1.embed_dim() + 2].to_vec()).collect();
        let g1 = vector_field_at_rho_pi(
            &rho1, &spec1, &mdp1, &pi1, &probes1, &weighting1.sampling, QSource::Quadrature,
        )
        .unwrap();
        assert!(g1 <= 1e-8, "one-step quadrature field {g1}");
    }

    #[test]
    fn chi2_closed_form_matches_quadrature_and_mc() {
        // Closed form against a dense 1-D quadrature oracle.
        let (mean, stddev) = (0.4, 0.7);
        let closed = chi2_gaussian_1d(mean, stddev).unwrap();
        let n = 2_000_000;
        let lo = -30.0;
        let hi = 30.0;
        let h = (hi - lo) / n as f64;
        let q = |b: f64| {
            let u = (b - mean) / stddev;
            (-0.5 * u * u).exp() / (stddev * (2.0 * std::f64::consts::PI).sqrt())
        };
        let rho0 = |b: f64| (-0.5 * b * b).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut acc = 0.0;
        for i in 0..=n {
            let b = lo + h * i as f64;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            let r = q(b) / rho0(b);
            acc += w * (r - 1.0).powi(2) * rho0(b);
        }
        let oracle = acc * h;
        assert_abs_diff_eq!(closed, oracle, epsilon = 1e-6);

        // MC estimator agrees with the closed form for a 1-D "mixture".
        let mix = MeasureMixture::probability(vec![GaussianComponent {
            weight: 1.0,
            mean: vec![mean],
            stddev,
        }])
        .unwrap();
        let mc = chi2_vs_standard_normal_mc(&mix, 400_000, 131);
        assert!(
            (mc - closed).abs() <= 0.1 * closed.max(1.0),
            "MC χ² {mc} vs closed {closed}"
        );
        assert!(chi2_gaussian_1d(0.0, 1.5).is_err());
    }

    #[test]
    fn spec_json_round_trip() {
        let (mdp, _, _) = generate_representable_mdp(3, 2, 0.9, 137).unwrap();
        let spec = fit_representation(&mdp, 18, 139).unwrap();
        let dir = std::env::temp_dir().join("mfac_spec_roundtrip");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("spec.json");
        spec.save_json(&path).unwrap();
        let back = RepresentableSpec::load_json(&path).unwrap();
        assert_eq!(spec.b_r, back.b_r);
        assert_eq!(spec.b_beta, back.b_beta);
        assert_eq!(spec.phi, back.phi);
        assert_eq!(spec.mu.components().len(), back.mu.components().len());
    }

    #[test]
    fn pipeline_closes_on_seeded_instances() {
        for seed in 0..5u64 {
            let (mdp, _, _) = generate_representable_mdp(3, 2, 0.85, 1000 + seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
            let pi = random_policy(3, 2, &mut rng);
            let report =
                representation_pipeline(&mdp, &pi, "unit", 18, 2.0, 60_000, 3000 + seed).unwrap();
            assert!(report.conforming);
            let tolerance = report
                .mc_radius_3sigma
                .max(5.0 * report.fit_residual / (1.0 - mdp.gamma()));
            assert!(
                report.max_q_error <= tolerance,
                "seed {seed}: error {} vs tolerance {tolerance}",
                report.max_q_error
            );
            assert!(report.max_g_norm_exact_q <= 1e-10);
            assert!(report.chi2_p_closed_form.is_finite());
            assert!(report.chi2_mu_mc.is_finite());
        }
    }
}
