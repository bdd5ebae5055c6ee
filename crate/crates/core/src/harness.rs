//! Experiment orchestration: two-timescale runs, fixed-policy TD runs,
//! exact-Q PPO runs, theorem-quantity metrics, sweeps, and CSV emission.
//!
//! All continuous-time integrals from the convergence statements are
//! reported as left-Riemann sums on the iteration grid; the CSV header
//! repeats that definition.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{self, Policy, TabularMdp, VisitationMeasure};
use crate::net::ParticleEnsemble;
use crate::ppo::{self, ActorConfig};
use crate::td::{self, TdConfig, TdMode};
use crate::wasserstein::{
    noise_floor, standard_normal_sample, RestartEvent, RestartMonitor, RestartPolicy, W2Estimator,
};

/// The three fixed seeded benchmark MDPs all acceptance numbers bind to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkId {
    Small5x3,
    Medium8x4,
    Large20x5,
}

impl BenchmarkId {
    pub const ALL: [BenchmarkId; 3] =
        [BenchmarkId::Small5x3, BenchmarkId::Medium8x4, BenchmarkId::Large20x5];

    pub fn name(&self) -> &'static str {
        match self {
            BenchmarkId::Small5x3 => "small5x3",
            BenchmarkId::Medium8x4 => "medium8x4",
            BenchmarkId::Large20x5 => "large20x5",
        }
    }
}

/// Deterministic benchmark instances (γ = 0.9, default simplex embedding).
pub fn benchmark_mdp(id: BenchmarkId) -> TabularMdp {
    let (ns, na, seed) = match id {
        BenchmarkId::Small5x3 => (5, 3, 0x5A31u64),
        BenchmarkId::Medium8x4 => (8, 4, 0x8A40u64),
        BenchmarkId::Large20x5 => (20, 5, 0x20A5u64),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TabularMdp::random(ns, na, 0.9, &mut rng)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MdpSource {
    File { path: PathBuf },
    Benchmark { id: BenchmarkId },
    Generated { n_states: usize, n_actions: usize, gamma: f64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    TwoTimescale,
    MfPpoExact,
    TdFixedPolicy,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitPolicyCfg {
    #[default]
    Uniform,
    /// Softmax of N(0, stddev²) logits on a dedicated seed stream.
    SeededLogits { stddev: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaseDistCfg {
    #[default]
    Uniform,
    /// JSON file holding a probability table over (s, a).
    File { path: PathBuf },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThresholdCfg {
    /// Explicit W̃₀.
    Value { value: f64 },
    /// multiple × α × measured noise floor (the λ = 3 default lives here).
    NoiseFloorMultiple { value: f64 },
    /// Monitor without ever restarting.
    Infinite,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RestartCfg {
    pub threshold: ThresholdCfg,
    /// Check cadence in TD steps.
    pub check_every: usize,
    /// λ metadata.
    pub lambda_scale: f64,
    pub estimator: W2Estimator,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EnsembleCfg {
    pub m: usize,
    pub alpha: f64,
    pub b_beta: f64,
    pub antithetic: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub mdp: MdpSource,
    pub mode: RunMode,
    pub actor: ActorConfig,
    pub td: TdConfig,
    pub ensemble: EnsembleCfg,
    #[serde(default)]
    pub restart: Option<RestartCfg>,
    #[serde(default)]
    pub base_dist: BaseDistCfg,
    #[serde(default)]
    pub init_policy: InitPolicyCfg,
    pub metrics_every: usize,
    /// Overrides the iteration count; required when eps_actor = 0.
    #[serde(default)]
    pub steps: Option<usize>,
    /// Replace the critic by the exact oracle (two-timescale runs only).
    #[serde(default)]
    pub oracle_critic: bool,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.metrics_every == 0 {
            return Err(Error::InvalidParameter("metrics cadence must be >= 1".into()));
        }
        if self.actor.eps_actor < 0.0 || !self.actor.eps_actor.is_finite() {
            return Err(Error::InvalidParameter("eps_actor must be finite and >= 0".into()));
        }
        if self.actor.eps_actor > 0.0 && self.td.eps_prime != 0.0 {
            let derived = self.td.eta * self.actor.eps_actor;
            if (self.td.eps_prime - derived).abs() > 1e-12 * derived.max(1.0) {
                return Err(Error::InvalidParameter(format!(
                    "eps_prime {} inconsistent with eta*eps_actor = {derived}",
                    self.td.eps_prime
                )));
            }
        }
        if self.restart.is_some() && self.critic_kind() == CriticKind::Oracle {
            return Err(Error::InvalidParameter(
                "restart mechanism needs an ensemble critic".into(),
            ));
        }
        Ok(())
    }

    /// Effective TD stepsize: η·ε when the actor clock runs, the explicit
    /// ε′ otherwise.
    pub fn eps_prime(&self) -> f64 {
        if self.actor.eps_actor > 0.0 {
            self.td.eta * self.actor.eps_actor
        } else {
            self.td.eps_prime
        }
    }

    /// Iteration count: explicit override, else K = round(t_end/ε).
    pub fn resolve_steps(&self) -> Result<usize> {
        if let Some(n) = self.steps {
            if n == 0 {
                return Err(Error::InvalidParameter("steps must be >= 1".into()));
            }
            return Ok(n);
        }
        if self.actor.eps_actor > 0.0 {
            return self.actor.steps();
        }
        Err(Error::InvalidParameter(
            "eps_actor = 0 needs an explicit `steps` count".into(),
        ))
    }

    fn critic_kind(&self) -> CriticKind {
        match self.mode {
            RunMode::MfPpoExact => CriticKind::Oracle,
            RunMode::TwoTimescale if self.oracle_critic => CriticKind::Oracle,
            _ => CriticKind::Ensemble,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CriticKind {
    Oracle,
    Ensemble,
}

/// splitmix64; used to derive independent sub-seeds from the config seed.
fn sub_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e3779b97f4a7c15);
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// One metrics row; `t = k·ε` (or `k·ε′` when the actor clock is off) and the
/// running time average is the left-Riemann mean of gaps over iterations 0..=k.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MetricsRow {
    pub k: usize,
    pub t: f64,
    pub j: f64,
    pub gap: f64,
    pub avg_gap: f64,
    pub policy_eval_error: f64,
    pub msbe: f64,
    pub tilde_w2: f64,
    pub restart_count: usize,
    pub wall_ms: f64,
}

/// Drift accounting alongside restart-enabled runs: the logged W̃₂ must stay
/// below threshold + the accumulated per-step drift bound since the last check.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct DriftSample {
    pub k: usize,
    pub tilde_w2: f64,
    /// Σ α · (max particle displacement) over TD steps since the last check.
    pub drift_bound: f64,
}

/// Cached per-run quantities.
#[derive(Debug, Clone, Serialize)]
pub struct RunHeader {
    pub mode: RunMode,
    pub j_star: f64,
    pub zeta: f64,
    pub kappa: f64,
    pub eps_actor: f64,
    pub eps_prime: f64,
    pub eta: f64,
    pub t_end: f64,
    pub steps: usize,
    pub seed: u64,
    pub noise_floor: Option<f64>,
    pub threshold: Option<f64>,
}

#[derive(Debug)]
pub struct RunResult {
    pub header: RunHeader,
    pub rows: Vec<MetricsRow>,
    pub restarts: Vec<RestartEvent>,
    pub drift_log: Vec<DriftSample>,
    pub final_policy: Policy,
    pub final_ensemble: Option<ParticleEnsemble>,
}

impl RunResult {
    /// Time-average gap over the whole run (the last row always sits at the
    /// final iteration).
    pub fn final_avg_gap(&self) -> f64 {
        self.rows.last().map(|r| r.avg_gap).unwrap_or(f64::NAN)
    }

    /// Rows compared for trajectory equality: everything except the
    /// wall-clock column (timing is not reproducible) and the W̃₂ column
    /// (undefined without a monitor).
    pub fn trajectory_fingerprint(&self) -> Vec<(usize, u64, u64, u64, u64, u64, usize)> {
        self.rows
            .iter()
            .map(|r| {
                (
                    r.k,
                    r.t.to_bits(),
                    r.j.to_bits(),
                    r.gap.to_bits(),
                    r.policy_eval_error.to_bits(),
                    r.msbe.to_bits(),
                    r.restart_count,
                )
            })
            .collect()
    }
}

/// Resolve the MDP behind a config.
pub fn resolve_mdp(source: &MdpSource) -> Result<TabularMdp> {
    match source {
        MdpSource::File { path } => TabularMdp::load_json(path),
        MdpSource::Benchmark { id } => Ok(benchmark_mdp(*id)),
        MdpSource::Generated { n_states, n_actions, gamma, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            Ok(TabularMdp::random(*n_states, *n_actions, *gamma, &mut rng))
        }
    }
}

fn build_base_dist(cfg: &BaseDistCfg, mdp: &TabularMdp) -> Result<VisitationMeasure> {
    match cfg {
        BaseDistCfg::Uniform => Ok(VisitationMeasure::uniform(mdp.n_states(), mdp.n_actions())),
        BaseDistCfg::File { path } => {
            let text = std::fs::read_to_string(path)?;
            let table: Vec<Vec<f64>> = serde_json::from_str(&text)?;
            let (ns, na) = (mdp.n_states(), mdp.n_actions());
            if table.len() != ns || table.iter().any(|row| row.len() != na) {
                return Err(Error::DimensionMismatch("base distribution file shape".into()));
            }
            VisitationMeasure::new(Array2::from_shape_fn((ns, na), |(s, a)| table[s][a]))
        }
    }
}

fn build_init_policy(cfg: &InitPolicyCfg, mdp: &TabularMdp, seed: u64) -> Result<Policy> {
    match cfg {
        InitPolicyCfg::Uniform => Ok(Policy::uniform(mdp.n_states(), mdp.n_actions())),
        InitPolicyCfg::SeededLogits { stddev } => {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 2));
            let logits = Array2::from_shape_fn((mdp.n_states(), mdp.n_actions()), |_| {
                stddev * rng.sample::<f64, _>(rand_distr::StandardNormal)
            });
            Policy::from_logits(&logits)
        }
    }
}

/// Run one experiment. Dispatches on mode; all modes share the same engine so
/// the factorization identities (ε = 0 ⇒ fixed-policy TD, oracle critic ⇒
/// exact-Q PPO) hold by construction and are asserted in tests.
pub fn run(cfg: &ExperimentConfig) -> Result<RunResult> {
    cfg.validate()?;
    let mdp = resolve_mdp(&cfg.mdp)?;
    run_on(cfg, &mdp)
}

/// Two-timescale run: per iteration one critic TD step with ε′, then one
/// actor PPO step with ε on the current ensemble's Q table.
pub fn run_two_timescale(cfg: &ExperimentConfig) -> Result<RunResult> {
    let mut cfg = cfg.clone();
    cfg.mode = RunMode::TwoTimescale;
    run(&cfg)
}

/// Actor-only loop against the exact critic Q^{π_k}.
pub fn run_mf_ppo_exact(cfg: &ExperimentConfig) -> Result<RunResult> {
    let mut cfg = cfg.clone();
    cfg.mode = RunMode::MfPpoExact;
    run(&cfg)
}

/// Critic-only loop under a frozen policy.
pub fn run_td_fixed_policy(cfg: &ExperimentConfig) -> Result<RunResult> {
    let mut cfg = cfg.clone();
    cfg.mode = RunMode::TdFixedPolicy;
    run(&cfg)
}

/// Engine shared by every mode.
pub fn run_on(cfg: &ExperimentConfig, mdp: &TabularMdp) -> Result<RunResult> {
    cfg.validate()?;
    let critic = cfg.critic_kind();
    let actor_on = !matches!(cfg.mode, RunMode::TdFixedPolicy);
    let eps = cfg.actor.eps_actor;
    let eps_prime = cfg.eps_prime();
    let steps = cfg.resolve_steps()?;
    let dt = if actor_on && eps > 0.0 { eps } else { eps_prime };

    let base = build_base_dist(&cfg.base_dist, mdp)?;
    let mut policy = build_init_policy(&cfg.init_policy, mdp, cfg.seed)?;

    // π* and the theorem quantities, cached once per run.
    let pi_star = mdp::optimal_policy(mdp)?;
    let j_star = mdp::expected_return(mdp, &pi_star)?;
    let start_star = VisitationMeasure::product(mdp.initial_dist(), &pi_star)?;
    let visit_star = mdp::visitation(mdp, &pi_star, &start_star)?;
    let zeta = ppo::kl_weighted(&pi_star, &policy, &visit_star.state_marginal())?;
    let kappa = ppo::concentrability(&visit_star, &base)?;

    let mut ensemble = match critic {
        CriticKind::Ensemble => Some(ParticleEnsemble::init(
            cfg.ensemble.m,
            mdp.embed_dim(),
            cfg.ensemble.alpha,
            cfg.ensemble.b_beta,
            sub_seed(cfg.seed, 1),
            cfg.ensemble.antithetic,
        )?),
        CriticKind::Oracle => None,
    };

    let (mut monitor, floor_out, threshold_out) = match (&cfg.restart, &ensemble) {
        (Some(rc), Some(ens)) => {
            let dim = mdp.embed_dim() + 2;
            let ref_sample = standard_normal_sample(cfg.ensemble.m, dim, sub_seed(cfg.seed, 5), 0);
            let floor = noise_floor(cfg.ensemble.m, dim, sub_seed(cfg.seed, 6), &rc.estimator)?;
            let threshold = match rc.threshold {
                ThresholdCfg::Value { value } => value,
                ThresholdCfg::NoiseFloorMultiple { value } => value * ens.alpha() * floor,
                ThresholdCfg::Infinite => f64::INFINITY,
            };
            let policy = RestartPolicy {
                threshold,
                check_every: rc.check_every,
                lambda_scale: rc.lambda_scale,
                ref_sample,
                estimator: rc.estimator,
            };
            let monitor = RestartMonitor::new(policy, sub_seed(cfg.seed, 4))?;
            (Some(monitor), Some(floor), Some(threshold))
        }
        _ => (None, None, None),
    };

    let td_cfg = TdConfig { eps_prime, ..cfg.td };
    let mut td_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 3));
    td_rng.set_stream(3);

    let started = Instant::now();
    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut restarts: Vec<RestartEvent> = Vec::new();
    let mut drift_log: Vec<DriftSample> = Vec::new();
    let mut gap_sum = 0.0f64;
    let mut drift_accum = 0.0f64;

    // Fixed-policy runs reuse the weighting and the exact critic table.
    let frozen_weighting = if actor_on {
        None
    } else {
        Some(td::weighting_distribution(mdp, &policy, &base)?)
    };
    let frozen_q_star = if actor_on {
        None
    } else {
        Some(mdp::exact_q(mdp, &policy)?)
    };

    for k in 0..steps {
        let t = k as f64 * dt;

        // Restart check first so a metrics row at this iteration sees the
        // post-restart ensemble.
        if let (Some(mon), Some(ens)) = (monitor.as_mut(), ensemble.as_mut()) {
            if mon.due(k) {
                let check = mon.check(ens, k, t)?;
                if let Some(event) = check.event {
                    restarts.push(event);
                }
                drift_accum = 0.0;
            }
        }

        let weighting_owned;
        let weighting = match &frozen_weighting {
            Some(w) => w,
            None => {
                weighting_owned = td::weighting_distribution(mdp, &policy, &base)?;
                &weighting_owned
            }
        };

        let v = mdp::state_values(mdp, &policy)?;
        let j: f64 = mdp.initial_dist().iter().zip(v.iter()).map(|(d, v)| d * v).sum();
        let gap = j_star - j;
        gap_sum += gap;

        let log_row = k % cfg.metrics_every == 0 || k == steps - 1;
        if log_row {
            let (eval_err, msbe_val) = match &ensemble {
                Some(ens) => {
                    let q_ens = ens.q_table(mdp)?;
                    let q_star_cur = match &frozen_q_star {
                        Some(q) => q.clone(),
                        None => mdp::q_from_state_values(mdp, &v),
                    };
                    (
                        td::policy_eval_error_with_q(&q_ens, &q_star_cur, &weighting.eval_dist),
                        mdp::msbe(mdp, &policy, &q_ens, &weighting.sampling)?,
                    )
                }
                None => (0.0, 0.0),
            };
            let w2 = match (&monitor, &ensemble) {
                (Some(mon), Some(ens)) => {
                    let w = mon.measure(ens)?;
                    drift_log.push(DriftSample { k, tilde_w2: w, drift_bound: drift_accum });
                    w
                }
                _ => f64::NAN,
            };
            rows.push(MetricsRow {
                k,
                t,
                j,
                gap,
                avg_gap: gap_sum / (k + 1) as f64,
                policy_eval_error: eval_err,
                msbe: msbe_val,
                tilde_w2: w2,
                restart_count: monitor.as_ref().map(|m| m.restarts).unwrap_or(0),
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            });
        }

        // Critic update.
        if let Some(ens) = ensemble.as_mut() {
            let stats = match td_cfg.mode {
                TdMode::Expected => {
                    td::expected_td_step(ens, mdp, &policy, &weighting.sampling, &td_cfg, k)?
                }
                TdMode::Stochastic => td::stochastic_td_step(
                    ens,
                    mdp,
                    &policy,
                    &weighting.sampling,
                    &td_cfg,
                    k,
                    &mut td_rng,
                )?,
            };
            drift_accum += ens.alpha() * stats.max_displacement;
        }

        // Actor update on the current critic.
        if actor_on && eps > 0.0 {
            let q_table = match (&critic, &ensemble) {
                (CriticKind::Oracle, _) => mdp::q_from_state_values(
                    mdp,
                    &mdp::state_values(mdp, &policy)?,
                ),
                (CriticKind::Ensemble, Some(ens)) => ens.q_table(mdp)?,
                (CriticKind::Ensemble, None) => unreachable!("ensemble critic without ensemble"),
            };
            policy = ppo::df_ppo_step(&policy, &q_table, eps)?;
        }
    }

    Ok(RunResult {
        header: RunHeader {
            mode: cfg.mode,
            j_star,
            zeta,
            kappa,
            eps_actor: eps,
            eps_prime,
            eta: cfg.td.eta,
            t_end: steps as f64 * dt,
            steps,
            seed: cfg.seed,
            noise_floor: floor_out,
            threshold: threshold_out,
        },
        rows,
        restarts,
        drift_log,
        final_policy: policy,
        final_ensemble: ensemble,
    })
}

/// Structural report over a T-sweep: measured time-average gaps, restart
/// counts, and the least-squares slope of restart count against T.
#[derive(Debug, Clone, Serialize)]
pub struct Theorem4Report {
    pub entries: Vec<Theorem4Row>,
    /// Least-squares slope of restart count N on horizon T.
    pub restart_slope_per_t: f64,
    pub zeta: f64,
    pub kappa: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Theorem4Row {
    pub t_end: f64,
    pub avg_gap: f64,
    pub restarts: usize,
}

pub fn theorem4_report(results: &[RunResult]) -> Result<Theorem4Report> {
    if results.is_empty() {
        return Err(Error::InvalidParameter("theorem-4 report needs at least one run".into()));
    }
    let entries: Vec<Theorem4Row> = results
        .iter()
        .map(|r| Theorem4Row {
            t_end: r.header.t_end,
            avg_gap: r.final_avg_gap(),
            restarts: r.restarts.len(),
        })
        .collect();
    let n = entries.len() as f64;
    let mean_t = entries.iter().map(|e| e.t_end).sum::<f64>() / n;
    let mean_n = entries.iter().map(|e| e.restarts as f64).sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var = 0.0;
    for e in &entries {
        cov += (e.t_end - mean_t) * (e.restarts as f64 - mean_n);
        var += (e.t_end - mean_t).powi(2);
    }
    let slope = if var > 0.0 { cov / var } else { 0.0 };
    Ok(Theorem4Report {
        entries,
        restart_slope_per_t: slope,
        zeta: results[0].header.zeta,
        kappa: results[0].header.kappa,
    })
}

/// A single sweep cell: overrides applied to the template config.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct CellPatch {
    pub alpha: Option<f64>,
    pub eta: Option<f64>,
    pub m: Option<usize>,
    pub t_end: Option<f64>,
    pub eps_actor: Option<f64>,
}

impl CellPatch {
    pub fn apply(&self, template: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = template.clone();
        if let Some(alpha) = self.alpha {
            cfg.ensemble.alpha = alpha;
        }
        if let Some(eta) = self.eta {
            cfg.td.eta = eta;
        }
        if let Some(m) = self.m {
            cfg.ensemble.m = m;
        }
        if let Some(t_end) = self.t_end {
            cfg.actor.t_end = t_end;
        }
        if let Some(eps) = self.eps_actor {
            cfg.actor.eps_actor = eps;
        }
        cfg
    }
}

/// Axis lists for a cartesian sweep over (α, η, M, T, ε). All-empty grids
/// yield no cells.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SweepGrid {
    #[serde(default)]
    pub alpha: Vec<f64>,
    #[serde(default)]
    pub eta: Vec<f64>,
    #[serde(default)]
    pub m: Vec<usize>,
    #[serde(default)]
    pub t_end: Vec<f64>,
    #[serde(default)]
    pub eps_actor: Vec<f64>,
}

pub fn cartesian_cells(grid: &SweepGrid) -> Vec<CellPatch> {
    if grid.alpha.is_empty()
        && grid.eta.is_empty()
        && grid.m.is_empty()
        && grid.t_end.is_empty()
        && grid.eps_actor.is_empty()
    {
        return Vec::new();
    }
    fn axis<T: Copy>(values: &[T]) -> Vec<Option<T>> {
        if values.is_empty() {
            vec![None]
        } else {
            values.iter().map(|&v| Some(v)).collect()
        }
    }
    let mut cells = Vec::new();
    for &alpha in &axis(&grid.alpha) {
        for &eta in &axis(&grid.eta) {
            for &m in &axis(&grid.m) {
                for &t_end in &axis(&grid.t_end) {
                    for &eps_actor in &axis(&grid.eps_actor) {
                        cells.push(CellPatch { alpha, eta, m, t_end, eps_actor });
                    }
                }
            }
        }
    }
    cells
}

/// One summary row per sweep cell.
#[derive(Debug, Clone, Serialize)]
pub struct SweepSummaryRow {
    pub cell: usize,
    pub alpha: f64,
    pub eta: f64,
    pub m: usize,
    pub t_end: f64,
    pub eps_actor: f64,
    pub j_star: f64,
    pub final_avg_gap: f64,
    pub final_policy_eval_error: f64,
    pub restarts: usize,
}

/// Run every cell (cells are independent and parallel); per-cell metrics land
/// in `out_dir/cell_<i>.csv` when a directory is given.
pub fn sweep(
    template: &ExperimentConfig,
    cells: &[CellPatch],
    out_dir: Option<&Path>,
) -> Result<Vec<SweepSummaryRow>> {
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let results: Vec<Result<SweepSummaryRow>> = cells
        .par_iter()
        .enumerate()
        .map(|(i, patch)| {
            let cfg = patch.apply(template);
            let result = run(&cfg)?;
            if let Some(dir) = out_dir {
                write_metrics_csv(&dir.join(format!("cell_{i}.csv")), &result)?;
            }
            let last = result.rows.last();
            Ok(SweepSummaryRow {
                cell: i,
                alpha: cfg.ensemble.alpha,
                eta: cfg.td.eta,
                m: cfg.ensemble.m,
                t_end: cfg.actor.t_end,
                eps_actor: cfg.actor.eps_actor,
                j_star: result.header.j_star,
                final_avg_gap: result.final_avg_gap(),
                final_policy_eval_error: last.map(|r| r.policy_eval_error).unwrap_or(f64::NAN),
                restarts: result.restarts.len(),
            })
        })
        .collect();
    results.into_iter().collect()
}

/// Named preset: timescale separation η = α^{3/2} at α = 16 on the small
/// benchmark, expected-mode critic.
pub fn two_timescale_preset(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        mdp: MdpSource::Benchmark { id: BenchmarkId::Small5x3 },
        mode: RunMode::TwoTimescale,
        actor: ActorConfig { eps_actor: 5e-4, t_end: 20.0 },
        td: TdConfig { eps_prime: 0.0, eta: 64.0, mode: TdMode::Expected, batch: 1 },
        ensemble: EnsembleCfg { m: 64, alpha: 16.0, b_beta: 6.0, antithetic: true },
        restart: None,
        base_dist: BaseDistCfg::Uniform,
        init_policy: InitPolicyCfg::Uniform,
        metrics_every: 1000,
        steps: None,
        oracle_critic: false,
        seed,
    }
}

/// Floats print with 17 significant digits so CSV decode is exact.
pub fn fmt_float(x: f64) -> String {
    if x.is_nan() {
        "NaN".to_string()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".to_string() } else { "-inf".to_string() }
    } else {
        format!("{x:.16e}")
    }
}

/// Metrics CSV: two comment lines (schema note and cached run header), then
/// the fixed column order of [`MetricsRow`].
pub fn write_metrics_csv(path: &Path, result: &RunResult) -> Result<()> {
    use std::fmt::Write as _;
    let mut text = String::new();
    let _ = writeln!(
        text,
        "# mfac metrics v1; time averages are left-Riemann sums on the iteration grid"
    );
    let h = &result.header;
    let _ = writeln!(
        text,
        "# mode={:?} j_star={} zeta={} kappa={} eps_actor={} eps_prime={} eta={} t_end={} steps={} seed={} noise_floor={} threshold={}",
        h.mode,
        fmt_float(h.j_star),
        fmt_float(h.zeta),
        fmt_float(h.kappa),
        fmt_float(h.eps_actor),
        fmt_float(h.eps_prime),
        fmt_float(h.eta),
        fmt_float(h.t_end),
        h.steps,
        h.seed,
        h.noise_floor.map(fmt_float).unwrap_or_else(|| "none".into()),
        h.threshold.map(fmt_float).unwrap_or_else(|| "none".into()),
    );
    let _ = writeln!(
        text,
        "k,t,j,gap,avg_gap,policy_eval_error,msbe,tilde_w2,restart_count,wall_ms"
    );
    for r in &result.rows {
        let _ = writeln!(
            text,
            "{},{},{},{},{},{},{},{},{},{}",
            r.k,
            fmt_float(r.t),
            fmt_float(r.j),
            fmt_float(r.gap),
            fmt_float(r.avg_gap),
            fmt_float(r.policy_eval_error),
            fmt_float(r.msbe),
            fmt_float(r.tilde_w2),
            r.restart_count,
            fmt_float(r.wall_ms),
        );
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Restart events CSV: (step, t, tilde_w2, threshold, restart_index).
pub fn write_restarts_csv(path: &Path, result: &RunResult) -> Result<()> {
    use std::fmt::Write as _;
    let mut text = String::new();
    let _ = writeln!(text, "step,t,tilde_w2,threshold,restart_index");
    for e in &result.restarts {
        let _ = writeln!(
            text,
            "{},{},{},{},{}",
            e.step,
            fmt_float(e.t),
            fmt_float(e.tilde_w2),
            fmt_float(e.threshold),
            e.restart_index
        );
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Sweep summary CSV.
pub fn write_summary_csv(path: &Path, rows: &[SweepSummaryRow]) -> Result<()> {
    use std::fmt::Write as _;
    let mut text = String::new();
    let _ = writeln!(
        text,
        "cell,alpha,eta,m,t_end,eps_actor,j_star,final_avg_gap,final_policy_eval_error,restarts"
    );
    for r in rows {
        let _ = writeln!(
            text,
            "{},{},{},{},{},{},{},{},{},{}",
            r.cell,
            fmt_float(r.alpha),
            fmt_float(r.eta),
            r.m,
            fmt_float(r.t_end),
            fmt_float(r.eps_actor),
            fmt_float(r.j_star),
            fmt_float(r.final_avg_gap),
            fmt_float(r.final_policy_eval_error),
            r.restarts
        );
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Policy checkpoint: header (n_states, n_actions, iteration) then one
/// log-prob row per state; exact decimal round trip.
pub fn save_policy_checkpoint(path: &Path, policy: &Policy, iteration: usize) -> Result<()> {
    use std::fmt::Write as _;
    let mut text = String::new();
    let _ = writeln!(text, "{} {} {}", policy.n_states(), policy.n_actions(), iteration);
    for s in 0..policy.n_states() {
        let row: Vec<String> = (0..policy.n_actions())
            .map(|a| format!("{}", policy.log_prob(s, a)))
            .collect();
        let _ = writeln!(text, "{}", row.join(" "));
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_policy_checkpoint(path: &Path) -> Result<(Policy, usize)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse("empty policy checkpoint".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 3 {
        return Err(Error::Parse("policy checkpoint header needs 3 fields".into()));
    }
    let ns: usize = fields[0].parse().map_err(|_| Error::Parse("bad n_states".into()))?;
    let na: usize = fields[1].parse().map_err(|_| Error::Parse("bad n_actions".into()))?;
    let iteration: usize = fields[2].parse().map_err(|_| Error::Parse("bad iteration".into()))?;
    let mut log_probs = Array2::<f64>::zeros((ns, na));
    for s in 0..ns {
        let line = lines.next().ok_or_else(|| Error::Parse("policy checkpoint truncated".into()))?;
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| Error::Parse(format!("bad float {t}"))))
            .collect::<Result<_>>()?;
        if row.len() != na {
            return Err(Error::Parse(format!("policy row {s} has {} entries", row.len())));
        }
        for a in 0..na {
            log_probs[[s, a]] = row[a];
        }
    }
    Ok((Policy::from_log_probs(log_probs)?, iteration))
}
