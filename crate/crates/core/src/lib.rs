//! Mean-field two-timescale actor-critic at desk scale.
//!
//! A simulator and library for neural actor-critic in the mean-field regime:
//! particle-ensemble critics updated by TD semigradients, closed-form
//! PPO/replicator actors, a scaled Wasserstein-2 restarting mechanism, and
//! exact tabular oracles so every theorem-adjacent quantity can be measured.
//!
//! Modules:
//! - [`mdp`]: finite MDPs, embeddings, and exact oracles (Q^π, V^π, A^π, J,
//!   visitation measures, MSBE, performance difference).
//! - [`representable`]: MDPs whose reward/kernel are activation integrals
//!   against mixture measures, and the representing measure ρ_π for Q^π.
//! - [`net`]: the particle-ensemble critic σ(s,a;θ) = B_β β(b) σ̃(wᵀ(s,a,1)).
//! - [`td`]: TD semigradient vector field and expected/stochastic steps.
//! - [`ppo`]: closed-form PPO update, replicator right-hand side, ζ and κ.
//! - [`wasserstein`]: exact and sliced empirical W₂, scaled metric, restarts.
//! - [`harness`]: experiment orchestration, benchmarks, sweeps, CSV output.
//! - [`verification`]: the full oracle/property suite run by `mfac verify`
//!   and the acceptance tests.

pub mod error;
pub mod harness;
pub mod linalg;
pub mod mdp;
pub mod net;
pub mod ppo;
pub mod quad;
pub mod representable;
pub mod td;
pub mod verification;
pub mod wasserstein;

pub use error::{Error, Result};
