//! Finite-time covariance of linear stochastic approximation driven by
//! Markovian noise.
//!
//! The crate computes the leading `Σ_θ / n` and second-order `Σ_{θ,2} / n²`
//! covariance terms of
//!
//! ```text
//! θ̃_{n+1} = θ̃_n + α_{n+1} [A θ̃_n + Δ_{n+1}],   α_n = g / n,   Δ_n = f*(Φ_n)
//! ```
//!
//! for a Markov chain `Φ`, and checks them two independent ways: exact
//! propagation of the first and second moments (`oracle`) and seeded Monte
//! Carlo ensembles (`harness`).
//!
//! Module map:
//!
//! - [`chain`]: finite chains, the uniformized M/M/1 queue, seeded samplers.
//! - [`poisson`]: first and second Poisson equations and the stationary noise
//!   statistics built from them.
//! - [`covtheory`]: Lyapunov solver, eigen-report, `Σ_θ`, `Σ_θ^g`, `Σ_{θ,2}`.
//! - [`engine`]: the recursions (linear SA, MCMC averaging, random-matrix SA,
//!   TD(0), SNR/LSTD, decomposition and coupling traces).
//! - [`oracle`]: exact moment propagation for finite chains.
//! - [`harness`]: parallel ensembles, jackknife moments, rate fits, tails.
//! - [`cli`]: JSON-configured experiment runner.

pub mod chain;
pub mod cli;
pub mod covtheory;
pub mod engine;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod oracle;
pub mod poisson;

pub use error::{Error, Result};
