//! Anchored bandit policy optimization over parametric softmax item policies.
//!
//! The crate provides:
//! - log-linear softmax policies over explicit candidate sets ([`policy`]),
//! - synthetic user sequences and one-step contextual-bandit logs with exact
//!   logging propensities ([`synth`], [`logging`]),
//! - the anchored update rule: anchor-augmented rollout groups, asymmetric
//!   rewards, stratified SNIPS weighting, weighted baselines, and the
//!   anchor-constrained clipped surrogate, plus a vanilla group-relative mode
//!   for comparison ([`optimizer`]),
//! - a numerical verifier for the baseline-calibration identities
//!   ([`theory`]),
//! - ranking metrics and exposure-matching diagnostics ([`metrics`]),
//! - a closed-loop experiment driver and its configuration ([`config`],
//!   [`experiment`]).

pub mod config;
pub mod error;
pub mod experiment;
pub mod logging;
pub mod metrics;
pub mod optimizer;
pub mod policy;
pub mod rng;
pub mod synth;
pub mod theory;

pub use error::{Error, Result};
pub use policy::{CandidateSet, Context, ItemDistribution, ItemId, PolicyParams};
