//! Neural discrete choice models that stay consistent with random utility
//! maximisation and with the fungibility of money.
//!
//! The central model ([`architectures::Variant::Ass`]) gives every alternative
//! its own utility stack for non-cost attributes and one cost stack whose
//! weights are tied across all alternatives, so a unit of money carries the
//! same marginal utility whichever alternative it is spent on. Two baselines
//! share the same engine: the fully alternative-specific network
//! ([`architectures::Variant::Asu`]) and a fully connected network
//! ([`architectures::Variant::Fc`]). Linear and log-linear multinomial logit
//! models live in [`mnl`].
//!
//! Pipeline, module by module:
//!
//! - [`data`]: wide-format ingestion, prescaling, min-max normalisation with a
//!   pooled cost range, stratified splitting.
//! - [`nncore`]: dense layers, softmax/cross-entropy, Glorot init, Adam.
//! - [`architectures`]: network assembly, utilities, analytic gradients.
//! - [`mnl`]: maximum likelihood for multinomial logit.
//! - [`synthgen`]: Gumbel-error choice simulation with analytic truth oracles.
//! - [`training`]: early stopping, ensembles, grid search, goodness of fit.
//! - [`welfare`]: marginal utilities, VTT/VoWT, trimming and binning.
//! - [`prepare`]: split, prescale and normalise in one call.
//! - [`cli`]: config-driven commands behind the `assnn` binary.
//!
//! Runnable walkthroughs live in the crate's `examples/` directory.

// `!(x > 0.0)` is how parameter checks reject NaN along with bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod architectures;
pub mod cli;
pub mod data;
pub mod error;
pub mod mnl;
pub mod nncore;
pub mod prepare;
pub mod synthgen;
pub mod training;
pub mod welfare;

pub use error::{Error, Result};
