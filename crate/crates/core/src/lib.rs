//! Checking, falsification and empirical validation of Lyapunov-type
//! certificates for incremental stability of nonlinear control systems,
//! under Euclidean, weighted and pullback metrics.
//!
//! Systems and certificates are written in a small expression language
//! ([`expr`]). Certificates are checked by sampling over a compact box
//! ([`certificate`]); stability estimates are fitted to simulated ensembles
//! ([`envelope`]); [`augment`] builds the doubled systems whose stability with
//! respect to the diagonal encodes incremental stability.

pub mod augment;
pub mod certificate;
pub mod cli;
pub mod comparison;
pub mod domain;
pub mod envelope;
pub mod expr;
pub mod metric;
pub mod rng;
pub mod system;
