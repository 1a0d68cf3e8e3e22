//! Simulation and plug-in estimation for multi-valued treatments with
//! discrete instruments.
//!
//! The crate has three layers:
//!
//! * a structural simulator ([`dgp`]) of utility-maximizing agents whose
//!   voucher-dependent budget sets make per-unit monotonicity inequalities
//!   hold by construction;
//! * the identification pipeline: complier masses and outcome CDFs
//!   ([`compliers`]), counterfactual mappings solved from the simultaneous
//!   complier-CDF system ([`counterfactual`]), and treatment effects
//!   ([`effects`]), with assumption checks in [`diagnostics`];
//! * independent validation engines ([`oracle`]): exhaustive grid search of
//!   the moment system, exact analytic mappings, and latent complier sets.
//!
//! See the crate examples for end-to-end usage; the `ivqte` binary exposes
//! the same pipelines as `simulate`, `estimate`, `diagnose`, and
//! `oracle-check` subcommands.

pub mod cdf;
pub mod cli;
pub mod compliers;
pub mod counterfactual;
pub mod dgp;
pub mod diagnostics;
pub mod effects;
pub mod error;
pub mod maps;
pub mod monotonicity;
pub mod oracle;

pub use error::{Error, Result};
