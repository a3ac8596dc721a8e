//! Record linkage under uncertainty and small-area estimation on linked data.
//!
//! The crate is organised bottom-up:
//!
//! - [`datamodel`]: record files, key-field schemas, matching matrices and ground truth.
//! - [`linkage_fs`]: Fellegi–Sunter comparison vectors, EM fit and thresholded links.
//! - [`linkage_bayes`]: hit-and-miss model over true key values with an MCMC sampler
//!   for the matching matrix.
//! - [`sae_core`]: unit-level nested-error model fitted by ML Fisher scoring, EBLUP
//!   area means and Prasad–Rao MSE.
//! - [`sae_linked`]: linkage-error-adjusted estimation under exchangeable errors.
//! - [`sae_bayes`]: hierarchical Bayes unit-level model, with and without feedback
//!   from the regression into the linkage.
//! - [`simharness`]: synthetic population, replicated sampling and estimator comparison.
//! - [`cli`]: the `linksae` command line.

pub mod cli;
pub mod datamodel;
pub mod error;
pub mod io;
pub mod linalg;
pub mod linkage_bayes;
pub mod linkage_fs;
pub mod rng;
pub mod sae_bayes;
pub mod sae_core;
pub mod sae_linked;
pub mod simharness;

pub use error::{Error, Result};
