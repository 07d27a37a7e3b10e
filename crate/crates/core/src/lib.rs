//! Loss models, buffer optimization and Monte Carlo simulation of
//! information-reconciliation strategies for quantum key distribution.
//!
//! Four strategies are covered: error estimation by random sampling
//! (`eers`), verification after correction by disclosing random bit pairs
//! (`verify-mindist`) or random parities (`verify-parity`), and sampling
//! followed by parity verification (`combo`).

pub mod analytic;
pub mod error;
pub mod optimize;
pub mod sim;
pub mod special;
pub mod trace;

pub use analytic::{LossReport, Method, StrategyConfig, SystemParams, Verification};
pub use error::{Error, Result};
pub use special::Probability;
