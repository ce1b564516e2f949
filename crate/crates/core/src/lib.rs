//! Remote state estimation over lossy channels with state-secrecy coding, an
//! eavesdropper that selectively blocks acknowledgments to stay in sync, and
//! Bayesian quickest change detection of that eavesdropper from the ages of
//! received packets and acknowledgments.
//!
//! Layers, bottom up:
//! - [`process`]: LTI process and the sensor's Kalman filter.
//! - [`coding`]: encoding against the last acknowledged estimate, decoding, dropout prediction.
//! - [`network`]: Bernoulli channels, the blocking attacker, the acknowledged reference time.
//! - [`qcd`]: age observations, the no-change posterior, stopping, Bayes risk, moving-average baseline.
//! - [`simulator`]: full runs and the Monte Carlo harness.
//! - [`scenario`] and [`export`]: configuration and columnar output.

pub mod coding;
pub mod error;
pub mod export;
pub mod linalg;
pub mod network;
pub mod process;
pub mod qcd;
pub mod scenario;
pub mod simulator;

pub use error::{Error, Result};
pub use scenario::{parse_scenario, parse_scenario_str, Scenario};
pub use simulator::{calibrate, run_batch, run_monte_carlo, run_once, simulate, summarize, RunTrace, SummaryStats, TraceLevel};
