//! Battery energy-arbitrage laboratory.
//!
//! A grid-connected battery environment with degradation-aware rewards, a
//! DQN agent whose observation can be augmented with multi-horizon price
//! forecasts, and benchmark dispatchers (persistence forecasting,
//! cross-entropy policy search, a receding-horizon genetic algorithm and an
//! exact dynamic program) tied together by an experiment runner.

pub mod battery_env;
pub mod cem;
pub mod cli;
pub mod dqn;
pub mod error;
pub mod experiment;
pub mod forecasting;
pub mod market_data;
pub mod neural;
pub mod oracle;
pub mod wrapper;

pub use error::{Error, Result};
