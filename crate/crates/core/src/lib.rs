//! Deep momentum networks: data ingestion, features, classical and neural
//! trading signals, training and backtesting.

pub mod attribution;
pub mod backtest;
pub mod checkpoint;
pub mod classical;
pub mod error;
pub mod exec;
pub mod features;
pub mod market_data;
pub mod matrix;
pub mod metrics;
pub mod models;
pub mod pipeline;
pub mod report;
pub mod stats;
pub mod synthetic;
pub mod tensor_ad;
pub mod training;

pub use error::{Error, Result};
pub use exec::Execution;
