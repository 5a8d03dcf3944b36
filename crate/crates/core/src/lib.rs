//! Reinforcement learning for intraday futures trading with an expert
//! trajectory that supervises a temporal-difference learner.

pub mod backtest;
pub mod baselines;
pub mod cli;
pub mod config;
pub mod env;
pub mod error;
pub mod expert;
pub mod features;
pub mod market_data;
pub mod qnet;
pub mod training;

pub use error::{Error, Result};
