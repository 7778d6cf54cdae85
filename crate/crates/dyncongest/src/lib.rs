//! Congestion games on networks whose stochastic paths are learned from
//! crowd reports: belief dynamics, selfish and planned routing policies,
//! Monte-Carlo evaluation, and price-of-anarchy analysis.

pub mod analysis;
pub mod config;
pub mod belief;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod lineargraph;
pub mod model;
pub mod policies;
pub mod scalar;
pub mod sim;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Real = f64;
pub type Config = model::NetworkConfig<f64>;
pub type State = model::NetworkState<f64>;
pub type Alloc = model::Allocation<f64>;
pub type PathState = model::PathBeliefState<f64>;
