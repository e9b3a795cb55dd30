//! Spatiotemporal bed-net allocation: a Bayesian autoregressive disease model
//! on a zone graph, an interpretable utility-based allocation policy class,
//! and Bayesian-optimization policy search over simulated rollouts.

pub mod dynamics;
pub mod error;
pub mod graph;
pub mod inference;
pub mod io;
pub mod policy;
pub mod qp;
pub mod rollout;
pub mod search;
pub mod sparse;
pub mod study;
pub mod stats;

pub use error::{Error, Result};
