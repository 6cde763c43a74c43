//! Epigraph-form multi-agent safe reinforcement learning.
//!
//! Training is centralized: a cost critic sees the whole team while the
//! policy and the constraint critic read only each agent's local graph, all
//! conditioned on a cost budget `z`. At execution time every agent picks its
//! own budget by solving a scalar root-finding problem on its constraint
//! critic, optionally agreeing on the maximum with connected neighbors.

pub mod config;
pub mod env;
pub mod error;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod rollout;
pub mod run;
pub mod solver;
pub mod suite;
pub mod train;

pub use error::Error;
