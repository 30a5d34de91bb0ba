//! Proactive femto-caching.
//!
//! * [`analytics`] closed-form successful offloading probability and gradients
//! * [`solver`] static joint caching/bandwidth optimization for a known popularity
//! * [`neural`] small fully-connected networks with manual backpropagation
//! * [`proactive`] primal-dual unsupervised learning of history → policy maps
//! * [`baselines`] supervised end-to-end learning and predict-then-optimize
//! * [`data`] popularity estimation, record construction and synthetic traces
//! * [`netsim`] Monte-Carlo simulation of the Poisson network model
//! * [`experiment`] per-period evaluation of strategies against the genie bound

pub mod analytics;
pub mod baselines;
pub mod data;
pub mod error;
pub mod experiment;
pub mod netsim;
pub mod neural;
pub mod proactive;
pub mod solver;

pub use analytics::{NetworkConfig, Policy, PopularityVector, SopTerms};
pub use error::{Error, Result};
