//! Diffusion adaptation over networks.
//!
//! Distributed estimators (diffusion LMS, RLS and Kalman filtering, consensus
//! baselines) together with the closed-form mean-square performance theory
//! used to check them.

pub mod analysis;
pub mod cli;
pub mod combiners;
pub mod datamodel;
pub mod diffusion;
pub mod error;
pub mod graph;
pub mod kalman;
pub mod linalg;
pub mod montecarlo;
pub mod rls;
pub mod stochmat;

pub use error::{Error, Result};
