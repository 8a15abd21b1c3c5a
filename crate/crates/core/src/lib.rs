//! Coagent policy-gradient networks on tabular MDPs.

pub mod chain;
pub mod comdp;
pub mod error;
pub mod experiment;
pub mod fixtures;
pub mod gradients;
pub mod mdp;
pub mod network;
pub mod option_critic;
pub mod reduction;
pub mod report;
pub mod rng;
pub mod sync;
pub mod training;

pub use error::{Error, Result};
