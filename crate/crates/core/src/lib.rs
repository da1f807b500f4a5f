//! Symmetric equilibrium learning of encoder/decoder pairs over
//! exponential-family conditionals, with exact tabular oracles and Gibbs
//! chain machinery.

pub mod chain;
pub mod efcore;
pub mod equilibrium;
pub mod error;
pub mod netparam;
pub mod tabular_oracle;

pub use error::{Error, Result};
