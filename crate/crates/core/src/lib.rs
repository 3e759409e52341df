//! Volterra kernels, fractional calculus, simulation and density estimation
//! for mixed SDEs driven by two completely correlated fractional Brownian
//! motions with different Hurst indices.

pub mod specfun;
pub mod quad;
pub mod kernel;
pub mod fraccalc;
pub mod stats;
pub mod noise;
pub mod sde;
pub mod girsanov;
pub mod density;
