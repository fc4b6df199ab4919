//! Class-disentangled VAE with pair-based dimension conditioning, contrastive
//! explanations via interpolation graphs, and the evaluation stack used to
//! score them.

pub mod baselines;
pub mod batch;
pub mod conditioning;
pub mod dvae;
pub mod error;
pub mod explain;
pub mod harness;
pub mod image;
pub mod metrics;
pub mod mnist;
pub mod nn;
pub mod seed;
pub mod synthgen;

pub use error::{Error, Result};
