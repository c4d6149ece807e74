//! Bayesian image-on-scalar regression with low-rank Gaussian-process priors.

pub mod baselines;
pub mod diagnostics;
pub mod error;
pub mod gibbs;
pub mod io;
pub mod kernel;
pub mod model;
pub mod rng;
pub mod simstudy;
pub mod summaries;
pub mod vi;

pub use error::{Result, SimbaError};
pub use gibbs::{ChainOutput, GibbsConfig};
pub use kernel::{BasisSystem, InducingStrategy, KernelConfig, SpatialDomain};
pub use model::{Dataset, ParameterState, PriorConfig, TransformedDataset};
