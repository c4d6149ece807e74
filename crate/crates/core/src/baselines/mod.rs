//! Comparison methods: voxelwise GLM with BH correction and an exchangeable
//! voxelwise Bayesian multilevel model.

pub mod bml;
pub mod glm;

pub use bml::{bml_fit, BmlOptions, BmlResult};
pub use glm::{bh_adjust, glm_fit, GlmCovariate, GlmResult};
