//! Action-conditional beta-VAE agent on a controllable sprites world.
//!
//! The core is generic over the scalar type; the aliases below fix it to
//! `f32`, which is what training and serving use.

pub mod env;
pub mod error;
pub mod governance;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod persist;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = numerics::Tensor<f32>;
pub type AgentModel = model::AgentModel<f32>;
pub type LatentStats = model::LatentStats<f32>;
pub type ParamSet = numerics::ParamSet<f32>;
pub type Checkpoint = persist::Checkpoint<f32>;
