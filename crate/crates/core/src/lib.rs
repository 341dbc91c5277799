pub mod autodiff;
pub mod config;
pub mod covsteer;
pub mod distributions;
pub mod error;
pub mod experiment;
pub mod figures;
pub mod flow;
pub mod metrics;
pub mod policy;
pub mod rng;
pub mod scalar;
pub mod sdpa;
pub mod systems;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
