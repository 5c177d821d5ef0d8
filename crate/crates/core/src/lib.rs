pub mod ablation;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod cspn;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod infer;
pub mod layers;
pub mod linalg;
pub mod metrics;
pub mod net;
pub mod sampling;
pub mod sphere;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Parameter, Precision, Real, Tensor};
