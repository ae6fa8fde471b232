pub mod autograd;
pub mod boxes;
pub mod checkpoint;
pub mod config;
pub mod detector;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod kitti;
pub mod layers;
pub mod linalg;
pub mod loss;
pub mod optim;
pub mod params;
pub mod sdr;
pub mod synthetic;
pub mod tensor;
pub mod train;
pub mod voxelnet;

pub use autograd::{Graph, Gradients, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
