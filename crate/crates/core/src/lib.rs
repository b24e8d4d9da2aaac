//! Semantic scene completion from single LiDAR sweeps: voxel grids, a small
//! reverse-mode autodiff engine, sparse convolution, the two-branch network
//! with BEV fusion, losses, metrics and dataset I/O.

pub mod error;
pub mod gradcheck;
pub mod grid;
pub mod io;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod real;
pub mod sparse;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
