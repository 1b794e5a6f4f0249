pub mod adapter;
pub mod autograd;
pub mod blocks;
pub mod cost;
pub mod error;
pub mod graph;
pub mod init;
pub mod io;
pub mod model;
pub mod nn;
pub mod par;
pub mod params;
pub mod rearrange;
pub mod selftest;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, Float, PatchGrid, Tensor};
