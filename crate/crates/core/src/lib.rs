//! Low-rank efficient spatial-spectral attention (LESS) for hyperspectral
//! token grids, with a dense spatial-spectral attention oracle, masked
//! autoencoder pretraining and FLOP/latency scaling benchmarks.

pub mod attention;
pub mod bench;
pub mod cli;
pub mod embed;
pub mod error;
pub mod io;
pub mod mae;
pub mod rope;
pub mod spectral;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{FlopCounter, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
