//! Three-stage progressive deraining network (coarse extraction, frequency
//! fusion, refinement) on a small reverse-mode tensor tape, with oracles and
//! finite-difference checks for every block.

pub mod ablation;
pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod hdmamba;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod ops;
pub mod params;
pub mod pipeline;
pub mod real;
pub mod ssm;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod wavelet;

pub use error::{Error, Result};
pub use graph::{Graph, Routing};
pub use params::{Init, ParamBuilder, ParamStore, ParamValues};
pub use real::Real;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
