//! Primitive operations recorded on the [`Tape`](crate::tape::Tape).

mod conv;
mod elementwise;
mod linalg;
mod norm;
mod shape;

pub use norm::LAYER_NORM_EPS;
