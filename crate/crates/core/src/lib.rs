//! Layer-wise hybrid linear/softmax attention backbone.

pub mod attention;
pub mod backbone;
pub mod error;
pub mod grid;
pub mod harness;
pub mod numerics;
pub mod range;
pub mod softmax_layer;
pub mod wkv;

pub use error::{Error, Result};
pub use grid::TokenGrid;
pub use numerics::Tensor;
