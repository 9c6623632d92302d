//! Depth-aware convolution and average pooling for RGB-D segmentation.
//!
//! The depth-aware operators weight every window member by how close its
//! depth is to the window center's depth, so information propagates along
//! surfaces instead of across depth discontinuities. They add no parameters:
//! a depth-aware layer has exactly the weights of its standard counterpart.

pub mod autograd;
pub mod data;
pub mod error;
pub mod labels;
pub mod metrics;
pub mod model;
pub mod nnops;
pub mod rftrace;
pub mod similarity;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use labels::{LabelMap, IGNORE_LABEL};
pub use similarity::{similarity, DepthMap, SimilaritySpec};
pub use tensor::{Rng, Tensor};
