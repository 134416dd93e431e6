//! Weather-robust monocular 3D detection at desk scale.
//!
//! A weather codebook recalls clear-weather knowledge for any input feature,
//! a feature-space diffusion model driven by the clear/foggy residual
//! enhances the feature, and a small anchor head detects cars in 3D.

pub mod autograd;
pub mod checkpoint;
pub mod codebook;
pub mod dataset;
pub mod detector;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod feature;
pub mod fog;
pub mod gradcheck;
pub mod kitti;
pub mod nn;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use feature::FeatureMap;
pub use tensor::Tensor;
