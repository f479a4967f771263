//! End-to-end projector compensation.
//!
//! A cascaded warping network (affine → thin-plate spline → convolutional
//! grid refinement) maps camera captures into the projector frame; a
//! convolutional compensation network conditioned on the warped surface image
//! predicts the projector input. Both are trained jointly against captures
//! from a deterministic projector-camera [`simulator`], and simplify after
//! training to a single sampling grid and a bias-only surface path.

pub mod baseline;
pub mod calib;
pub mod diffcore;
pub mod error;
pub mod gradsuite;
pub mod imaging;
pub mod photometric;
pub mod simulator;
pub mod tensor;
pub mod textures;
pub mod training;
pub mod warp;

pub use error::{Error, Result};
pub use imaging::{Image, Mask, Metrics, Rect, SamplingGrid};
pub use tensor::{Real, Tensor};
