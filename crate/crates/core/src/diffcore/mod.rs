//! Differentiable primitives the networks are built from.
//!
//! Reverse passes are written by hand for a fixed set of operations (see
//! [`gradcheck::primitive_set`]); every one of them is verified against central
//! finite differences in double precision.

pub mod act;
pub mod checkpoint;
pub mod conv;
pub mod gradcheck;
pub mod param;
pub mod sampler;
pub mod ssim;

pub use checkpoint::Checkpoint;
pub use conv::{Conv2d, ConvGeom, ConvTranspose2d};
pub use gradcheck::{check_primitive, grad_check, primitive_set, Primitive};
pub use param::{Param, Parameterized};
