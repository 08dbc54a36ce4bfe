//! Multi-view morphable face fitting.
//!
//! A single face shape (identity and expression coefficients of a linear
//! morphable model) and one weak-perspective camera per view are recovered
//! from a set of images by analysis-by-synthesis: the textured shape is
//! re-projected from each view into the others and the fitter minimizes
//! landmark, photometric and optical-flow alignment losses.
//!
//! Module map:
//!
//! * [`model`]: morphable model, shape assembly, synthetic basis, model file
//! * [`camera`]: Euler rotations and weak-perspective projection
//! * [`render`]: rasterization, texture sampling, cross-view projection, masks
//! * [`flow`]: pyramidal dense optical flow
//! * [`losses`]: loss terms and their gradients
//! * [`fit`]: landmark warm start and multi-view optimization
//! * [`eval`]: rigid alignment and point-to-plane error
//! * [`scene`]: synthetic scenes and the scene file
//! * [`commands`]: the `synth`/`fit`/`render`/`eval` command bodies

// `!(x > 0.0)` style checks also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod camera;
pub mod commands;
pub mod error;
pub mod eval;
pub mod fit;
pub mod flow;
pub mod imaging;
pub mod losses;
pub mod model;
pub mod obj;
pub mod render;
pub mod scene;

pub use camera::CameraPose;
pub use error::{Error, Result};
pub use imaging::{GrayImage, RgbImage};
pub use model::{assemble_shape, Mesh, MorphableModel, ShapeParams};
