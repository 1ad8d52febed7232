//! Depth-domain refinement of stereo reconstruction at desk scale.
//!
//! The pipeline: render a synthetic rectified stereo pair with analytic
//! ground truth ([`scenegen`]), estimate disparity by census block matching
//! ([`stereo`]), triangulate depth ([`geometry`]), refine it with a small
//! U-Net whose output multiplies the input depth ([`refine`], trained by
//! [`trainer`]), and measure how the depth error grows with distance
//! ([`eval`]). File formats live in [`io`].

pub mod error;
pub mod eval;
pub mod geometry;
pub mod imaging;
pub mod io;
pub mod refine;
pub mod scenegen;
pub mod stereo;
pub mod trainer;

pub use error::{Error, Result};
pub use geometry::{CameraRig, ScalarField};
pub use imaging::{Image, WarpedImage};
