//! Physics-guided intrinsic image decomposition.
//!
//! Splits an RGB image into a three-channel reflectance and a single-channel
//! shading map with a small fully convolutional network trained without
//! ground truth. Training is driven by feature maps derived from a diffuse
//! image model (log-ratio gradients, a reflectance approximation map and
//! masked shading gradients), all computed in [`physmaps`]. The network, its
//! reverse-mode autodiff engine and the optimizer live in this crate; a
//! Phong renderer in [`phong`] provides scenes with known decompositions.

pub mod autograd;
pub mod error;
pub mod filters;
pub mod image;
pub mod losses;
pub mod mapfile;
pub mod metrics;
pub mod net;
pub mod phong;
pub mod physmaps;
pub mod trainer;

pub use error::{Error, Result};
pub use image::ImageTensor;
