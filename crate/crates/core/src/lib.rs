//! Joint RGB and feature Gaussian splatting with closed-form feature lifting,
//! a hypersphere-bottleneck autoencoder for feature compression, and
//! Gaussian token selection.
//!
//! The modules build on each other bottom-up:
//!
//! - [`geometry`]: Gaussians, cameras and EWA projection.
//! - [`raster`]: tile rasterizer, brute-force reference, responsibilities.
//! - [`lift`]: EM lifting of 2D feature maps onto Gaussians, plus a
//!   gradient-descent oracle.
//! - [`autoenc`]: MLP autoencoder with hand-written backprop and AdamW.
//! - [`sample`]: token selection strategies and the token file.
//! - [`scene`]: synthetic scenes, depth back-projection, file formats.
//! - [`eval`]: image and feature metrics.

pub mod autoenc;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod lift;
pub mod raster;
pub mod sample;
pub mod scene;

pub use error::{Error, Result};
pub use geometry::{covariance_of, project, validate_field, Camera, Gaussian, GaussianField, Intrinsics, Splat2D};
pub use raster::{render, render_brute_force, responsibilities, FeatureMap, RenderOptions, RenderOutput, ResponsibilityMap};
