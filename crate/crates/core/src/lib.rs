//! CPU dynamic Gaussian splatting.
//!
//! Spacetime Gaussian primitives, a tile-based differentiable rasterizer with
//! a hand-written backward pass, a neural velocity field, spatiotemporal
//! initialization, relocation-based density control, losses and metrics, a
//! training loop and diagnostics over synthetic multi-view scenes.

pub mod camera;
pub mod checkpoint;
pub mod cloud;
pub mod density;
pub mod diagnostics;
pub mod error;
pub mod image;
pub mod init;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod motion;
pub mod optim;
pub mod primitive;
pub mod raster;
pub mod scene;
pub mod trainer;

pub use camera::{Camera, ColorCorrection};
pub use cloud::GaussianCloud;
pub use error::{Error, Result};
pub use primitive::{OpacityMode, SpacetimeGaussian};
