//! Intensity-tunable stylization of 3D Gaussian scenes.

pub mod align;
pub mod error;
pub mod fixture;
pub mod guidance;
pub mod image;
pub mod importance;
pub mod loss;
pub mod metrics;
pub mod optim;
mod par;
pub mod ply;
pub mod render;
pub mod scene;
pub mod style;
pub mod stylizer;

pub use error::{Error, Result};
pub use image::Image;
pub use render::{RenderConfig, RenderOutput, SceneGradients};
pub use scene::{Camera, GaussianPrimitive, GaussianScene};
