//! Core types for template-plus-residual Gaussian avatars: the Gaussian
//! primitive and model, cameras, images, the differentiable renderer,
//! image metrics and losses, and Adam.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision for callers that do not care.

pub mod camera;
pub mod error;
pub mod gaussian;
pub mod image;
pub mod io;
pub mod linalg;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod render;
pub mod residual;
pub mod scalar;
pub mod sh;

pub use camera::Camera;
pub use error::{Error, Result};
pub use gaussian::{assemble_covariance, flatten_params, unflatten_params, Gaussian, GaussianModel, PARAMS_PER_GAUSSIAN};
pub use image::Image;
pub use render::{project_gaussian, render, render_backward, render_oracle, ProjectedGaussian, RenderConfig, RenderGradients};
pub use residual::{apply_residuals, ResidualSet};
pub use scalar::Scalar;

pub type Gaussian32 = Gaussian<f32>;
pub type Gaussian64 = Gaussian<f64>;
pub type GaussianModel32 = GaussianModel<f32>;
pub type GaussianModel64 = GaussianModel<f64>;
pub type ResidualSet32 = ResidualSet<f32>;
pub type ResidualSet64 = ResidualSet<f64>;
pub type Camera32 = Camera<f32>;
pub type Camera64 = Camera<f64>;
pub type Image32 = Image<f32>;
pub type Image64 = Image<f64>;
