//! Forward splatting of Gaussian models and its analytic backward pass.
//!
//! Pipeline per frame:
//!
//! 1. [`project_gaussian`]: camera transform, first-order (EWA) projection
//!    of the covariance, low-pass regularization, SH color for the view
//!    direction, near-plane and frustum culling.
//! 2. Global front-to-back sort by camera-space depth of the centers,
//!    ties broken by Gaussian index.
//! 3. Per pixel, front-to-back compositing
//!    `C = Σ c_d α_d Π_{j<d}(1-α_j) + bg Π_d(1-α_d)`, then clamp to `[0, 1]`.
//!
//! [`render`] runs step 3 over 16×16 tiles in parallel; [`render_oracle`]
//! is the naive per-pixel loop used as the test oracle.

mod oracle;
mod project;
mod raster;

pub use oracle::render_oracle;
pub use project::{project_gaussian, project_gaussian_with, ProjectedGaussian};
pub use raster::{pixel_weights, render_backward_with, render_with, PixelWeights};

use crate::camera::Camera;
use crate::error::Result;
use crate::gaussian::{GaussianModel, PARAMS_PER_GAUSSIAN};
use crate::image::Image;
use crate::Scalar;

/// Rasterizer constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderConfig {
    /// Added to the diagonal of every projected covariance (pixels²).
    pub low_pass: f64,
    /// Per-Gaussian alpha is clipped to at most this value.
    pub alpha_max: f64,
    /// Contributions with alpha below this are skipped.
    pub alpha_min: f64,
    /// Pixels farther than this many standard deviations (Mahalanobis) are skipped.
    pub sigma_cutoff: f64,
    /// Gaussians with camera-space depth at or below this are culled.
    pub near: f64,
    /// Edge length of the square tiles used by the parallel path.
    pub tile_size: u32,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            low_pass: 0.3,
            alpha_max: 0.999,
            alpha_min: 1.0 / 255.0,
            sigma_cutoff: 3.0,
            near: 0.01,
            tile_size: 16,
        }
    }
}

/// Gradients of a scalar loss with respect to every model parameter, in
/// the flat 59-per-Gaussian layout of [`crate::gaussian::flatten_params`].
#[derive(Debug, Clone, PartialEq)]
pub struct RenderGradients<T> {
    pub grads: Vec<T>,
}

impl<T: Scalar> RenderGradients<T> {
    pub fn gaussian(&self, k: usize) -> &[T] {
        &self.grads[k * PARAMS_PER_GAUSSIAN..(k + 1) * PARAMS_PER_GAUSSIAN]
    }
}

pub fn render<T: Scalar>(model: &GaussianModel<T>, cam: &Camera<T>, background: [T; 3]) -> Image<T> {
    render_with(model.gaussians(), cam, background, &RenderConfig::default())
}

/// Backward pass of [`render`] for an upstream gradient `∂L/∂image`
/// in the image's interleaved layout.
pub fn render_backward<T: Scalar>(
    model: &GaussianModel<T>,
    cam: &Camera<T>,
    background: [T; 3],
    grad_image: &[T],
) -> Result<RenderGradients<T>> {
    let grads = render_backward_with(model.gaussians(), cam, background, grad_image, &RenderConfig::default())?;
    Ok(RenderGradients { grads })
}

/// Scalar-typed copies of the config thresholds used in the pixel loops.
#[derive(Clone, Copy)]
pub(crate) struct Thresholds<T> {
    pub alpha_max: T,
    pub alpha_min: T,
    pub cutoff_sq: T,
}

impl<T: Scalar> Thresholds<T> {
    pub fn new(cfg: &RenderConfig) -> Self {
        Thresholds {
            alpha_max: T::lit(cfg.alpha_max),
            alpha_min: T::lit(cfg.alpha_min),
            cutoff_sq: T::lit(cfg.sigma_cutoff * cfg.sigma_cutoff),
        }
    }
}

/// One Gaussian's contribution at one pixel.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Contribution<T> {
    pub alpha: T,
    /// `exp(-½ δᵀ Σ⁻¹ δ)`
    pub falloff: T,
    pub dx: T,
    pub dy: T,
    pub clipped: bool,
}

#[inline]
pub(crate) fn contribution<T: Scalar>(p: &ProjectedGaussian<T>, px: T, py: T, th: &Thresholds<T>) -> Option<Contribution<T>> {
    let dx = px - p.mean2d[0];
    let dy = py - p.mean2d[1];
    let [a, b, c] = p.conic;
    let maha = a * dx * dx + T::lit(2.0) * b * dx * dy + c * dy * dy;
    if !(maha <= th.cutoff_sq) {
        return None;
    }
    let falloff = (T::lit(-0.5) * maha).exp();
    let raw = p.opacity * falloff;
    if raw < th.alpha_min {
        return None;
    }
    let clipped = raw > th.alpha_max;
    Some(Contribution {
        alpha: if clipped { th.alpha_max } else { raw },
        falloff,
        dx,
        dy,
        clipped,
    })
}
