//! Training objectives for the residual decoder and the image encoder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{mae_with_grad, ssim_with_grad, LaplacianPyramid, PerceptualMetric};
use crate::Scalar;

/// Loss weights. Serialized with these field names in training configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub perceptual: f64,
    pub l1: f64,
    pub ssim: f64,
    pub reg_position: f64,
    pub reg_scale: f64,
    pub cosine: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            perceptual: 0.0,
            l1: 0.8,
            ssim: 0.2,
            reg_position: 1e-2,
            reg_scale: 1e-2,
            cosine: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("perceptual", self.perceptual),
            ("l1", self.l1),
            ("ssim", self.ssim),
            ("reg_position", self.reg_position),
            ("reg_scale", self.reg_scale),
            ("cosine", self.cosine),
        ];
        for (name, v) in named {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::validation(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-term values before weighting.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DecoderTerms<T> {
    pub perceptual: T,
    pub l1: T,
    /// `1 - SSIM`
    pub dssim: T,
    pub reg_position: T,
    pub reg_scale: T,
}

#[derive(Debug, Clone)]
pub struct DecoderLoss<T> {
    pub value: T,
    pub terms: DecoderTerms<T>,
    pub grad_image: Vec<T>,
    pub grad_position: Vec<T>,
    pub grad_scale: Vec<T>,
}

/// Photometric terms between `target` and `pred` plus mean-square
/// penalties on the position and scale residuals. Gradients are with
/// respect to `pred` and the residual arrays. Terms with zero weight are
/// not evaluated (so SSIM's minimum size only applies when it is on).
pub fn decoder_loss<T: Scalar>(
    target: &Image<T>,
    pred: &Image<T>,
    d_position: &[T],
    d_scale: &[T],
    w: &LossWeights,
) -> Result<DecoderLoss<T>> {
    decoder_loss_with(target, pred, d_position, d_scale, w, &LaplacianPyramid::default())
}

pub fn decoder_loss_with<T: Scalar>(
    target: &Image<T>,
    pred: &Image<T>,
    d_position: &[T],
    d_scale: &[T],
    w: &LossWeights,
    perceptual: &dyn PerceptualMetric<T>,
) -> Result<DecoderLoss<T>> {
    w.validate()?;
    let mut terms = DecoderTerms::default();
    let mut grad_image = vec![T::zero(); pred.data().len()];
    let mut add = |weight: f64, g: &[T]| {
        let wt = T::lit(weight);
        for (o, &v) in grad_image.iter_mut().zip(g) {
            *o += wt * v;
        }
    };
    let (l1, g) = mae_with_grad(target, pred)?;
    terms.l1 = l1;
    add(w.l1, &g);
    if w.perceptual > 0.0 {
        let (v, g) = perceptual.distance_with_grad(target, pred)?;
        terms.perceptual = v;
        add(w.perceptual, &g);
    }
    if w.ssim > 0.0 {
        let (s, g) = ssim_with_grad(target, pred)?;
        terms.dssim = T::one() - s;
        add(-w.ssim, &g);
    }
    let (rp, grad_position) = mean_square(d_position, T::lit(w.reg_position));
    let (rs, grad_scale) = mean_square(d_scale, T::lit(w.reg_scale));
    terms.reg_position = rp;
    terms.reg_scale = rs;
    let value = T::lit(w.perceptual) * terms.perceptual
        + T::lit(w.l1) * terms.l1
        + T::lit(w.ssim) * terms.dssim
        + T::lit(w.reg_position) * rp
        + T::lit(w.reg_scale) * rs;
    Ok(DecoderLoss {
        value,
        terms,
        grad_image,
        grad_position,
        grad_scale,
    })
}

/// `(mean(v²), weight · ∂mean(v²)/∂v)`
fn mean_square<T: Scalar>(v: &[T], weight: T) -> (T, Vec<T>) {
    if v.is_empty() {
        return (T::zero(), Vec::new());
    }
    let n = T::count(v.len());
    let value = v.iter().map(|&x| x * x).sum::<T>() / n;
    let k = T::lit(2.0) * weight / n;
    (value, v.iter().map(|&x| k * x).collect())
}

#[derive(Debug, Clone)]
pub struct EncoderLoss<T> {
    pub value: T,
    pub cosine: T,
    /// With respect to the prediction `ŵ`.
    pub grad: Vec<T>,
}

/// `‖w - ŵ‖² + λ_cos (1 - cos(w, ŵ))`, differentiated with respect to `ŵ`.
pub fn encoder_loss<T: Scalar>(w: &[T], w_hat: &[T], lambda_cos: f64) -> Result<EncoderLoss<T>> {
    if w.len() != w_hat.len() {
        return Err(Error::Dimension {
            what: "latent code",
            expected: w.len(),
            got: w_hat.len(),
        });
    }
    if !(lambda_cos >= 0.0) {
        return Err(Error::validation("lambda_cos must be >= 0"));
    }
    let two = T::lit(2.0);
    let mut value = T::zero();
    let mut grad: Vec<T> = Vec::with_capacity(w.len());
    for (&a, &b) in w.iter().zip(w_hat) {
        value += (a - b) * (a - b);
        grad.push(two * (b - a));
    }
    let nw = w.iter().map(|&v| v * v).sum::<T>().sqrt();
    let nh = w_hat.iter().map(|&v| v * v).sum::<T>().sqrt();
    let mut cosine = T::zero();
    if lambda_cos > 0.0 {
        if nh.is_zero() || nw.is_zero() {
            return Err(Error::validation("cosine term undefined for a zero-norm code"));
        }
        let dot: T = w.iter().zip(w_hat).map(|(&a, &b)| a * b).sum();
        cosine = dot / (nw * nh);
        let lam = T::lit(lambda_cos);
        value += lam * (T::one() - cosine);
        for ((g, &a), &b) in grad.iter_mut().zip(w).zip(w_hat) {
            let dcos = a / (nw * nh) - cosine * b / (nh * nh);
            *g -= lam * dcos;
        }
    }
    Ok(EncoderLoss { value, cosine, grad })
}
