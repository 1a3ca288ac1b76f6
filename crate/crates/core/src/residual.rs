//! Per-Gaussian parameter offsets and their application to a template.
//!
//! Offsets use the same 59-scalar layout as [`crate::gaussian`], but each
//! slot is in the unconstrained space of its field:
//!
//! - `μ = μᵀ + Δμ`
//! - `s = sᵀ · exp(Δs)` (elementwise, log-scale offset)
//! - `q = normalize(qᵀ + Δq)`
//! - `α = sigmoid(logit(αᵀ) + Δα)`
//! - `c = cᵀ + Δc`

use crate::error::{Error, Result};
use crate::gaussian::{Gaussian, GaussianModel, OPACITY, PARAMS_PER_GAUSSIAN, POSITION, ROTATION, SCALE, SH};
use crate::linalg::{quat_normalize, quat_normalize_backward};
use crate::Scalar;

/// Template opacities are clamped into `[OPACITY_CLAMP, 1 - OPACITY_CLAMP]`
/// before the logit.
pub const OPACITY_CLAMP: f64 = 1e-4;
/// Output opacities never get closer than this to 0 or 1, so the result
/// stays strictly inside `(0, 1)` in floating point.
pub const OPACITY_FLOOR: f64 = 1e-6;
/// Output scales are clamped into `[MIN_SCALE, MAX_SCALE]`.
pub const MIN_SCALE: f64 = 1e-10;
pub const MAX_SCALE: f64 = 1e10;
/// `qᵀ + Δq` shorter than this falls back to `qᵀ`.
pub const MIN_QUAT_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSet<T> {
    data: Vec<T>,
}

impl<T: Scalar> ResidualSet<T> {
    pub fn zeros(k: usize) -> Self {
        ResidualSet {
            data: vec![T::zero(); k * PARAMS_PER_GAUSSIAN],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Result<Self> {
        if !data.len().is_multiple_of(PARAMS_PER_GAUSSIAN) {
            return Err(Error::validation(format!(
                "residual length {} is not a multiple of {PARAMS_PER_GAUSSIAN}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "residual set",
                index: i,
            });
        }
        Ok(ResidualSet { data })
    }

    pub fn len(&self) -> usize {
        self.data.len() / PARAMS_PER_GAUSSIAN
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn gaussian(&self, k: usize) -> &[T] {
        &self.data[k * PARAMS_PER_GAUSSIAN..(k + 1) * PARAMS_PER_GAUSSIAN]
    }

    /// Position offsets of all Gaussians, concatenated (`3K` values).
    pub fn positions(&self) -> Vec<T> {
        self.field(POSITION.start, 3)
    }

    /// Log-scale offsets of all Gaussians, concatenated (`3K` values).
    pub fn scales(&self) -> Vec<T> {
        self.field(SCALE.start, 3)
    }

    fn field(&self, offset: usize, n: usize) -> Vec<T> {
        self.data
            .chunks_exact(PARAMS_PER_GAUSSIAN)
            .flat_map(|c| c[offset..offset + n].iter().copied())
            .collect()
    }
}

fn logit<T: Scalar>(p: T) -> T {
    (p / (T::one() - p)).ln()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

struct Applied<T> {
    gaussian: Gaussian<T>,
    scale_clamped: [bool; 3],
    opacity_clamped: bool,
    quat_fallback: bool,
}

fn apply_one<T: Scalar>(t: &Gaussian<T>, d: &[T]) -> Applied<T> {
    let mut g = *t;
    for i in 0..3 {
        g.position[i] = t.position[i] + d[POSITION.start + i];
    }

    let mut scale_clamped = [false; 3];
    for i in 0..3 {
        let s = t.scale[i] * d[SCALE.start + i].exp();
        let (lo, hi) = (T::lit(MIN_SCALE), T::lit(MAX_SCALE));
        scale_clamped[i] = !(s >= lo && s <= hi);
        g.scale[i] = if s < lo || s.is_nan() { lo } else { s.min(hi) };
    }

    let dq = &d[ROTATION];
    let mut quat_fallback = false;
    if dq.iter().any(|v| *v != T::zero()) {
        let raw = [
            t.rotation[0] + dq[0],
            t.rotation[1] + dq[1],
            t.rotation[2] + dq[2],
            t.rotation[3] + dq[3],
        ];
        match quat_normalize(raw) {
            Some(q) if crate::linalg::quat_norm(raw) >= T::lit(MIN_QUAT_NORM) => g.rotation = q,
            _ => quat_fallback = true,
        }
    }

    let mut opacity_clamped = false;
    let da = d[OPACITY];
    if da != T::zero() {
        let lo = T::lit(OPACITY_CLAMP);
        let a_t = t.opacity.max(lo).min(T::one() - lo);
        let a = sigmoid(logit(a_t) + da);
        let floor = T::lit(OPACITY_FLOOR);
        opacity_clamped = !(a >= floor && a <= T::one() - floor);
        g.opacity = a.max(floor).min(T::one() - floor);
    }

    for i in 0..48 {
        g.sh[i] = t.sh[i] + d[SH.start + i];
    }

    Applied {
        gaussian: g,
        scale_clamped,
        opacity_clamped,
        quat_fallback,
    }
}

fn check_inputs<T: Scalar>(template: &GaussianModel<T>, delta: &ResidualSet<T>) -> Result<()> {
    if template.len() != delta.len() {
        return Err(Error::Dimension {
            what: "residual set vs template",
            expected: template.len(),
            got: delta.len(),
        });
    }
    for (k, g) in template.gaussians().iter().enumerate() {
        if !(g.opacity > T::zero() && g.opacity < T::one()) {
            return Err(Error::validation(format!(
                "template gaussian {k} has opacity {} where logit is undefined",
                g.opacity
            )));
        }
    }
    Ok(())
}

/// Applies offsets to a template. A zero offset leaves the corresponding
/// template field untouched, so `apply_residuals(T, 0) == T` exactly.
pub fn apply_residuals<T: Scalar>(template: &GaussianModel<T>, delta: &ResidualSet<T>) -> Result<GaussianModel<T>> {
    check_inputs(template, delta)?;
    let gaussians = template
        .gaussians()
        .iter()
        .zip(delta.as_slice().chunks_exact(PARAMS_PER_GAUSSIAN))
        .map(|(t, d)| apply_one(t, d).gaussian)
        .collect();
    let mut out = GaussianModel::new(gaussians)?;
    out.metadata = template.metadata.clone();
    Ok(out)
}

/// Pulls a gradient on the output model's flat parameters back onto the
/// offsets. Clamped outputs pass no gradient.
pub fn apply_residuals_backward<T: Scalar>(
    template: &GaussianModel<T>,
    delta: &ResidualSet<T>,
    grad_model: &[T],
) -> Result<Vec<T>> {
    check_inputs(template, delta)?;
    if grad_model.len() != delta.as_slice().len() {
        return Err(Error::Dimension {
            what: "model gradient",
            expected: delta.as_slice().len(),
            got: grad_model.len(),
        });
    }
    let mut out = vec![T::zero(); grad_model.len()];
    for ((t, d), (g, o)) in template.gaussians().iter().zip(delta.as_slice().chunks_exact(PARAMS_PER_GAUSSIAN)).zip(
        grad_model
            .chunks_exact(PARAMS_PER_GAUSSIAN)
            .zip(out.chunks_exact_mut(PARAMS_PER_GAUSSIAN)),
    ) {
        let a = apply_one(t, d);
        for i in 0..3 {
            o[POSITION.start + i] = g[POSITION.start + i];
            if !a.scale_clamped[i] {
                o[SCALE.start + i] = g[SCALE.start + i] * a.gaussian.scale[i];
            }
        }
        if !a.quat_fallback {
            let raw = [
                t.rotation[0] + d[ROTATION.start],
                t.rotation[1] + d[ROTATION.start + 1],
                t.rotation[2] + d[ROTATION.start + 2],
                t.rotation[3] + d[ROTATION.start + 3],
            ];
            let gq = [g[6], g[7], g[8], g[9]];
            let back = quat_normalize_backward(raw, gq);
            o[ROTATION].copy_from_slice(&back);
        }
        if !a.opacity_clamped {
            let lo = T::lit(OPACITY_CLAMP);
            let a_t = t.opacity.max(lo).min(T::one() - lo);
            let s = sigmoid(logit(a_t) + d[OPACITY]);
            o[OPACITY] = g[OPACITY] * s * (T::one() - s);
        }
        o[SH].copy_from_slice(&g[SH]);
    }
    Ok(out)
}
