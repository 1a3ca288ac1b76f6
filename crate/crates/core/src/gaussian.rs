//! Gaussian primitives and models.
//!
//! Flat parameter layout, per Gaussian, 59 scalars:
//!
//! | offset | len | field                          |
//! |--------|-----|--------------------------------|
//! | 0      | 3   | position μ                     |
//! | 3      | 3   | scale s                        |
//! | 6      | 4   | rotation q `(w, x, y, z)`      |
//! | 10     | 1   | opacity α                      |
//! | 11     | 48  | SH coefficients, channel-major |
//!
//! This order is shared by [`flatten_params`], renderer gradients and
//! residual sets, and is part of the on-disk formats.

use std::collections::BTreeMap;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::linalg::{matmul3, quat_norm, quat_to_rotation, transpose3, Mat3, Quat, Vec3};
use crate::sh::{SH_COEFFS, SH_DEGREE};
use crate::Scalar;

pub const PARAMS_PER_GAUSSIAN: usize = 59;
pub const POSITION: Range<usize> = 0..3;
pub const SCALE: Range<usize> = 3..6;
pub const ROTATION: Range<usize> = 6..10;
pub const OPACITY: usize = 10;
pub const SH: Range<usize> = 11..59;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian<T> {
    pub position: Vec3<T>,
    pub scale: Vec3<T>,
    pub rotation: Quat<T>,
    pub opacity: T,
    pub sh: [T; SH_COEFFS],
}

impl<T: Scalar> Gaussian<T> {
    /// Gaussian with a flat color `rgb` (band 0 only).
    pub fn with_color(position: Vec3<T>, scale: Vec3<T>, rotation: Quat<T>, opacity: T, rgb: Vec3<T>) -> Self {
        let mut sh = [T::zero(); SH_COEFFS];
        for ch in 0..3 {
            sh[ch * 16] = crate::sh::dc_for_color(rgb[ch]);
        }
        Gaussian {
            position,
            scale,
            rotation,
            opacity,
            sh,
        }
    }

    /// Checks the primitive invariants: finite values, `‖q‖ = 1`, `s > 0`,
    /// `0 < α < 1`.
    pub fn validate(&self) -> Result<()> {
        let mut flat = [T::zero(); PARAMS_PER_GAUSSIAN];
        self.write_params(&mut flat);
        if let Some(i) = flat.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "gaussian parameters",
                index: i,
            });
        }
        let n = quat_norm(self.rotation);
        if (n - T::one()).abs().as_f64() > T::UNIT_TOL {
            return Err(Error::validation(format!("quaternion norm {} is not 1", n)));
        }
        if self.scale.iter().any(|&s| s <= T::zero()) {
            return Err(Error::validation("scales must be strictly positive"));
        }
        if !(self.opacity > T::zero() && self.opacity < T::one()) {
            return Err(Error::validation(format!("opacity {} outside (0, 1)", self.opacity)));
        }
        Ok(())
    }

    pub fn write_params(&self, out: &mut [T]) {
        out[POSITION].copy_from_slice(&self.position);
        out[SCALE].copy_from_slice(&self.scale);
        out[ROTATION].copy_from_slice(&self.rotation);
        out[OPACITY] = self.opacity;
        out[SH].copy_from_slice(&self.sh);
    }

    pub fn read_params(p: &[T]) -> Self {
        let mut sh = [T::zero(); SH_COEFFS];
        sh.copy_from_slice(&p[SH]);
        Gaussian {
            position: [p[0], p[1], p[2]],
            scale: [p[3], p[4], p[5]],
            rotation: [p[6], p[7], p[8], p[9]],
            opacity: p[OPACITY],
            sh,
        }
    }
}

/// `Σ = R S Sᵀ Rᵀ` for a unit quaternion and positive scales.
pub fn assemble_covariance<T: Scalar>(q: Quat<T>, s: Vec3<T>) -> Result<Mat3<T>> {
    let n = quat_norm(q);
    if !n.is_finite() || (n - T::one()).abs().as_f64() > T::UNIT_TOL {
        return Err(Error::validation(format!("assemble_covariance: quaternion norm {n} is not 1")));
    }
    if s.iter().any(|&v| !(v > T::zero()) || !v.is_finite()) {
        return Err(Error::validation("assemble_covariance: scales must be positive"));
    }
    Ok(covariance_unchecked(&quat_to_rotation(q), s))
}

pub(crate) fn covariance_unchecked<T: Scalar>(r: &Mat3<T>, s: Vec3<T>) -> Mat3<T> {
    let mut m = *r;
    for row in m.iter_mut() {
        for j in 0..3 {
            row[j] *= s[j];
        }
    }
    matmul3(&m, &transpose3(&m))
}

/// An ordered set of Gaussians. The count `K` is fixed at construction:
/// the type offers no way to add or remove primitives, so index `k` keeps
/// its identity through fitting, averaging and residual application.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianModel<T> {
    gaussians: Vec<Gaussian<T>>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl<T: Scalar> GaussianModel<T> {
    pub fn new(gaussians: Vec<Gaussian<T>>) -> Result<Self> {
        for (k, g) in gaussians.iter().enumerate() {
            g.validate()
                .map_err(|e| Error::validation(format!("gaussian {k}: {e}")))?;
        }
        Ok(GaussianModel {
            gaussians,
            metadata: BTreeMap::new(),
        })
    }

    pub fn empty() -> Self {
        GaussianModel {
            gaussians: Vec::new(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_metadata(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.metadata.insert(key.to_string(), value.into());
        self
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn sh_degree(&self) -> usize {
        SH_DEGREE
    }

    pub fn gaussians(&self) -> &[Gaussian<T>] {
        &self.gaussians
    }

    /// Mutable access to the primitives; the count cannot change. Callers
    /// that edit values are responsible for re-running [`Self::validate`].
    pub fn gaussians_mut(&mut self) -> &mut [Gaussian<T>] {
        &mut self.gaussians
    }

    pub fn validate(&self) -> Result<()> {
        for (k, g) in self.gaussians.iter().enumerate() {
            g.validate()
                .map_err(|e| Error::validation(format!("gaussian {k}: {e}")))?;
        }
        Ok(())
    }

    /// Axis-aligned bounds of the Gaussian centers, `None` when empty.
    pub fn position_bounds(&self) -> Option<(Vec3<T>, Vec3<T>)> {
        let first = self.gaussians.first()?.position;
        Some(self.gaussians.iter().fold((first, first), |(lo, hi), g| {
            let mut lo = lo;
            let mut hi = hi;
            for i in 0..3 {
                lo[i] = lo[i].min(g.position[i]);
                hi[i] = hi[i].max(g.position[i]);
            }
            (lo, hi)
        }))
    }

    pub fn cast<U: Scalar>(&self) -> GaussianModel<U> {
        let flat: Vec<U> = crate::scalar::convert_slice(&flatten_params(self));
        let mut m = unflatten_unchecked(&flat);
        m.metadata = self.metadata.clone();
        m
    }
}

/// Concatenates all Gaussians in the documented 59-per-Gaussian layout.
pub fn flatten_params<T: Scalar>(model: &GaussianModel<T>) -> Vec<T> {
    let mut out = vec![T::zero(); model.len() * PARAMS_PER_GAUSSIAN];
    for (g, chunk) in model.gaussians.iter().zip(out.chunks_exact_mut(PARAMS_PER_GAUSSIAN)) {
        g.write_params(chunk);
    }
    out
}

/// Inverse of [`flatten_params`]; validates length and invariants.
pub fn unflatten_params<T: Scalar>(params: &[T], k: usize) -> Result<GaussianModel<T>> {
    if params.len() != k * PARAMS_PER_GAUSSIAN {
        return Err(Error::Dimension {
            what: "flat gaussian parameters",
            expected: k * PARAMS_PER_GAUSSIAN,
            got: params.len(),
        });
    }
    GaussianModel::new(params.chunks_exact(PARAMS_PER_GAUSSIAN).map(Gaussian::read_params).collect())
}

/// Builds a model without checking invariants. Used by gradient checks
/// that perturb raw parameters (e.g. non-unit quaternions) and by the
/// renderer's internal paths, which normalize quaternions themselves.
pub fn unflatten_unchecked<T: Scalar>(params: &[T]) -> GaussianModel<T> {
    assert_eq!(params.len() % PARAMS_PER_GAUSSIAN, 0, "flat parameter length must be a multiple of 59");
    GaussianModel {
        gaussians: params.chunks_exact(PARAMS_PER_GAUSSIAN).map(Gaussian::read_params).collect(),
        metadata: BTreeMap::new(),
    }
}
