//! Real spherical harmonics up to degree 3.
//!
//! Basis order and signs follow the convention used by common Gaussian
//! splatting rasterizers. Coefficients are stored channel-major: entry
//! `c * 16 + b` is basis function `b` of color channel `c` (RGB).

use crate::error::{Error, Result};
use crate::linalg::{normalize3, Vec3};
use crate::Scalar;

pub const SH_DEGREE: usize = 3;
pub const SH_BASIS: usize = (SH_DEGREE + 1) * (SH_DEGREE + 1);
pub const SH_COEFFS: usize = 3 * SH_BASIS;

/// `Y₀₀ = 1 / (2√π)`
pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
pub const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Evaluates the 16 basis functions at a unit direction.
pub fn basis<T: Scalar>(d: Vec3<T>) -> [T; SH_BASIS] {
    let [x, y, z] = d;
    let c1 = T::lit(SH_C1);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let two = T::lit(2.0);
    let three = T::lit(3.0);
    let four = T::lit(4.0);
    let k2 = |i: usize| T::lit(SH_C2[i]);
    let k3 = |i: usize| T::lit(SH_C3[i]);
    [
        T::lit(SH_C0),
        -c1 * y,
        c1 * z,
        -c1 * x,
        k2(0) * x * y,
        k2(1) * y * z,
        k2(2) * (two * zz - xx - yy),
        k2(3) * x * z,
        k2(4) * (xx - yy),
        k3(0) * y * (three * xx - yy),
        k3(1) * x * y * z,
        k3(2) * y * (four * zz - xx - yy),
        k3(3) * z * (two * zz - three * xx - three * yy),
        k3(4) * x * (four * zz - xx - yy),
        k3(5) * z * (xx - yy),
        k3(6) * x * (xx - three * yy),
    ]
}

/// Partial derivatives of each basis polynomial with respect to `(x, y, z)`.
pub fn basis_gradient<T: Scalar>(d: Vec3<T>) -> [Vec3<T>; SH_BASIS] {
    let [x, y, z] = d;
    let c1 = T::lit(SH_C1);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let zero = T::zero();
    let two = T::lit(2.0);
    let three = T::lit(3.0);
    let four = T::lit(4.0);
    let six = T::lit(6.0);
    let eight = T::lit(8.0);
    let k2 = |i: usize| T::lit(SH_C2[i]);
    let k3 = |i: usize| T::lit(SH_C3[i]);
    let s = |k: T, v: Vec3<T>| [k * v[0], k * v[1], k * v[2]];
    [
        [zero; 3],
        [zero, -c1, zero],
        [zero, zero, c1],
        [-c1, zero, zero],
        s(k2(0), [y, x, zero]),
        s(k2(1), [zero, z, y]),
        s(k2(2), [-two * x, -two * y, four * z]),
        s(k2(3), [z, zero, x]),
        s(k2(4), [two * x, -two * y, zero]),
        s(k3(0), [six * x * y, three * xx - three * yy, zero]),
        s(k3(1), [y * z, x * z, x * y]),
        s(k3(2), [-two * x * y, four * zz - xx - three * yy, eight * y * z]),
        s(k3(3), [-six * x * z, -six * y * z, six * zz - three * xx - three * yy]),
        s(k3(4), [four * zz - three * xx - yy, -two * x * y, eight * x * z]),
        s(k3(5), [two * x * z, -two * y * z, xx - yy]),
        s(k3(6), [three * xx - three * yy, -six * x * y, zero]),
    ]
}

/// RGB color of SH coefficients `c` viewed along `dir`. Not clamped.
pub fn eval_sh<T: Scalar>(c: &[T; SH_COEFFS], dir: Vec3<T>) -> Result<Vec3<T>> {
    let d = normalize3(dir).ok_or_else(|| Error::validation("eval_sh: zero or non-finite direction"))?;
    Ok(eval_sh_unit(c, d))
}

/// [`eval_sh`] for a direction already known to be unit length.
pub fn eval_sh_unit<T: Scalar>(c: &[T; SH_COEFFS], d: Vec3<T>) -> Vec3<T> {
    let y = basis(d);
    let mut rgb = [T::zero(); 3];
    for (ch, out) in rgb.iter_mut().enumerate() {
        let row = &c[ch * SH_BASIS..(ch + 1) * SH_BASIS];
        *out = row.iter().zip(y.iter()).map(|(&a, &b)| a * b).sum();
    }
    rgb
}

/// Backward of [`eval_sh_unit`]: accumulates `∂L/∂c` into `grad_c` and
/// returns `∂L/∂d` (unprojected; the caller handles normalization).
pub fn eval_sh_backward<T: Scalar>(
    c: &[T; SH_COEFFS],
    d: Vec3<T>,
    grad_rgb: Vec3<T>,
    grad_c: &mut [T],
) -> Vec3<T> {
    let y = basis(d);
    let dy = basis_gradient(d);
    let mut gd = [T::zero(); 3];
    for ch in 0..3 {
        let g = grad_rgb[ch];
        for b in 0..SH_BASIS {
            grad_c[ch * SH_BASIS + b] += g * y[b];
            let w = g * c[ch * SH_BASIS + b];
            gd[0] += w * dy[b][0];
            gd[1] += w * dy[b][1];
            gd[2] += w * dy[b][2];
        }
    }
    gd
}

/// Band-0 coefficient producing a flat color `v` from every direction.
pub fn dc_for_color<T: Scalar>(v: T) -> T {
    v / T::lit(SH_C0)
}
