//! Fixed-size vector, matrix and quaternion helpers on plain arrays.
//!
//! Matrices are row-major `[[T; 3]; 3]`. Quaternions are scalar-first
//! `(w, x, y, z)`.

use crate::Scalar;

pub type Vec3<T> = [T; 3];
pub type Mat3<T> = [[T; 3]; 3];
pub type Quat<T> = [T; 4];

#[inline]
pub fn add3<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub3<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale3<T: Scalar>(a: Vec3<T>, s: T) -> Vec3<T> {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot3<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross3<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm3<T: Scalar>(a: Vec3<T>) -> T {
    dot3(a, a).sqrt()
}

/// Returns `None` for a zero (or non-finite) vector.
pub fn normalize3<T: Scalar>(a: Vec3<T>) -> Option<Vec3<T>> {
    let n = norm3(a);
    if n > T::zero() && n.is_finite() {
        Some(scale3(a, T::one() / n))
    } else {
        None
    }
}

pub fn identity3<T: Scalar>() -> Mat3<T> {
    let (o, z) = (T::one(), T::zero());
    [[o, z, z], [z, o, z], [z, z, o]]
}

pub fn transpose3<T: Scalar>(m: &Mat3<T>) -> Mat3<T> {
    let mut t = [[T::zero(); 3]; 3];
    for (i, row) in m.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            t[j][i] = v;
        }
    }
    t
}

pub fn matmul3<T: Scalar>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

#[inline]
pub fn matvec3<T: Scalar>(m: &Mat3<T>, v: Vec3<T>) -> Vec3<T> {
    [dot3(m[0], v), dot3(m[1], v), dot3(m[2], v)]
}

/// `mᵀ v`
#[inline]
pub fn matvec3_t<T: Scalar>(m: &Mat3<T>, v: Vec3<T>) -> Vec3<T> {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

pub fn det3<T: Scalar>(m: &Mat3<T>) -> T {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

#[inline]
pub fn quat_norm<T: Scalar>(q: Quat<T>) -> T {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

pub fn quat_normalize<T: Scalar>(q: Quat<T>) -> Option<Quat<T>> {
    let n = quat_norm(q);
    if n > T::zero() && n.is_finite() {
        let inv = T::one() / n;
        Some([q[0] * inv, q[1] * inv, q[2] * inv, q[3] * inv])
    } else {
        None
    }
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`:
///
/// ```text
/// | 1-2(y²+z²)   2(xy-wz)    2(xz+wy)  |
/// | 2(xy+wz)     1-2(x²+z²)  2(yz-wx)  |
/// | 2(xz-wy)     2(yz+wx)    1-2(x²+y²)|
/// ```
pub fn quat_to_rotation<T: Scalar>(q: Quat<T>) -> Mat3<T> {
    let [w, x, y, z] = q;
    let one = T::one();
    let two = T::lit(2.0);
    [
        [
            one - two * (y * y + z * z),
            two * (x * y - w * z),
            two * (x * z + w * y),
        ],
        [
            two * (x * y + w * z),
            one - two * (x * x + z * z),
            two * (y * z - w * x),
        ],
        [
            two * (x * z - w * y),
            two * (y * z + w * x),
            one - two * (x * x + y * y),
        ],
    ]
}

/// Pulls a gradient on the rotation matrix back to the (unit) quaternion
/// it was built from with [`quat_to_rotation`].
pub fn quat_to_rotation_backward<T: Scalar>(q: Quat<T>, g: &Mat3<T>) -> Quat<T> {
    let [w, x, y, z] = q;
    let two = T::lit(2.0);
    let four = T::lit(4.0);
    let dw = two * (-z * g[0][1] + y * g[0][2] + z * g[1][0] - x * g[1][2] - y * g[2][0] + x * g[2][1]);
    let dx = two * (y * g[0][1] + z * g[0][2] + y * g[1][0] - w * g[1][2] + z * g[2][0] + w * g[2][1])
        - four * x * (g[1][1] + g[2][2]);
    let dy = two * (x * g[0][1] + w * g[0][2] + x * g[1][0] + z * g[1][2] - w * g[2][0] + z * g[2][1])
        - four * y * (g[0][0] + g[2][2]);
    let dz = two * (-w * g[0][1] + x * g[0][2] + w * g[1][0] + y * g[1][2] + x * g[2][0] + y * g[2][1])
        - four * z * (g[0][0] + g[1][1]);
    [dw, dx, dy, dz]
}

/// Gradient of `q / |q|` pulled back to the raw quaternion:
/// `(g - n (n·g)) / |q|` with `n` the normalized quaternion.
pub fn quat_normalize_backward<T: Scalar>(raw: Quat<T>, g: Quat<T>) -> Quat<T> {
    let n = quat_norm(raw);
    if !(n > T::zero()) {
        return [T::zero(); 4];
    }
    let inv = T::one() / n;
    let u = [raw[0] * inv, raw[1] * inv, raw[2] * inv, raw[3] * inv];
    let d = u[0] * g[0] + u[1] * g[1] + u[2] * g[2] + u[3] * g[3];
    [
        (g[0] - u[0] * d) * inv,
        (g[1] - u[1] * d) * inv,
        (g[2] - u[2] * d) * inv,
        (g[3] - u[3] * d) * inv,
    ]
}

/// Shortest-arc rotation taking `+z` onto the unit vector `n`.
/// `n = +z` gives the identity; `n = -z` gives a half-turn about `x`.
pub fn quat_from_z_to<T: Scalar>(n: Vec3<T>) -> Quat<T> {
    let w = T::one() + n[2];
    if w <= T::lit(1e-12) {
        return [T::zero(), T::one(), T::zero(), T::zero()];
    }
    // (1 + z·n, z × n) normalized
    let q = [w, -n[1], n[0], T::zero()];
    quat_normalize(q).expect("non-degenerate shortest-arc quaternion")
}

/// Rotation about a unit axis by `angle` radians.
pub fn quat_from_axis_angle<T: Scalar>(axis: Vec3<T>, angle: T) -> Quat<T> {
    let half = angle / T::lit(2.0);
    let s = half.sin();
    [half.cos(), axis[0] * s, axis[1] * s, axis[2] * s]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn rotation_is_orthonormal() {
        let q = quat_normalize([0.3f64, -0.2, 0.9, 0.1]).unwrap();
        let r = quat_to_rotation(q);
        let rtr = matmul3(&transpose3(&r), &r);
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(rtr[i][j], e, epsilon = 1e-12);
            }
        }
        assert_abs_diff_eq!(det3(&r), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn z_quarter_turn_maps_x_to_y() {
        let q = quat_from_axis_angle([0.0f64, 0.0, 1.0], std::f64::consts::FRAC_PI_2);
        let v = matvec3(&quat_to_rotation(q), [1.0, 0.0, 0.0]);
        assert_abs_diff_eq!(v[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn rotation_backward_matches_finite_differences() {
        let q = [0.4f64, -0.3, 0.7, 0.2];
        let g = [[0.3, -1.0, 0.2], [0.5, 0.1, -0.7], [0.9, 0.4, -0.2]];
        let f = |q: Quat<f64>| {
            let r = quat_to_rotation(q);
            (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| r[i][j] * g[i][j]).sum::<f64>()
        };
        let an = quat_to_rotation_backward(q, &g);
        for i in 0..4 {
            let mut qp = q;
            let mut qm = q;
            qp[i] += 1e-6;
            qm[i] -= 1e-6;
            let fd = (f(qp) - f(qm)) / 2e-6;
            assert_abs_diff_eq!(an[i], fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn shortest_arc_aligns_z() {
        let n = normalize3([0.3f64, -0.5, 0.8]).unwrap();
        let r = quat_to_rotation(quat_from_z_to(n));
        let z = matvec3(&r, [0.0, 0.0, 1.0]);
        for i in 0..3 {
            assert_abs_diff_eq!(z[i], n[i], epsilon = 1e-12);
        }
        assert_eq!(quat_from_z_to([0.0f64, 0.0, 1.0]), [1.0, 0.0, 0.0, 0.0]);
        let flip = quat_to_rotation(quat_from_z_to([0.0f64, 0.0, -1.0]));
        assert_abs_diff_eq!(matvec3(&flip, [0.0, 0.0, 1.0])[2], -1.0, epsilon = 1e-12);
    }
}
