//! Pinhole cameras.
//!
//! Camera space is x right, y down, z forward. A world point `p` maps to
//! `p_c = R p + t` and to pixel `(fx x/z + cx, fy y/z + cy)`. Pixel `(i, j)`
//! is sampled at the integer coordinate `(i, j)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cross3, det3, matmul3, matvec3, matvec3_t, normalize3, sub3, transpose3, Mat3, Vec3};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera<T> {
    pub width: u32,
    pub height: u32,
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    /// World-to-camera rotation, row-major.
    pub rotation: Mat3<T>,
    pub translation: Vec3<T>,
}

impl<T: Scalar> Camera<T> {
    pub fn new(
        width: u32,
        height: u32,
        [fx, fy, cx, cy]: [T; 4],
        rotation: Mat3<T>,
        translation: Vec3<T>,
    ) -> Result<Self> {
        let cam = Camera {
            width,
            height,
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`, with `up` the world up direction.
    /// Principal point at the image center, equal focal lengths.
    pub fn look_at(width: u32, height: u32, focal: T, eye: Vec3<T>, target: Vec3<T>, up: Vec3<T>) -> Result<Self> {
        let forward = normalize3(sub3(target, eye)).ok_or_else(|| Error::validation("look_at: eye equals target"))?;
        let right = normalize3(cross3(forward, up)).ok_or_else(|| Error::validation("look_at: up parallel to view"))?;
        let down = cross3(forward, right);
        let rotation = [right, down, forward];
        let re = matvec3(&rotation, eye);
        let half = T::lit(0.5);
        Camera::new(
            width,
            height,
            [focal, focal, T::count(width as usize) * half, T::count(height as usize) * half],
            rotation,
            [-re[0], -re[1], -re[2]],
        )
    }

    /// Camera on a sphere of radius `distance` around `target`, azimuth about
    /// world `+y` (0 = on `+z`), elevation towards `+y`, looking at `target`.
    pub fn orbit(width: u32, height: u32, focal: T, target: Vec3<T>, azimuth_deg: T, elevation_deg: T, distance: T) -> Result<Self> {
        if !(distance > T::zero()) {
            return Err(Error::validation("orbit: distance must be positive"));
        }
        let az = azimuth_deg.to_radians();
        let el = elevation_deg.to_radians();
        let eye = [
            target[0] + distance * el.cos() * az.sin(),
            target[1] + distance * el.sin(),
            target[2] + distance * el.cos() * az.cos(),
        ];
        Camera::look_at(width, height, focal, eye, target, [T::zero(), T::one(), T::zero()])
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::validation("camera: zero image size"));
        }
        if !(self.fx > T::zero() && self.fy > T::zero()) {
            return Err(Error::validation("camera: focal lengths must be positive"));
        }
        let vals = [self.fx, self.fy, self.cx, self.cy]
            .into_iter()
            .chain(self.rotation.iter().flatten().copied())
            .chain(self.translation);
        for v in vals {
            if !v.is_finite() {
                return Err(Error::validation("camera: non-finite parameter"));
            }
        }
        let rtr = matmul3(&transpose3(&self.rotation), &self.rotation);
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { T::one() } else { T::zero() };
                if (rtr[i][j] - e).abs().as_f64() > T::ORTHO_TOL {
                    return Err(Error::validation("camera: rotation is not orthonormal"));
                }
            }
        }
        if (det3(&self.rotation) - T::one()).abs().as_f64() > T::ORTHO_TOL {
            return Err(Error::validation("camera: rotation determinant is not +1"));
        }
        Ok(())
    }

    /// Camera center in world coordinates, `-Rᵀ t`.
    pub fn center(&self) -> Vec3<T> {
        let c = matvec3_t(&self.rotation, self.translation);
        [-c[0], -c[1], -c[2]]
    }

    pub fn world_to_camera(&self, p: Vec3<T>) -> Vec3<T> {
        let r = matvec3(&self.rotation, p);
        [r[0] + self.translation[0], r[1] + self.translation[1], r[2] + self.translation[2]]
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn cast<U: Scalar>(&self) -> Camera<U> {
        let c = |v: T| U::lit(v.as_f64());
        Camera {
            width: self.width,
            height: self.height,
            fx: c(self.fx),
            fy: c(self.fy),
            cx: c(self.cx),
            cy: c(self.cy),
            rotation: self.rotation.map(|r| r.map(c)),
            translation: self.translation.map(c),
        }
    }

    /// Same pose and field of view at a different resolution.
    pub fn resized(&self, width: u32, height: u32) -> Self {
        let sx = T::count(width as usize) / T::count(self.width as usize);
        let sy = T::count(height as usize) / T::count(self.height as usize);
        Camera {
            width,
            height,
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            ..*self
        }
    }
}

/// On-disk camera JSON: `{width, height, fx, fy, cx, cy, rotation: [9] row-major, translation: [3]}`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CameraFile {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl<T: Scalar> From<&Camera<T>> for CameraFile {
    fn from(c: &Camera<T>) -> Self {
        let mut rotation = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                rotation[i * 3 + j] = c.rotation[i][j].as_f64();
            }
        }
        CameraFile {
            width: c.width,
            height: c.height,
            fx: c.fx.as_f64(),
            fy: c.fy.as_f64(),
            cx: c.cx.as_f64(),
            cy: c.cy.as_f64(),
            rotation,
            translation: c.translation.map(|v| v.as_f64()),
        }
    }
}

impl CameraFile {
    pub fn to_camera<T: Scalar>(&self) -> Result<Camera<T>> {
        let r = |i: usize| T::lit(self.rotation[i]);
        Camera::new(
            self.width,
            self.height,
            [T::lit(self.fx), T::lit(self.fy), T::lit(self.cx), T::lit(self.cy)],
            [[r(0), r(1), r(2)], [r(3), r(4), r(5)], [r(6), r(7), r(8)]],
            self.translation.map(T::lit),
        )
    }
}
