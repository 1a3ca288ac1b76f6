use crate::camera::Camera;
use crate::gaussian::{covariance_unchecked, Gaussian, OPACITY, POSITION, ROTATION, SCALE, SH};
use crate::linalg::{
    matvec3_t, norm3, quat_normalize, quat_normalize_backward, quat_to_rotation, quat_to_rotation_backward, scale3,
    sub3, Mat3,
};
use crate::sh::{eval_sh_backward, eval_sh_unit};
use crate::Scalar;

use super::RenderConfig;

/// A Gaussian after projection into one camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedGaussian<T> {
    pub index: usize,
    /// Pixel coordinates of the projected center.
    pub mean2d: [T; 2],
    /// Regularized 2D covariance `(xx, xy, yy)`, pixels².
    pub cov2d: [T; 3],
    /// Inverse of `cov2d`, `(xx, xy, yy)`.
    pub conic: [T; 3],
    /// Camera-space z of the center.
    pub depth: T,
    /// View-dependent color (not clamped).
    pub rgb: [T; 3],
    pub opacity: T,
    /// Bounding radius in pixels: `sigma_cutoff · sqrt(λ_max(cov2d))`.
    pub radius: T,
}

impl<T: Scalar> ProjectedGaussian<T> {
    /// Inclusive pixel bounds of the support, clamped to the image.
    /// `None` when the support misses the image entirely.
    pub fn pixel_bounds(&self, width: u32, height: u32) -> Option<[u32; 4]> {
        let x0 = (self.mean2d[0] - self.radius).ceil().as_f64().max(0.0);
        let y0 = (self.mean2d[1] - self.radius).ceil().as_f64().max(0.0);
        let x1 = (self.mean2d[0] + self.radius).floor().as_f64().min(width as f64 - 1.0);
        let y1 = (self.mean2d[1] + self.radius).floor().as_f64().min(height as f64 - 1.0);
        if x0 > x1 || y0 > y1 || !x0.is_finite() || !y0.is_finite() {
            None
        } else {
            Some([x0 as u32, y0 as u32, x1 as u32, y1 as u32])
        }
    }
}

/// Projects with the default [`RenderConfig`].
pub fn project_gaussian<T: Scalar>(g: &Gaussian<T>, cam: &Camera<T>) -> Option<ProjectedGaussian<T>> {
    project_gaussian_with(0, g, cam, &RenderConfig::default())
}

/// Projection shared by all render paths. Quaternions are normalized here,
/// so raw (non-unit) parameters are accepted. Returns `None` when culled:
/// behind the near plane, outside the image, or with a singular 2D
/// covariance.
pub fn project_gaussian_with<T: Scalar>(
    index: usize,
    g: &Gaussian<T>,
    cam: &Camera<T>,
    cfg: &RenderConfig,
) -> Option<ProjectedGaussian<T>> {
    let p = cam.world_to_camera(g.position);
    let (x, y, z) = (p[0], p[1], p[2]);
    if !(z > T::lit(cfg.near)) {
        return None;
    }
    let q = quat_normalize(g.rotation)?;
    let sigma = covariance_unchecked(&quat_to_rotation(q), g.scale);
    let jt = projection_jacobian_times_w(cam, x, y, z);
    let cov = project_cov(&jt, &sigma, T::lit(cfg.low_pass));
    let [a, b, c] = cov;
    let det = a * c - b * b;
    if !(det > T::zero()) || !det.is_finite() {
        log::debug!("gaussian {index}: singular 2D covariance (det = {det}), skipped");
        return None;
    }
    let inv = T::one() / det;
    let conic = [c * inv, -b * inv, a * inv];
    let mid = T::lit(0.5) * (a + c);
    let lambda_max = mid + (mid * mid - det).max(T::zero()).sqrt();
    let radius = T::lit(cfg.sigma_cutoff) * lambda_max.sqrt();
    let mean2d = [cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy];

    let dir = sub3(g.position, cam.center());
    let dn = norm3(dir);
    if !(dn > T::zero()) {
        return None;
    }
    let rgb = eval_sh_unit(&g.sh, scale3(dir, T::one() / dn));

    let pg = ProjectedGaussian {
        index,
        mean2d,
        cov2d: cov,
        conic,
        depth: z,
        rgb,
        opacity: g.opacity,
        radius,
    };
    pg.pixel_bounds(cam.width, cam.height)?;
    Some(pg)
}

/// `T = J W` where `J` is the perspective Jacobian at camera point `(x, y, z)`.
fn projection_jacobian_times_w<T: Scalar>(cam: &Camera<T>, x: T, y: T, z: T) -> [[T; 3]; 2] {
    let j = jacobian(cam, x, y, z);
    let w = &cam.rotation;
    let mut out = [[T::zero(); 3]; 2];
    for r in 0..2 {
        for col in 0..3 {
            out[r][col] = j[r][0] * w[0][col] + j[r][1] * w[1][col] + j[r][2] * w[2][col];
        }
    }
    out
}

fn jacobian<T: Scalar>(cam: &Camera<T>, x: T, y: T, z: T) -> [[T; 3]; 2] {
    let iz = T::one() / z;
    let iz2 = iz * iz;
    [
        [cam.fx * iz, T::zero(), -cam.fx * x * iz2],
        [T::zero(), cam.fy * iz, -cam.fy * y * iz2],
    ]
}

/// `T Σ Tᵀ + λ I` as `(xx, xy, yy)`.
fn project_cov<T: Scalar>(t: &[[T; 3]; 2], sigma: &Mat3<T>, low_pass: T) -> [T; 3] {
    let mut ts = [[T::zero(); 3]; 2];
    for r in 0..2 {
        for col in 0..3 {
            ts[r][col] = t[r][0] * sigma[0][col] + t[r][1] * sigma[1][col] + t[r][2] * sigma[2][col];
        }
    }
    let e = |r: usize, s: usize| ts[r][0] * t[s][0] + ts[r][1] * t[s][1] + ts[r][2] * t[s][2];
    [e(0, 0) + low_pass, e(0, 1), e(1, 1) + low_pass]
}

/// Gradient of the loss with respect to one projected Gaussian's 2D
/// quantities, accumulated over pixels.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub(crate) struct Grad2d<T> {
    pub mean: [T; 2],
    /// With respect to conic `(A, B, C)` where the exponent is
    /// `-½ (A dx² + 2 B dx dy + C dy²)`.
    pub conic: [T; 3],
    pub rgb: [T; 3],
    pub opacity: T,
}

impl<T: Scalar> Grad2d<T> {
    pub fn zero() -> Self {
        Grad2d {
            mean: [T::zero(); 2],
            conic: [T::zero(); 3],
            rgb: [T::zero(); 3],
            opacity: T::zero(),
        }
    }

    pub fn add(&mut self, o: &Grad2d<T>) {
        for i in 0..2 {
            self.mean[i] += o.mean[i];
        }
        for i in 0..3 {
            self.conic[i] += o.conic[i];
            self.rgb[i] += o.rgb[i];
        }
        self.opacity += o.opacity;
    }
}

/// Chain rule from 2D gradients to the Gaussian's 59 raw parameters.
pub(crate) fn project_backward<T: Scalar>(g: &Gaussian<T>, cam: &Camera<T>, cfg: &RenderConfig, g2: &Grad2d<T>, out: &mut [T]) {
    let p = cam.world_to_camera(g.position);
    let (x, y, z) = (p[0], p[1], p[2]);
    let Some(qhat) = quat_normalize(g.rotation) else {
        return;
    };
    let rot = quat_to_rotation(qhat);
    let sigma = covariance_unchecked(&rot, g.scale);
    let t = projection_jacobian_times_w(cam, x, y, z);
    let [a, b, c] = project_cov(&t, &sigma, T::lit(cfg.low_pass));
    let det = a * c - b * b;
    let two = T::lit(2.0);

    // conic -> cov2d
    let [ga_, gb_, gc_] = g2.conic;
    let id2 = T::one() / (det * det);
    let gcov_a = (-ga_ * c * c + gb_ * b * c - gc_ * b * b) * id2;
    let gcov_b = (ga_ * two * b * c + gb_ * (-det - two * b * b) + gc_ * two * a * b) * id2;
    let gcov_c = (-ga_ * b * b + gb_ * a * b - gc_ * a * a) * id2;
    let half = T::lit(0.5);
    let g2m = [[gcov_a, half * gcov_b], [half * gcov_b, gcov_c]];

    // cov2d = T Σ Tᵀ: ∂Σ = Tᵀ G T, ∂T = 2 G T Σ
    let mut gsigma = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = T::zero();
            for r in 0..2 {
                for s in 0..2 {
                    acc += t[r][i] * g2m[r][s] * t[s][j];
                }
            }
            gsigma[i][j] = acc;
        }
    }
    let mut gt = [[T::zero(); 3]; 2];
    for r in 0..2 {
        for col in 0..3 {
            let mut acc = T::zero();
            for s in 0..2 {
                for k in 0..3 {
                    acc += g2m[r][s] * t[s][k] * sigma[k][col];
                }
            }
            gt[r][col] = two * acc;
        }
    }
    // T = J W: ∂J = ∂T Wᵀ
    let w = &cam.rotation;
    let mut gj = [[T::zero(); 3]; 2];
    for r in 0..2 {
        for k in 0..3 {
            gj[r][k] = gt[r][0] * w[k][0] + gt[r][1] * w[k][1] + gt[r][2] * w[k][2];
        }
    }
    let iz = T::one() / z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let (fx, fy) = (cam.fx, cam.fy);
    let mut gp = [T::zero(); 3];
    gp[0] += gj[0][2] * (-fx * iz2);
    gp[1] += gj[1][2] * (-fy * iz2);
    gp[2] += gj[0][0] * (-fx * iz2) + gj[0][2] * (two * fx * x * iz3) + gj[1][1] * (-fy * iz2) + gj[1][2] * (two * fy * y * iz3);
    // mean2d
    let [gmx, gmy] = g2.mean;
    gp[0] += gmx * fx * iz;
    gp[1] += gmy * fy * iz;
    gp[2] += -gmx * fx * x * iz2 - gmy * fy * y * iz2;
    let mut gmu = matvec3_t(w, gp);

    // Σ = M Mᵀ, M = R diag(s)
    let mut m = rot;
    for row in m.iter_mut() {
        for j in 0..3 {
            row[j] *= g.scale[j];
        }
    }
    let mut gm = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = T::zero();
            for k in 0..3 {
                acc += (gsigma[i][k] + gsigma[k][i]) * m[k][j];
            }
            gm[i][j] = acc;
        }
    }
    let mut gscale = [T::zero(); 3];
    let mut grot = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            gscale[j] += gm[i][j] * rot[i][j];
            grot[i][j] = gm[i][j] * g.scale[j];
        }
    }
    let gqhat = quat_to_rotation_backward(qhat, &grot);
    let gq = quat_normalize_backward(g.rotation, gqhat);

    // color
    let dir = sub3(g.position, cam.center());
    let dn = norm3(dir);
    let d = scale3(dir, T::one() / dn);
    let gsh = &mut out[SH];
    let gd = eval_sh_backward(&g.sh, d, g2.rgb, gsh);
    let proj = gd[0] * d[0] + gd[1] * d[1] + gd[2] * d[2];
    for i in 0..3 {
        gmu[i] += (gd[i] - d[i] * proj) / dn;
    }

    for i in 0..3 {
        out[POSITION.start + i] += gmu[i];
        out[SCALE.start + i] += gscale[i];
    }
    for i in 0..4 {
        out[ROTATION.start + i] += gq[i];
    }
    out[OPACITY] += g2.opacity;
}
