//! Image metrics with gradients where the losses need them.
//!
//! Gradient functions return `∂metric/∂b` (the second argument, which the
//! losses use for the prediction) in the interleaved image layout.

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::Scalar;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn check_shape<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::validation(format!(
            "image shapes differ: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

pub fn mse<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<T> {
    check_shape(a, b)?;
    let n = T::count(a.data().len().max(1));
    Ok(a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>() / n)
}

/// Peak signal-to-noise ratio in dB with peak 1. Identical images give
/// `+∞`.
pub fn psnr<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<T> {
    let m = mse(a, b)?;
    if m.is_zero() {
        return Ok(T::infinity());
    }
    Ok(T::lit(-10.0) * m.log10())
}

pub fn mae<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<T> {
    check_shape(a, b)?;
    let n = T::count(a.data().len().max(1));
    Ok(a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y).abs()).sum::<T>() / n)
}

/// `(mae, ∂mae/∂b)`; the subgradient at equal values is 0.
pub fn mae_with_grad<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<(T, Vec<T>)> {
    let v = mae(a, b)?;
    let inv = T::one() / T::count(a.data().len().max(1));
    let g = a.data().iter().zip(b.data()).map(|(&x, &y)| sign(y - x) * inv).collect();
    Ok((v, g))
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

pub fn l1_norm<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|x| x.abs()).sum()
}

pub fn l2_norm_sq<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum()
}

/// Single-channel plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Plane<T> {
    pub fn zeros(width: usize, height: usize) -> Self {
        Plane {
            width,
            height,
            data: vec![T::zero(); width * height],
        }
    }

    pub fn at(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    fn map2(&self, o: &Plane<T>, f: impl Fn(T, T) -> T) -> Plane<T> {
        Plane {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&o.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }
}

pub fn channel_plane<T: Scalar>(img: &Image<T>, ch: usize) -> Plane<T> {
    Plane {
        width: img.width() as usize,
        height: img.height() as usize,
        data: img.data().iter().skip(ch).step_by(CHANNELS).copied().collect(),
    }
}

fn gaussian_taps<T: Scalar>() -> Vec<T> {
    let r = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| T::lit(v / s)).collect()
}

/// Separable "valid" correlation.
fn filter_valid<T: Scalar>(p: &Plane<T>, taps: &[T]) -> Plane<T> {
    let n = taps.len();
    let ow = p.width + 1 - n;
    let oh = p.height + 1 - n;
    let mut tmp = Plane::zeros(ow, p.height);
    for y in 0..p.height {
        let row = &p.data[y * p.width..(y + 1) * p.width];
        for x in 0..ow {
            tmp.data[y * ow + x] = taps.iter().zip(&row[x..x + n]).map(|(&t, &v)| t * v).sum();
        }
    }
    let mut out = Plane::zeros(ow, oh);
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = T::zero();
            for (k, &t) in taps.iter().enumerate() {
                acc += t * tmp.data[(y + k) * ow + x];
            }
            out.data[y * ow + x] = acc;
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters an output-shaped plane back to
/// the input shape.
fn filter_valid_adjoint<T: Scalar>(g: &Plane<T>, taps: &[T], width: usize, height: usize) -> Plane<T> {
    let n = taps.len();
    let ow = g.width;
    let mut tmp = Plane::zeros(ow, height);
    for y in 0..g.height {
        for x in 0..ow {
            let v = g.data[y * ow + x];
            for (k, &t) in taps.iter().enumerate() {
                tmp.data[(y + k) * ow + x] += t * v;
            }
        }
    }
    let mut out = Plane::zeros(width, height);
    for y in 0..height {
        for x in 0..ow {
            let v = tmp.data[y * ow + x];
            for k in 0..n {
                out.data[y * width + x + k] += taps[k] * v;
            }
        }
    }
    out
}

struct SsimMaps<T> {
    mu_a: Plane<T>,
    mu_b: Plane<T>,
    a1: Plane<T>,
    a2: Plane<T>,
    b1: Plane<T>,
    b2: Plane<T>,
}

fn ssim_maps<T: Scalar>(a: &Plane<T>, b: &Plane<T>, taps: &[T]) -> SsimMaps<T> {
    let c1 = T::lit(SSIM_C1);
    let c2 = T::lit(SSIM_C2);
    let two = T::lit(2.0);
    let mu_a = filter_valid(a, taps);
    let mu_b = filter_valid(b, taps);
    let e_aa = filter_valid(&a.map2(a, |x, y| x * y), taps);
    let e_bb = filter_valid(&b.map2(b, |x, y| x * y), taps);
    let e_ab = filter_valid(&a.map2(b, |x, y| x * y), taps);
    let n = mu_a.data.len();
    let mut maps = SsimMaps {
        a1: Plane::zeros(mu_a.width, mu_a.height),
        a2: Plane::zeros(mu_a.width, mu_a.height),
        b1: Plane::zeros(mu_a.width, mu_a.height),
        b2: Plane::zeros(mu_a.width, mu_a.height),
        mu_a,
        mu_b,
    };
    for i in 0..n {
        let (ma, mb) = (maps.mu_a.data[i], maps.mu_b.data[i]);
        let s_aa = e_aa.data[i] - ma * ma;
        let s_bb = e_bb.data[i] - mb * mb;
        let s_ab = e_ab.data[i] - ma * mb;
        maps.a1.data[i] = two * ma * mb + c1;
        maps.a2.data[i] = two * s_ab + c2;
        maps.b1.data[i] = ma * ma + mb * mb + c1;
        maps.b2.data[i] = s_aa + s_bb + c2;
    }
    maps
}

fn check_ssim_size<T: Scalar>(a: &Image<T>) -> Result<()> {
    if (a.width() as usize) < SSIM_WINDOW || (a.height() as usize) < SSIM_WINDOW {
        return Err(Error::validation(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.width(),
            a.height()
        )));
    }
    Ok(())
}

/// Mean local SSIM over valid 11×11 Gaussian windows, averaged over channels.
pub fn ssim<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<T> {
    check_shape(a, b)?;
    check_ssim_size(a)?;
    let taps = gaussian_taps::<T>();
    let mut total = T::zero();
    let mut count = 0usize;
    for ch in 0..CHANNELS {
        let m = ssim_maps(&channel_plane(a, ch), &channel_plane(b, ch), &taps);
        for i in 0..m.a1.data.len() {
            total += m.a1.data[i] * m.a2.data[i] / (m.b1.data[i] * m.b2.data[i]);
        }
        count += m.a1.data.len();
    }
    Ok(total / T::count(count))
}

/// `(ssim, ∂ssim/∂b)`.
pub fn ssim_with_grad<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<(T, Vec<T>)> {
    check_shape(a, b)?;
    check_ssim_size(a)?;
    if a.data() == b.data() {
        // the maximum: the gradient is exactly zero, without round-off
        return Ok((ssim(a, b)?, vec![T::zero(); a.data().len()]));
    }
    let taps = gaussian_taps::<T>();
    let (w, h) = (a.width() as usize, a.height() as usize);
    let two = T::lit(2.0);
    let mut total = T::zero();
    let mut grad = vec![T::zero(); a.data().len()];
    let out_n = (w + 1 - SSIM_WINDOW) * (h + 1 - SSIM_WINDOW);
    let inv_n = T::one() / T::count(out_n * CHANNELS);
    for ch in 0..CHANNELS {
        let pa = channel_plane(a, ch);
        let pb = channel_plane(b, ch);
        let m = ssim_maps(&pa, &pb, &taps);
        let mut g_mu = Plane::zeros(m.a1.width, m.a1.height);
        let mut g_bb = g_mu.clone();
        let mut g_ab = g_mu.clone();
        for i in 0..out_n {
            let (a1, a2, b1, b2) = (m.a1.data[i], m.a2.data[i], m.b1.data[i], m.b2.data[i]);
            let den = b1 * b2;
            let s = a1 * a2 / den;
            total += s;
            let (ma, mb) = (m.mu_a.data[i], m.mu_b.data[i]);
            g_mu.data[i] = (two * ma * (a2 - a1) / den - two * mb * s * (T::one() / b1 - T::one() / b2)) * inv_n;
            g_bb.data[i] = -s / b2 * inv_n;
            g_ab.data[i] = two * a1 / den * inv_n;
        }
        let back_mu = filter_valid_adjoint(&g_mu, &taps, w, h);
        let back_bb = filter_valid_adjoint(&g_bb, &taps, w, h);
        let back_ab = filter_valid_adjoint(&g_ab, &taps, w, h);
        for i in 0..w * h {
            grad[i * CHANNELS + ch] = back_mu.data[i] + two * pb.data[i] * back_bb.data[i] + pa.data[i] * back_ab.data[i];
        }
    }
    Ok((total * inv_n, grad))
}

/// A differentiable image distance standing in for a learned perceptual
/// metric.
pub trait PerceptualMetric<T: Scalar>: Send + Sync {
    fn distance(&self, a: &Image<T>, b: &Image<T>) -> Result<T>;
    /// `(distance, ∂distance/∂b)`.
    fn distance_with_grad(&self, a: &Image<T>, b: &Image<T>) -> Result<(T, Vec<T>)>;
}

/// L1 distance between Laplacian pyramids: per level, the mean absolute
/// coefficient difference, summed over levels.
///
/// Level `l < L-1` holds `G_l - up(down(G_l))` where `down` averages 2×2
/// blocks and `up` repeats each value over its block (a trailing odd
/// row/column has no block and keeps `G_l`). The last level is the
/// low-pass residual. The transform is invertible, so the distance is zero
/// only for identical images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LaplacianPyramid {
    pub levels: usize,
}

impl Default for LaplacianPyramid {
    fn default() -> Self {
        LaplacianPyramid { levels: 3 }
    }
}

fn downsample<T: Scalar>(p: &Plane<T>) -> Plane<T> {
    let (w, h) = (p.width / 2, p.height / 2);
    let q = T::lit(0.25);
    let mut out = Plane::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            out.data[y * w + x] = q * (p.at(2 * x, 2 * y) + p.at(2 * x + 1, 2 * y) + p.at(2 * x, 2 * y + 1) + p.at(2 * x + 1, 2 * y + 1));
        }
    }
    out
}

fn downsample_adjoint<T: Scalar>(g: &Plane<T>, width: usize, height: usize) -> Plane<T> {
    let q = T::lit(0.25);
    let mut out = Plane::zeros(width, height);
    for y in 0..g.height {
        for x in 0..g.width {
            let v = q * g.at(x, y);
            for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                out.data[(2 * y + dy) * width + 2 * x + dx] += v;
            }
        }
    }
    out
}

fn upsample<T: Scalar>(p: &Plane<T>, width: usize, height: usize) -> Plane<T> {
    let mut out = Plane::zeros(width, height);
    for y in 0..2 * p.height {
        for x in 0..2 * p.width {
            out.data[y * width + x] = p.at(x / 2, y / 2);
        }
    }
    out
}

fn upsample_adjoint<T: Scalar>(g: &Plane<T>, width: usize, height: usize) -> Plane<T> {
    let mut out = Plane::zeros(width, height);
    for y in 0..2 * height {
        for x in 0..2 * width {
            out.data[(y / 2) * width + x / 2] += g.at(x, y);
        }
    }
    out
}

impl LaplacianPyramid {
    /// Pyramid coefficients of one plane, finest level first. Fewer levels
    /// are produced when the plane becomes smaller than 2×2.
    pub fn decompose<T: Scalar>(&self, p: &Plane<T>) -> Vec<Plane<T>> {
        let mut out = Vec::with_capacity(self.levels);
        let mut g = p.clone();
        for _ in 1..self.levels.max(1) {
            if g.width < 2 || g.height < 2 {
                break;
            }
            let d = downsample(&g);
            let up = upsample(&d, g.width, g.height);
            out.push(g.map2(&up, |a, b| a - b));
            g = d;
        }
        out.push(g);
        out
    }

    /// Adjoint of [`Self::decompose`] for a plane of the given size.
    fn decompose_adjoint<T: Scalar>(&self, grads: &[Plane<T>], width: usize, height: usize) -> Plane<T> {
        let mut sizes = vec![(width, height)];
        for _ in 1..grads.len() {
            let &(w, h) = sizes.last().unwrap();
            sizes.push((w / 2, h / 2));
        }
        let mut total = grads[grads.len() - 1].clone();
        for l in (0..grads.len() - 1).rev() {
            let (w, h) = sizes[l];
            let (cw, ch) = sizes[l + 1];
            let up_t = upsample_adjoint(&grads[l], cw, ch);
            let inner = total.map2(&up_t, |a, b| a - b);
            let down_t = downsample_adjoint(&inner, w, h);
            total = grads[l].map2(&down_t, |a, b| a + b);
        }
        total
    }
}

impl<T: Scalar> PerceptualMetric<T> for LaplacianPyramid {
    fn distance(&self, a: &Image<T>, b: &Image<T>) -> Result<T> {
        check_shape(a, b)?;
        let mut total = T::zero();
        for ch in 0..CHANNELS {
            let pa = self.decompose(&channel_plane(a, ch));
            let pb = self.decompose(&channel_plane(b, ch));
            for (la, lb) in pa.iter().zip(&pb) {
                let n = T::count(la.data.len().max(1) * CHANNELS);
                total += la.data.iter().zip(&lb.data).map(|(&x, &y)| (x - y).abs()).sum::<T>() / n;
            }
        }
        Ok(total)
    }

    fn distance_with_grad(&self, a: &Image<T>, b: &Image<T>) -> Result<(T, Vec<T>)> {
        check_shape(a, b)?;
        let (w, h) = (a.width() as usize, a.height() as usize);
        let mut total = T::zero();
        let mut grad = vec![T::zero(); a.data().len()];
        for ch in 0..CHANNELS {
            let pa = self.decompose(&channel_plane(a, ch));
            let pb = self.decompose(&channel_plane(b, ch));
            let mut gl = Vec::with_capacity(pa.len());
            for (la, lb) in pa.iter().zip(&pb) {
                let n = T::count(la.data.len().max(1) * CHANNELS);
                total += la.data.iter().zip(&lb.data).map(|(&x, &y)| (x - y).abs()).sum::<T>() / n;
                gl.push(lb.map2(la, |y, x| sign(y - x) / n));
            }
            let g = self.decompose_adjoint(&gl, w, h);
            for i in 0..w * h {
                grad[i * CHANNELS + ch] = g.data[i];
            }
        }
        Ok((total, grad))
    }
}

/// [`LaplacianPyramid`] with three levels.
pub fn perceptual_proxy<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<T> {
    LaplacianPyramid::default().distance(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: u32, h: u32) -> Image<f64> {
        let data = (0..w * h * 3).map(|_| rng.random_range(0.0..1.0)).collect();
        Image::from_vec(w, h, data).unwrap()
    }

    /// Direct windowed SSIM: explicit 2D window sums, no separability.
    fn ssim_reference(a: &Image<f64>, b: &Image<f64>) -> f64 {
        let (w, h) = (a.width() as usize, a.height() as usize);
        let mut k = [[0.0; 11]; 11];
        let mut s = 0.0;
        for (i, row) in k.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
                *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
                s += *v;
            }
        }
        let mut total = 0.0;
        let mut n = 0;
        for ch in 0..3 {
            let pa = |x: usize, y: usize| a.data()[(y * w + x) * 3 + ch];
            let pb = |x: usize, y: usize| b.data()[(y * w + x) * 3 + ch];
            for y0 in 0..=h - 11 {
                for x0 in 0..=w - 11 {
                    let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let wt = k[i][j] / s;
                            let (va, vb) = (pa(x0 + j, y0 + i), pb(x0 + j, y0 + i));
                            ma += wt * va;
                            mb += wt * vb;
                            saa += wt * va * va;
                            sbb += wt * vb * vb;
                            sab += wt * va * vb;
                        }
                    }
                    let (saa, sbb, sab) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                    total += (2.0 * ma * mb + 1e-4) * (2.0 * sab + 9e-4) / ((ma * ma + mb * mb + 1e-4) * (saa + sbb + 9e-4));
                    n += 1;
                }
            }
        }
        total / n as f64
    }

    #[test]
    fn psnr_examples() {
        let a = Image::<f64>::filled(10, 10, [0.3, 0.5, 0.7]).unwrap();
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = Image::<f64>::filled(10, 10, [0.4, 0.6, 0.8]).unwrap();
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert!((psnr(&b, &a).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_sparse_flip() {
        // 1% of pixels differ by 1.0 in every channel: MSE 0.01.
        let a = Image::<f64>::filled(10, 10, [0.0; 3]).unwrap();
        let mut d = a.data().to_vec();
        d[..3].copy_from_slice(&[1.0; 3]);
        let b = Image::from_vec(10, 10, d).unwrap();
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        // Only one channel of that pixel: MSE is a third as large.
        let mut d = a.data().to_vec();
        d[0] = 1.0;
        let b = Image::from_vec(10, 10, d).unwrap();
        assert!((psnr(&a, &b).unwrap() - 10.0 * 300f64.log10()).abs() < 1e-9);
    }

    #[test]
    fn ssim_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_image(&mut rng, 16, 13);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let g = Image::<f64>::filled(12, 12, [0.5; 3]).unwrap();
        assert!((ssim(&g, &g).unwrap() - 1.0).abs() < 1e-12);
        let zero = Image::<f64>::filled(12, 12, [0.0; 3]).unwrap();
        let one = Image::<f64>::filled(12, 12, [1.0; 3]).unwrap();
        // Constant images: variances vanish, leaving C1 / (1 + C1).
        let expect = 1e-4 / (1.0 + 1e-4);
        assert!((ssim(&zero, &one).unwrap() - expect).abs() < 1e-12);
        assert!((ssim_reference(&zero, &one) - expect).abs() < 1e-12);
        assert!(ssim(&Image::<f64>::filled(10, 20, [0.0; 3]).unwrap(), &Image::filled(10, 20, [0.0; 3]).unwrap()).is_err());
    }

    #[test]
    fn ssim_matches_direct_window_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..3 {
            let a = random_image(&mut rng, 17, 14);
            let b = random_image(&mut rng, 17, 14);
            let fast = ssim(&a, &b).unwrap();
            assert!((fast - ssim_reference(&a, &b)).abs() < 1e-12);
            assert!((fast - ssim(&b, &a).unwrap()).abs() < 1e-14);
            assert!((ssim_with_grad(&a, &b).unwrap().0 - fast).abs() < 1e-14);
        }
    }

    fn perturbed(img: &Image<f64>, i: usize, h: f64) -> Image<f64> {
        let mut d = img.data().to_vec();
        d[i] += h;
        // Gradient checks deliberately step outside [0, 1] at the borders.
        Image::from_vec(img.width(), img.height(), d.iter().map(|v| v.clamp(0.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn ssim_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut a = random_image(&mut rng, 14, 13);
        let mut b = random_image(&mut rng, 14, 13);
        // keep values away from the clamp used by `perturbed`
        for img in [&mut a, &mut b] {
            *img = Image::from_vec(14, 13, img.data().iter().map(|v| 0.1 + 0.8 * v).collect()).unwrap();
        }
        let (_, g) = ssim_with_grad(&a, &b).unwrap();
        let h = 1e-5;
        for i in (0..g.len()).step_by(7) {
            let fd = (ssim(&a, &perturbed(&b, i, h)).unwrap() - ssim(&a, &perturbed(&b, i, -h)).unwrap()) / (2.0 * h);
            let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-5, "index {i}: {} vs {fd}", g[i]);
        }
    }

    #[test]
    fn mae_examples() {
        let a = Image::<f64>::filled(4, 4, [0.3; 3]).unwrap();
        assert_eq!(mae(&a, &a).unwrap(), 0.0);
        let b = Image::<f64>::filled(4, 4, [0.4; 3]).unwrap();
        assert!((mae(&a, &b).unwrap() - 0.1).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_image(&mut rng, 5, 3);
        let y = random_image(&mut rng, 5, 3);
        let mut brute = 0.0;
        for i in 0..x.data().len() {
            brute += (x.data()[i] - y.data()[i]).abs();
        }
        assert!((mae(&x, &y).unwrap() - brute / 45.0).abs() < 1e-14);
        assert!(mae(&x, &a).is_err());
    }

    #[test]
    fn two_level_pyramid_by_hand() {
        // One channel carries a 4×4 ramp, the others are zero.
        let vals: Vec<f64> = (0..16).map(|v| v as f64 / 16.0).collect();
        let data: Vec<f64> = vals.iter().flat_map(|&v| [v, 0.0, 0.0]).collect();
        let a = Image::from_vec(4, 4, data).unwrap();
        let zero = Image::filled(4, 4, [0.0; 3]).unwrap();
        let pyr = LaplacianPyramid { levels: 2 };
        // Block means of the ramp: top-left block {0,1,4,5}/16 → 2.5/16, etc.
        let low = [2.5, 4.5, 10.5, 12.5].map(|v| v / 16.0);
        // Band-pass residuals within each 2×2 block are ±1.5/16 and ±2.5/16.
        let band_abs: f64 = (0..16)
            .map(|i| {
                let (x, y) = (i % 4, i / 4);
                (vals[i] - low[(y / 2) * 2 + x / 2]).abs()
            })
            .sum();
        assert!((band_abs - 2.0).abs() < 1e-12);
        let expect = band_abs / 48.0 + low.iter().sum::<f64>() / 12.0;
        let got: f64 = pyr.distance(&a, &zero).unwrap();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn pyramid_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_image(&mut rng, 9, 7);
        let b = Image::from_vec(9, 7, random_image(&mut rng, 9, 7).data().iter().map(|v| 0.1 + 0.8 * v).collect()).unwrap();
        let pyr = LaplacianPyramid::default();
        let (_, g) = pyr.distance_with_grad(&a, &b).unwrap();
        let h = 1e-7;
        for i in 0..g.len() {
            let fd = (pyr.distance(&a, &perturbed(&b, i, h)).unwrap() - pyr.distance(&a, &perturbed(&b, i, -h)).unwrap()) / (2.0 * h);
            let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-5, "index {i}: {} vs {fd}", g[i]);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn metrics_symmetric_and_nonnegative(seed in any::<u64>(), w in 11u32..16, h in 11u32..16) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_image(&mut rng, w, h);
            let b = random_image(&mut rng, w, h);
            prop_assert!((psnr(&a, &b).unwrap() - psnr(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
            let pa = perceptual_proxy(&a, &b).unwrap();
            prop_assert!(pa > 0.0);
            prop_assert!((pa - perceptual_proxy(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert_eq!(perceptual_proxy(&a, &a).unwrap(), 0.0);
        }
    }
}
