use std::cmp::Ordering;

use rayon::prelude::*;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussian::{Gaussian, PARAMS_PER_GAUSSIAN};
use crate::image::{Image, CHANNELS};
use crate::Scalar;

use super::project::{project_backward, Grad2d};
use super::{contribution, project_gaussian_with, Contribution, ProjectedGaussian, RenderConfig, Thresholds};

/// Projected Gaussians in global front-to-back order, binned into tiles.
pub(crate) struct Binned<T> {
    pub projected: Vec<ProjectedGaussian<T>>,
    /// Per tile, positions into `projected` in front-to-back order.
    pub tiles: Vec<Vec<u32>>,
    pub tiles_x: u32,
    pub tile: u32,
}

pub(crate) fn depth_order<T: Scalar>(a: &ProjectedGaussian<T>, b: &ProjectedGaussian<T>) -> Ordering {
    a.depth.partial_cmp(&b.depth).unwrap_or(Ordering::Equal).then(a.index.cmp(&b.index))
}

pub(crate) fn project_sorted<T: Scalar>(gaussians: &[Gaussian<T>], cam: &Camera<T>, cfg: &RenderConfig) -> Vec<ProjectedGaussian<T>> {
    let mut projected: Vec<_> = gaussians
        .par_iter()
        .enumerate()
        .filter_map(|(i, g)| project_gaussian_with(i, g, cam, cfg))
        .collect();
    projected.sort_by(depth_order);
    projected
}

fn bin<T: Scalar>(gaussians: &[Gaussian<T>], cam: &Camera<T>, cfg: &RenderConfig) -> Binned<T> {
    let projected = project_sorted(gaussians, cam, cfg);
    let tile = cfg.tile_size.max(1);
    let tiles_x = cam.width.div_ceil(tile);
    let tiles_y = cam.height.div_ceil(tile);
    let mut tiles = vec![Vec::new(); (tiles_x * tiles_y) as usize];
    for (pos, p) in projected.iter().enumerate() {
        let Some([x0, y0, x1, y1]) = p.pixel_bounds(cam.width, cam.height) else {
            continue;
        };
        for ty in y0 / tile..=y1 / tile {
            for tx in x0 / tile..=x1 / tile {
                tiles[(ty * tiles_x + tx) as usize].push(pos as u32);
            }
        }
    }
    Binned {
        projected,
        tiles,
        tiles_x,
        tile,
    }
}

impl<T> Binned<T> {
    /// Pixel ranges `(x0..x1, y0..y1)` covered by tile `t`.
    fn tile_rect(&self, t: usize, width: u32, height: u32) -> (std::ops::Range<u32>, std::ops::Range<u32>) {
        let tx = t as u32 % self.tiles_x;
        let ty = t as u32 / self.tiles_x;
        let x0 = tx * self.tile;
        let y0 = ty * self.tile;
        (x0..(x0 + self.tile).min(width), y0..(y0 + self.tile).min(height))
    }
}

/// Composites one pixel front to back; returns the unclamped color.
#[inline]
pub(crate) fn composite<'a, T: Scalar>(
    list: impl Iterator<Item = &'a ProjectedGaussian<T>>,
    px: T,
    py: T,
    th: &Thresholds<T>,
    background: [T; 3],
) -> [T; 3] {
    let mut c = [T::zero(); 3];
    let mut trans = T::one();
    for p in list {
        if let Some(ct) = contribution(p, px, py, th) {
            let w = ct.alpha * trans;
            for ch in 0..3 {
                c[ch] += p.rgb[ch] * w;
            }
            trans *= T::one() - ct.alpha;
        }
    }
    for ch in 0..3 {
        c[ch] += background[ch] * trans;
    }
    c
}

/// Tiled, parallel forward render of raw Gaussians (quaternions need not be
/// unit length).
pub fn render_with<T: Scalar>(gaussians: &[Gaussian<T>], cam: &Camera<T>, background: [T; 3], cfg: &RenderConfig) -> Image<T> {
    let (w, h) = (cam.width, cam.height);
    let binned = bin(gaussians, cam, cfg);
    let th = Thresholds::new(cfg);
    let tiles: Vec<Vec<T>> = (0..binned.tiles.len())
        .into_par_iter()
        .map(|t| {
            let (xs, ys) = binned.tile_rect(t, w, h);
            let list = &binned.tiles[t];
            let mut out = Vec::with_capacity(xs.len() * ys.len() * CHANNELS);
            for y in ys {
                for x in xs.clone() {
                    let c = composite(
                        list.iter().map(|&i| &binned.projected[i as usize]),
                        T::count(x as usize),
                        T::count(y as usize),
                        &th,
                        background,
                    );
                    out.extend_from_slice(&c);
                }
            }
            out
        })
        .collect();
    let mut data = vec![T::zero(); w as usize * h as usize * CHANNELS];
    for (t, buf) in tiles.iter().enumerate() {
        let (xs, ys) = binned.tile_rect(t, w, h);
        let tw = xs.len();
        for (row, y) in ys.enumerate() {
            let dst = (y as usize * w as usize + xs.start as usize) * CHANNELS;
            data[dst..dst + tw * CHANNELS].copy_from_slice(&buf[row * tw * CHANNELS..(row + 1) * tw * CHANNELS]);
        }
    }
    Image::from_vec_clamped(w, h, data).expect("buffer sized from camera")
}

/// Compositing weights at one pixel: `α_d Π_{j<d}(1-α_j)` for each
/// contributing Gaussian (front to back) and the residual background weight.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelWeights<T> {
    pub weights: Vec<(usize, T)>,
    pub background: T,
}

impl<T: Scalar> PixelWeights<T> {
    pub fn total(&self) -> T {
        self.weights.iter().map(|&(_, w)| w).sum::<T>() + self.background
    }
}

pub fn pixel_weights<T: Scalar>(gaussians: &[Gaussian<T>], cam: &Camera<T>, cfg: &RenderConfig, x: u32, y: u32) -> PixelWeights<T> {
    let th = Thresholds::new(cfg);
    let (px, py) = (T::count(x as usize), T::count(y as usize));
    let mut weights = Vec::new();
    let mut trans = T::one();
    for p in project_sorted(gaussians, cam, cfg) {
        if let Some(ct) = contribution(&p, px, py, &th) {
            weights.push((p.index, ct.alpha * trans));
            trans *= T::one() - ct.alpha;
        }
    }
    PixelWeights {
        weights,
        background: trans,
    }
}

struct Hit<T> {
    slot: usize,
    ct: Contribution<T>,
    trans: T,
}

/// Accumulates 2D gradients for one pixel into `grads` (indexed like `list`).
#[allow(clippy::too_many_arguments)]
fn backward_pixel<T: Scalar>(
    list: &[u32],
    projected: &[ProjectedGaussian<T>],
    px: T,
    py: T,
    th: &Thresholds<T>,
    background: [T; 3],
    upstream: &[T],
    hits: &mut Vec<Hit<T>>,
    grads: &mut [Grad2d<T>],
) {
    hits.clear();
    let mut c = [T::zero(); 3];
    let mut trans = T::one();
    for (slot, &i) in list.iter().enumerate() {
        let p = &projected[i as usize];
        if let Some(ct) = contribution(p, px, py, th) {
            let w = ct.alpha * trans;
            for ch in 0..3 {
                c[ch] += p.rgb[ch] * w;
            }
            hits.push(Hit { slot, ct, trans });
            trans *= T::one() - ct.alpha;
        }
    }
    let mut g = [T::zero(); 3];
    for ch in 0..3 {
        let v = c[ch] + background[ch] * trans;
        if v >= T::zero() && v <= T::one() {
            g[ch] = upstream[ch];
        }
    }
    if g.iter().all(|v| v.is_zero()) {
        return;
    }
    let half = T::lit(0.5);
    // color of everything behind the current entry, background included
    let mut behind = background;
    for hit in hits.iter().rev() {
        let p = &projected[list[hit.slot] as usize];
        let Contribution { alpha, falloff, dx, dy, clipped } = hit.ct;
        let gr = &mut grads[hit.slot];
        let mut dalpha = T::zero();
        for ch in 0..3 {
            gr.rgb[ch] += g[ch] * alpha * hit.trans;
            dalpha += g[ch] * hit.trans * (p.rgb[ch] - behind[ch]);
            behind[ch] = p.rgb[ch] * alpha + (T::one() - alpha) * behind[ch];
        }
        if clipped {
            continue;
        }
        gr.opacity += dalpha * falloff;
        let dpower = dalpha * alpha;
        let [a, b, cc] = p.conic;
        gr.conic[0] += -half * dpower * dx * dx;
        gr.conic[1] += -dpower * dx * dy;
        gr.conic[2] += -half * dpower * dy * dy;
        gr.mean[0] += dpower * (a * dx + b * dy);
        gr.mean[1] += dpower * (b * dx + cc * dy);
    }
}

/// Backward pass of [`render_with`]: gradient of `Σ upstream · image` with
/// respect to the flat raw parameters (59 per Gaussian).
pub fn render_backward_with<T: Scalar>(
    gaussians: &[Gaussian<T>],
    cam: &Camera<T>,
    background: [T; 3],
    grad_image: &[T],
    cfg: &RenderConfig,
) -> Result<Vec<T>> {
    let (w, h) = (cam.width, cam.height);
    let expected = w as usize * h as usize * CHANNELS;
    if grad_image.len() != expected {
        return Err(Error::Dimension {
            what: "image gradient",
            expected,
            got: grad_image.len(),
        });
    }
    if let Some(index) = grad_image.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "image gradient",
            index,
        });
    }
    let binned = bin(gaussians, cam, cfg);
    let th = Thresholds::new(cfg);
    let tile_grads: Vec<Vec<Grad2d<T>>> = (0..binned.tiles.len())
        .into_par_iter()
        .map(|t| {
            let list = &binned.tiles[t];
            let mut grads = vec![Grad2d::zero(); list.len()];
            if list.is_empty() {
                return grads;
            }
            let (xs, ys) = binned.tile_rect(t, w, h);
            let mut hits = Vec::new();
            for y in ys {
                for x in xs.clone() {
                    let off = (y as usize * w as usize + x as usize) * CHANNELS;
                    backward_pixel(
                        list,
                        &binned.projected,
                        T::count(x as usize),
                        T::count(y as usize),
                        &th,
                        background,
                        &grad_image[off..off + CHANNELS],
                        &mut hits,
                        &mut grads,
                    );
                }
            }
            grads
        })
        .collect();

    // Fixed-order reduction keeps the result independent of thread scheduling.
    let mut per = vec![Grad2d::zero(); binned.projected.len()];
    for (list, grads) in binned.tiles.iter().zip(&tile_grads) {
        for (&i, g) in list.iter().zip(grads) {
            per[i as usize].add(g);
        }
    }
    let mut slot = vec![None; gaussians.len()];
    for (pos, p) in binned.projected.iter().enumerate() {
        slot[p.index] = Some(pos);
    }
    let mut out = vec![T::zero(); gaussians.len() * PARAMS_PER_GAUSSIAN];
    out.par_chunks_mut(PARAMS_PER_GAUSSIAN).enumerate().for_each(|(k, chunk)| {
        if let Some(pos) = slot[k] {
            project_backward(&gaussians[k], cam, cfg, &per[pos], chunk);
        }
    });
    Ok(out)
}
