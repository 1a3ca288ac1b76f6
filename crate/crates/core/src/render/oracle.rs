use crate::camera::Camera;
use crate::gaussian::Gaussian;
use crate::image::{Image, CHANNELS};
use crate::Scalar;

use super::raster::depth_order;
use super::{project_gaussian_with, RenderConfig};

/// Reference renderer: no tiles, no threads, no global sort. Every pixel
/// tests every projected Gaussian and sorts its own hits by depth.
pub fn render_oracle<T: Scalar>(gaussians: &[Gaussian<T>], cam: &Camera<T>, background: [T; 3], cfg: &RenderConfig) -> Image<T> {
    let projected: Vec<_> = gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, g)| project_gaussian_with(i, g, cam, cfg))
        .collect();
    let alpha_max = T::lit(cfg.alpha_max);
    let alpha_min = T::lit(cfg.alpha_min);
    let cutoff = T::lit(cfg.sigma_cutoff * cfg.sigma_cutoff);
    let mut data = Vec::with_capacity(cam.pixel_count() * CHANNELS);
    let mut hits = Vec::new();
    for y in 0..cam.height {
        for x in 0..cam.width {
            let px = T::count(x as usize);
            let py = T::count(y as usize);
            hits.clear();
            for p in &projected {
                let dx = px - p.mean2d[0];
                let dy = py - p.mean2d[1];
                let maha = p.conic[0] * dx * dx + T::lit(2.0) * p.conic[1] * dx * dy + p.conic[2] * dy * dy;
                if !(maha <= cutoff) {
                    continue;
                }
                let alpha = p.opacity * (T::lit(-0.5) * maha).exp();
                if alpha < alpha_min {
                    continue;
                }
                hits.push((p, alpha.min(alpha_max)));
            }
            hits.sort_by(|a, b| depth_order(a.0, b.0));
            let mut c = [T::zero(); 3];
            let mut trans = T::one();
            for (p, alpha) in &hits {
                let w = *alpha * trans;
                for ch in 0..3 {
                    c[ch] += p.rgb[ch] * w;
                }
                trans *= T::one() - *alpha;
            }
            for ch in 0..3 {
                data.push(c[ch] + background[ch] * trans);
            }
        }
    }
    Image::from_vec_clamped(cam.width, cam.height, data).expect("buffer sized from camera")
}
