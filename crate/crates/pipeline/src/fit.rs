//! Per-subject models: landmark-anchored initialization and multi-view
//! fitting with a fixed Gaussian count.

use gsavatar_core::error::{Error, Result};
use gsavatar_core::gaussian::{OPACITY, POSITION, ROTATION, SCALE};
use gsavatar_core::linalg::{add3, quat_from_z_to, scale3};
use gsavatar_core::loss::{decoder_loss, LossWeights};
use gsavatar_core::metrics::psnr;
use gsavatar_core::optim::{train_loop, AdamState, Control, ParamGroup, Schedule, TrainStatus};
use gsavatar_core::residual::apply_residuals_backward;
use gsavatar_core::sh::{dc_for_color, SH_BASIS};
use gsavatar_core::{
    apply_residuals, render, render_backward, Camera, Gaussian, GaussianModel, Image, ResidualSet, Scalar,
    PARAMS_PER_GAUSSIAN,
};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::mesh::LandmarkMesh;

/// Second Gaussian of each vertex sits this many mean edge lengths out
/// along the normal.
pub const NORMAL_OFFSET: f64 = 0.25;
/// In-plane scale as a fraction of the mean incident edge length.
pub const TANGENT_SCALE: f64 = 0.5;
/// Normal scale relative to the in-plane scale.
pub const NORMAL_SCALE_RATIO: f64 = 0.1;
pub const INIT_OPACITY: f64 = 0.5;

/// Two Gaussians per vertex: `2v` on the surface and `2v + 1` pushed out
/// along the normal. Each is a flat disc whose local z axis is the vertex
/// normal, mid-gray, opacity 0.5.
pub fn init_from_landmarks<T: Scalar>(mesh: &LandmarkMesh<T>) -> Result<GaussianModel<T>> {
    mesh.validate()?;
    let edge = mesh.mean_incident_edge()?;
    let gray = [T::lit(0.5); 3];
    let mut gaussians = Vec::with_capacity(2 * mesh.len());
    for ((&p, &n), &e) in mesh.vertices.iter().zip(&mesh.normals).zip(&edge) {
        let t = e * T::lit(TANGENT_SCALE);
        let scale = [t, t, t * T::lit(NORMAL_SCALE_RATIO)];
        let rotation = quat_from_z_to(n);
        let opacity = T::lit(INIT_OPACITY);
        gaussians.push(Gaussian::with_color(p, scale, rotation, opacity, gray));
        let outer = add3(p, scale3(n, e * T::lit(NORMAL_OFFSET)));
        gaussians.push(Gaussian::with_color(outer, scale, rotation, opacity, gray));
    }
    debug_assert!(gaussians.iter().all(|g| g.sh[0] == dc_for_color(T::lit(0.5))));
    GaussianModel::new(gaussians)
}

/// Learning rates per parameter class. Position decays exponentially to
/// `position_final` over the run.
///
/// Eight views at 128 px observe fewer values than a 10k-Gaussian model has
/// parameters, so everything except the base color moves slowly; faster
/// geometry, opacity and view-dependent color memorize the training views.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitRates {
    pub position: f64,
    pub position_final: f64,
    pub scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub sh_dc: f64,
    pub sh_rest: f64,
}

impl Default for FitRates {
    fn default() -> Self {
        FitRates {
            position: 4e-5,
            position_final: 4e-7,
            scale: 1e-3,
            rotation: 2e-4,
            opacity: 5e-3,
            sh_dc: 2.5e-3,
            sh_rest: 2.5e-5,
        }
    }
}

impl FitRates {
    /// Groups over a flat `59·K` vector, each repeating per Gaussian.
    pub fn groups(&self, decay_steps: usize) -> Vec<ParamGroup> {
        let p = PARAMS_PER_GAUSSIAN;
        let mut groups = vec![
            ParamGroup::new("position", POSITION, self.position)
                .with_decay(self.position_final, decay_steps)
                .repeating(p),
            ParamGroup::new("scale", SCALE, self.scale).repeating(p),
            ParamGroup::new("rotation", ROTATION, self.rotation).repeating(p),
            ParamGroup::new("opacity", OPACITY..OPACITY + 1, self.opacity).repeating(p),
        ];
        for ch in 0..3 {
            let dc = 11 + ch * SH_BASIS;
            groups.push(ParamGroup::new(&format!("sh_dc_{ch}"), dc..dc + 1, self.sh_dc).repeating(p));
            groups.push(ParamGroup::new(&format!("sh_rest_{ch}"), dc + 1..dc + SH_BASIS, self.sh_rest).repeating(p));
        }
        groups
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub iters: usize,
    pub seed: u64,
    pub rates: FitRates,
    /// Only the photometric weights matter here; the residual penalties
    /// are ignored.
    pub weights: LossWeights,
    pub background: [f64; 3],
    pub log_every: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            iters: 2000,
            seed: 0,
            rates: FitRates::default(),
            weights: LossWeights {
                reg_position: 0.0,
                reg_scale: 0.0,
                ..LossWeights::default()
            },
            background: [1.0; 3],
            log_every: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult<T> {
    pub model: GaussianModel<T>,
    pub trace: Vec<T>,
    /// Mean PSNR over the training views after fitting.
    pub final_psnr: f64,
}

/// A training view.
pub struct View<'a, T> {
    pub image: &'a Image<T>,
    pub camera: &'a Camera<T>,
}

/// Optimizes per-Gaussian offsets from `init` against randomly drawn
/// views. The count and order of Gaussians never change.
pub fn fit_subject<T: Scalar>(views: &[View<'_, T>], init: &GaussianModel<T>, cfg: &FitConfig) -> Result<FitResult<T>> {
    if views.len() < 2 {
        return Err(Error::validation(format!("fit_subject needs at least 2 views, got {}", views.len())));
    }
    init.validate()?;
    for (i, v) in views.iter().enumerate() {
        v.camera.validate()?;
        if v.image.width() != v.camera.width || v.image.height() != v.camera.height {
            return Err(Error::validation(format!("view {i}: image size does not match its camera")));
        }
    }
    cfg.weights.validate()?;
    let weights = LossWeights {
        reg_position: 0.0,
        reg_scale: 0.0,
        ..cfg.weights
    };
    let bg = cfg.background.map(T::lit);
    let n = init.len() * PARAMS_PER_GAUSSIAN;
    let state = AdamState::new(n, cfg.rates.sh_dc).with_groups(cfg.rates.groups(cfg.iters))?;

    let mut objective = |params: &[T], _iter: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Result<(T, Vec<T>)> {
        let view = &views[rng.random_range(0..views.len())];
        let delta = ResidualSet::from_vec(params.to_vec())?;
        let model = apply_residuals(init, &delta)?;
        let pred = render(&model, view.camera, bg);
        let loss = decoder_loss(view.image, &pred, &[], &[], &weights)?;
        if !loss.value.is_finite() {
            return Ok((loss.value, Vec::new()));
        }
        let g = render_backward(&model, view.camera, bg, &loss.grad_image)?;
        let grad = apply_residuals_backward(init, &delta, &g.grads)?;
        Ok((loss.value, grad))
    };
    let schedule = Schedule {
        iters: cfg.iters,
        seed: cfg.seed,
        log_every: cfg.log_every,
    };
    let out = train_loop(&mut objective, vec![T::zero(); n], state, &schedule, &mut |_| Control::Continue)?;
    if out.status == TrainStatus::Diverged {
        return Err(Error::validation(format!(
            "subject fit diverged after {} iterations (last finite loss {:?})",
            out.trace.len(),
            out.trace.last().map(|v| v.as_f64())
        )));
    }
    let model = apply_residuals(init, &ResidualSet::from_vec(out.params)?)?;
    let final_psnr = mean_psnr(&model, views, bg)?;
    let model = model
        .with_metadata("iters", cfg.iters)
        .with_metadata("final_psnr", if final_psnr.is_finite() { final_psnr } else { 1e9 });
    Ok(FitResult {
        model,
        trace: out.trace,
        final_psnr,
    })
}

/// Mean PSNR of `model` over `views`.
pub fn mean_psnr<T: Scalar>(model: &GaussianModel<T>, views: &[View<'_, T>], bg: [T; 3]) -> Result<f64> {
    let mut sum = 0.0;
    for v in views {
        sum += psnr(v.image, &render(model, v.camera, bg))?.as_f64();
    }
    Ok(sum / views.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use gsavatar_core::linalg::{dot3, quat_to_rotation};

    fn grid_mesh(n: usize) -> LandmarkMesh<f64> {
        // unit-spaced n×n grid in the xy plane, normals +z
        let mut vertices = Vec::new();
        for j in 0..n {
            for i in 0..n {
                vertices.push([i as f64, j as f64, 0.0]);
            }
        }
        let mut edges = Vec::new();
        for j in 0..n {
            for i in 0..n {
                let v = (j * n + i) as u32;
                if i + 1 < n {
                    edges.push([v, v + 1]);
                }
                if j + 1 < n {
                    edges.push([v, v + n as u32]);
                }
            }
        }
        LandmarkMesh {
            normals: vec![[0.0, 0.0, 1.0]; vertices.len()],
            vertices,
            edges,
            faces: Vec::new(),
        }
    }

    #[test]
    fn two_gaussians_per_vertex() {
        let m = LandmarkMesh::<f64>::uv_sphere(65, 78).unwrap();
        let g = init_from_landmarks(&m).unwrap();
        assert_eq!(g.len(), 10_144);
        g.validate().unwrap();
    }

    #[test]
    fn unit_grid_scales_and_identity_rotation() {
        let g = init_from_landmarks(&grid_mesh(4)).unwrap();
        for (k, gs) in g.gaussians().iter().enumerate() {
            assert_eq!(gs.scale, [0.5, 0.5, 0.05]);
            assert_eq!(gs.rotation, [1.0, 0.0, 0.0, 0.0]);
            assert_eq!(gs.opacity, 0.5);
            assert!((gs.sh[0] * gsavatar_core::sh::SH_C0 - 0.5).abs() < 1e-15);
            assert!(gs.sh[1..16].iter().all(|&c| c == 0.0));
            let expect_z = if k % 2 == 0 { 0.0 } else { 0.25 };
            assert_eq!(gs.position[2], expect_z);
        }
    }

    #[test]
    fn local_z_follows_normal() {
        let m = LandmarkMesh::<f64>::uv_sphere(5, 8).unwrap();
        let g = init_from_landmarks(&m).unwrap();
        for (v, n) in m.normals.iter().enumerate() {
            let r = quat_to_rotation(g.gaussians()[2 * v].rotation);
            let z = [r[0][2], r[1][2], r[2][2]];
            assert!((dot3(z, *n) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn isolated_vertex_errors() {
        let mut m = grid_mesh(2);
        m.vertices.push([9.0, 9.0, 0.0]);
        m.normals.push([0.0, 0.0, 1.0]);
        assert!(init_from_landmarks(&m).is_err());
    }

    #[test]
    fn rate_groups_cover_every_parameter_once() {
        let groups = FitRates::default().groups(100);
        let s = AdamState::<f64>::new(3 * PARAMS_PER_GAUSSIAN, 1.0).with_groups(groups.clone()).unwrap();
        let covered: usize = groups.iter().map(|g| g.indices(s.len()).count()).sum();
        assert_eq!(covered, 3 * PARAMS_PER_GAUSSIAN);
    }

    fn tiny_scene() -> (GaussianModel<f64>, Vec<Camera<f64>>) {
        let m = LandmarkMesh::<f64>::uv_sphere(4, 6).unwrap();
        let mut g = init_from_landmarks(&m).unwrap();
        for (k, gs) in g.gaussians_mut().iter_mut().enumerate() {
            gs.sh[0] += 0.3 * ((k as f64) * 0.7).sin();
        }
        let cams = [-40.0, 0.0, 40.0]
            .iter()
            .map(|&az| Camera::orbit(24, 24, 30.0, [0.0; 3], az, 10.0, 4.0).unwrap())
            .collect();
        (g, cams)
    }

    #[test]
    fn ground_truth_init_is_a_fixed_point() {
        let (gt, cams) = tiny_scene();
        let images: Vec<_> = cams.iter().map(|c| render(&gt, c, [1.0; 3])).collect();
        let views: Vec<_> = images.iter().zip(&cams).map(|(image, camera)| View { image, camera }).collect();
        let cfg = FitConfig {
            iters: 20,
            ..FitConfig::default()
        };
        let out = fit_subject(&views, &gt, &cfg).unwrap();
        assert!(out.trace.iter().all(|&l| l < 1e-9), "{:?}", &out.trace[..3]);
        let a = gsavatar_core::flatten_params(&gt);
        let b = gsavatar_core::flatten_params(&out.model);
        let drift = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(drift < 1e-3, "drift {drift}");
    }

    #[test]
    fn fitting_improves_on_init() {
        let (gt, cams) = tiny_scene();
        let images: Vec<_> = cams.iter().map(|c| render(&gt, c, [1.0; 3])).collect();
        let views: Vec<_> = images.iter().zip(&cams).map(|(image, camera)| View { image, camera }).collect();
        let m = LandmarkMesh::<f64>::uv_sphere(4, 6).unwrap();
        let init = init_from_landmarks(&m).unwrap();
        let before = mean_psnr(&init, &views, [1.0; 3]).unwrap();
        let cfg = FitConfig {
            iters: 150,
            ..FitConfig::default()
        };
        let out = fit_subject(&views, &init, &cfg).unwrap();
        assert_eq!(out.model.len(), init.len());
        assert!(out.final_psnr > before + 3.0, "{before} -> {}", out.final_psnr);
    }

    #[test]
    fn needs_two_views() {
        let (gt, cams) = tiny_scene();
        let img = render(&gt, &cams[0], [1.0; 3]);
        let v = [View {
            image: &img,
            camera: &cams[0],
        }];
        assert!(fit_subject(&v, &gt, &FitConfig::default()).is_err());
    }
}
