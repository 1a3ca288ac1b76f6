//! The template: a parameter-wise average of corresponding subject models.

use gsavatar_core::error::{Error, Result};
use gsavatar_core::io::model_hash;
use gsavatar_core::linalg::{dot3, quat_normalize, sub3};
use gsavatar_core::residual::OPACITY_CLAMP;
use gsavatar_core::sh::SH_COEFFS;
use gsavatar_core::{Gaussian, GaussianModel, Scalar};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Averages `models` Gaussian by Gaussian. Position, scale, opacity and SH
/// are arithmetic means; opacity is then clamped to
/// `[1e-4, 1 - 1e-4]`. Quaternions are flipped onto the hemisphere of the
/// first model's quaternion, averaged and renormalized, so the result for
/// rotations depends on which model comes first.
pub fn build_template<T: Scalar>(models: &[GaussianModel<T>]) -> Result<GaussianModel<T>> {
    let first = models.first().ok_or_else(|| Error::validation("build_template needs at least one model"))?;
    let k = first.len();
    for (i, m) in models.iter().enumerate() {
        if m.len() != k {
            return Err(Error::validation(format!("model {i} has {} Gaussians, expected {k}", m.len())));
        }
        m.validate()?;
    }
    let n = T::count(models.len());
    let lo = T::lit(OPACITY_CLAMP);
    let hi = T::one() - lo;
    let gaussians = (0..k)
        .into_par_iter()
        .map(|g| {
            let reference = first.gaussians()[g].rotation;
            let mut pos = [T::zero(); 3];
            let mut scale = [T::zero(); 3];
            let mut rot = [T::zero(); 4];
            let mut opacity = T::zero();
            let mut sh = [T::zero(); SH_COEFFS];
            for m in models {
                let x = &m.gaussians()[g];
                for i in 0..3 {
                    pos[i] += x.position[i];
                    scale[i] += x.scale[i];
                }
                let dot: T = (0..4).map(|i| x.rotation[i] * reference[i]).sum();
                let sign = if dot < T::zero() { -T::one() } else { T::one() };
                for i in 0..4 {
                    rot[i] += sign * x.rotation[i];
                }
                opacity += x.opacity;
                for (s, &c) in sh.iter_mut().zip(&x.sh) {
                    *s += c;
                }
            }
            let rotation = quat_normalize(rot.map(|v| v / n))
                .ok_or_else(|| Error::validation(format!("Gaussian {g}: aligned quaternions cancel out")))?;
            Ok(Gaussian {
                position: pos.map(|v| v / n),
                scale: scale.map(|v| v / n),
                rotation,
                opacity: (opacity / n).max(lo).min(hi),
                sh: sh.map(|v| v / n),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let hashes: Vec<String> = models.iter().map(model_hash).collect();
    Ok(GaussianModel::new(gaussians)?
        .with_metadata("n_subjects", models.len())
        .with_metadata("source_hashes", hashes))
}

/// Summary of one parameter class's per-Gaussian residual norms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub rms: f64,
    pub max: f64,
}

impl Spread {
    fn from_values(v: &[f64]) -> Self {
        if v.is_empty() {
            return Spread::default();
        }
        let n = v.len() as f64;
        Spread {
            mean: v.iter().sum::<f64>() / n,
            rms: (v.iter().map(|x| x * x).sum::<f64>() / n).sqrt(),
            max: v.iter().copied().fold(0.0, f64::max),
        }
    }
}

/// Per-class distributions of `‖param − template‖` over all models and
/// Gaussians. Scales are compared in log space and quaternions up to sign.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TemplateStats {
    pub n_models: usize,
    pub position: Spread,
    pub log_scale: Spread,
    pub rotation: Spread,
    pub opacity: Spread,
    pub sh: Spread,
}

pub fn template_stats<T: Scalar>(models: &[GaussianModel<T>], template: &GaussianModel<T>) -> Result<TemplateStats> {
    let mut pos = Vec::new();
    let mut scale = Vec::new();
    let mut rot = Vec::new();
    let mut opa = Vec::new();
    let mut sh = Vec::new();
    for (i, m) in models.iter().enumerate() {
        if m.len() != template.len() {
            return Err(Error::validation(format!("model {i} does not match the template size")));
        }
        for (x, t) in m.gaussians().iter().zip(template.gaussians()) {
            let f = |v: [T; 3]| v.map(|c| c.as_f64());
            let d = sub3(f(x.position), f(t.position));
            pos.push(dot3(d, d).sqrt());
            let ls = [0, 1, 2].map(|j| x.scale[j].as_f64().ln() - t.scale[j].as_f64().ln());
            scale.push(dot3(ls, ls).sqrt());
            let q = |s: f64| (0..4).map(|j| (x.rotation[j].as_f64() - s * t.rotation[j].as_f64()).powi(2)).sum::<f64>();
            rot.push(q(1.0).min(q(-1.0)).sqrt());
            opa.push((x.opacity - t.opacity).abs().as_f64());
            sh.push(x.sh.iter().zip(&t.sh).map(|(a, b)| (*a - *b).as_f64().powi(2)).sum::<f64>().sqrt());
        }
    }
    Ok(TemplateStats {
        n_models: models.len(),
        position: Spread::from_values(&pos),
        log_scale: Spread::from_values(&scale),
        rotation: Spread::from_values(&rot),
        opacity: Spread::from_values(&opa),
        sh: Spread::from_values(&sh),
    })
}

/// A template with the same Gaussian count but random parameters:
/// positions uniform in the bounding box of `like`, random rotations and
/// colors, and a scale and opacity shared by all Gaussians. Used as the
/// baseline against the averaged template.
pub fn random_template<T: Scalar>(like: &GaussianModel<T>, seed: u64) -> Result<GaussianModel<T>> {
    let (lo, hi) = like
        .position_bounds()
        .ok_or_else(|| Error::validation("random_template needs a non-empty model"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let unit = Uniform::new(0.0, 1.0).map_err(|e| Error::validation(e.to_string()))?;
    let extent = (0..3).map(|i| (hi[i] - lo[i]).as_f64()).fold(0.0, f64::max);
    let s = extent / (like.len() as f64).sqrt() * 0.5;
    let gaussians = (0..like.len())
        .map(|_| {
            let position = [0, 1, 2].map(|i| lo[i] + (hi[i] - lo[i]) * T::lit(unit.sample(&mut rng)));
            let q = [0; 4].map(|_| normal.sample(&mut rng));
            let rotation = quat_normalize(q.map(T::lit)).unwrap_or([T::one(), T::zero(), T::zero(), T::zero()]);
            let rgb = [0; 3].map(|_| T::lit(unit.sample(&mut rng)));
            Gaussian::with_color(position, [T::lit(s); 3], rotation, T::lit(0.5), rgb)
        })
        .collect();
    Ok(GaussianModel::new(gaussians)?.with_metadata("random_seed", seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use gsavatar_core::linalg::{quat_to_rotation, transpose3};
    use gsavatar_core::{assemble_covariance, flatten_params};
    use proptest::prelude::*;

    fn model(seed: u64, k: usize) -> GaussianModel<f64> {
        let like = GaussianModel::new(vec![Gaussian::with_color([0.0; 3], [1.0; 3], [1.0, 0.0, 0.0, 0.0], 0.5, [0.5; 3]), Gaussian::with_color([1.0; 3], [1.0; 3], [1.0, 0.0, 0.0, 0.0], 0.5, [0.5; 3])]).unwrap();
        let mut m = random_template(&like, seed).unwrap();
        while m.len() < k {
            let extra = random_template(&like, seed + 1000 + m.len() as u64).unwrap();
            let mut g = m.gaussians().to_vec();
            g.extend_from_slice(extra.gaussians());
            m = GaussianModel::new(g).unwrap();
        }
        GaussianModel::new(m.gaussians()[..k].to_vec()).unwrap()
    }

    #[test]
    fn single_model_is_its_own_template() {
        let m = model(1, 6);
        let t = build_template(std::slice::from_ref(&m)).unwrap();
        let (a, b) = (flatten_params(&m), flatten_params(&t));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
        assert_eq!(t.metadata["n_subjects"], 1);
    }

    #[test]
    fn mean_position() {
        let mut a = model(2, 1);
        let mut b = a.clone();
        a.gaussians_mut()[0].position = [0.0; 3];
        b.gaussians_mut()[0].position = [2.0, 0.0, 0.0];
        let t = build_template(&[a, b]).unwrap();
        assert_eq!(t.gaussians()[0].position, [1.0, 0.0, 0.0]);
    }

    #[test]
    fn antipodal_quaternions_average_to_q() {
        let a = model(3, 4);
        let mut b = a.clone();
        for g in b.gaussians_mut() {
            g.rotation = g.rotation.map(|v| -v);
        }
        let t = build_template(&[a.clone(), b]).unwrap();
        for (x, y) in a.gaussians().iter().zip(t.gaussians()) {
            for i in 0..4 {
                assert!((x.rotation[i] - y.rotation[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn small_rotation_average_matches_matrix_average() {
        // two rotations ±ε about z: both averages give the identity
        let e = 0.1f64;
        let mk = |ang: f64| {
            let mut m = model(4, 1);
            m.gaussians_mut()[0].rotation = [(ang / 2.0).cos(), 0.0, 0.0, (ang / 2.0).sin()];
            m
        };
        let t = build_template(&[mk(e), mk(-e)]).unwrap();
        let r = quat_to_rotation(t.gaussians()[0].rotation);
        let ra = quat_to_rotation(mk(e).gaussians()[0].rotation);
        let rb = quat_to_rotation(mk(-e).gaussians()[0].rotation);
        let mean: Vec<f64> = (0..9).map(|i| 0.5 * (ra[i / 3][i % 3] + rb[i / 3][i % 3])).collect();
        // projecting the matrix mean back to a rotation gives diag(1,1,1)
        for i in 0..3 {
            assert!((r[i][i] - 1.0).abs() < 1e-12);
            assert!((mean[i * 3 + i] - if i == 2 { 1.0 } else { e.cos() }).abs() < 1e-12);
        }
    }

    #[test]
    fn opacity_is_clamped() {
        let mut a = model(5, 1);
        a.gaussians_mut()[0].opacity = 1e-6;
        let t = build_template(&[a.clone(), a]).unwrap();
        assert_eq!(t.gaussians()[0].opacity, 1e-4);
    }

    #[test]
    fn size_mismatch_and_empty() {
        assert!(build_template::<f64>(&[]).is_err());
        assert!(build_template(&[model(1, 2), model(1, 3)]).is_err());
    }

    #[test]
    fn stats_identical_models_are_zero() {
        let m = model(6, 5);
        let t = build_template(&[m.clone(), m.clone(), m.clone()]).unwrap();
        let s = template_stats(&[m.clone(), m], &t).unwrap();
        assert!(s.position.max < 1e-12 && s.sh.max < 1e-12 && s.rotation.max < 1e-12);
    }

    #[test]
    fn stats_two_models_half_distance() {
        let a = model(7, 3);
        let mut b = a.clone();
        for g in b.gaussians_mut() {
            g.position[1] += 0.4;
        }
        let t = build_template(&[a.clone(), b.clone()]).unwrap();
        let s = template_stats(&[a, b], &t).unwrap();
        assert!((s.position.mean - 0.2).abs() < 1e-12);
        assert!((s.position.max - 0.2).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn template_is_valid_and_order_free(seeds in proptest::collection::vec(0u64..1000, 1..5)) {
            let models: Vec<_> = seeds.iter().map(|&s| model(s, 4)).collect();
            let t = build_template(&models).unwrap();
            t.validate().unwrap();
            let mut rev = models.clone();
            rev.reverse();
            let r = build_template(&rev).unwrap();
            for (x, y) in t.gaussians().iter().zip(r.gaussians()) {
                for i in 0..3 {
                    prop_assert!((x.position[i] - y.position[i]).abs() < 1e-12);
                    prop_assert!((x.scale[i] - y.scale[i]).abs() < 1e-12);
                }
                prop_assert!((x.opacity - y.opacity).abs() < 1e-12);
                // the covariance is a valid PSD matrix
                let c = assemble_covariance(x.rotation, x.scale).unwrap();
                let ct = transpose3(&c);
                prop_assert!((0..3).all(|i| (0..3).all(|j| (c[i][j] - ct[i][j]).abs() < 1e-12)));
            }
        }
    }
}
