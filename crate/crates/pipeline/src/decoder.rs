//! The residual decoder: an MLP mapping a subject code `w` and a
//! per-Gaussian embedding `e_k` to that Gaussian's 59 parameter offsets,
//! plus its joint training with the codes and embeddings.

use std::collections::BTreeMap;
use std::path::Path;

use gsavatar_core::error::{Error, Result};
use gsavatar_core::gaussian::{OPACITY, POSITION, ROTATION, SCALE, SH};
use gsavatar_core::io::{load_model, model_hash, read_json, save_model, write_json};
use gsavatar_core::loss::{decoder_loss, LossWeights};
use gsavatar_core::optim::{train_loop, AdamState, Control, ParamGroup, Schedule, TrainStatus};
use gsavatar_core::residual::apply_residuals_backward;
use gsavatar_core::sh::SH_BASIS;
use gsavatar_core::{apply_residuals, render, render_backward, Camera, GaussianModel, Image, ResidualSet, PARAMS_PER_GAUSSIAN};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::artifact::{dtype_of, read_blob, write_blob};
use crate::Real;

const P: usize = PARAMS_PER_GAUSSIAN;
pub const DECODER_MAGIC: &[u8; 8] = b"GSADEC01";
pub const DECODER_FILE: &str = "decoder.bin";
pub const CODES_FILE: &str = "codes.json";
pub const TEMPLATE_FILE: &str = "template.json";

/// Layer sizes. The output of each parameter class is multiplied by the
/// matching `output_scale` entry (position, scale, rotation, opacity, SH
/// base color, higher SH bands). The small default for higher bands keeps
/// the decoder from explaining each training view with view-dependent
/// color, which does not carry over to new views.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderArch {
    pub w_dim: usize,
    pub e_dim: usize,
    pub hidden: usize,
    /// Sinusoid octaves used to initialize embeddings (`e_dim = 6F`).
    pub frequencies: usize,
    pub output_scale: [f64; 6],
}

impl Default for DecoderArch {
    fn default() -> Self {
        DecoderArch {
            w_dim: 64,
            e_dim: 48,
            hidden: 256,
            frequencies: 8,
            output_scale: [0.1, 0.1, 0.1, 1.0, 1.0, 0.01],
        }
    }
}

/// Offsets of each tensor in the flat parameter vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    w1w: usize,
    w1e: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    end: usize,
}

/// Hidden activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Activations<T> {
    h1: Array2<T>,
    h2: Array2<T>,
}

/// Gradients of one decoder evaluation.
#[derive(Debug, Clone)]
pub struct DecoderGrads<T> {
    pub theta: Vec<T>,
    pub w: Vec<T>,
    pub embeddings: Array2<T>,
}

impl DecoderArch {
    fn layout(&self) -> Layout {
        let (h, wd, ed) = (self.hidden, self.w_dim, self.e_dim);
        let w1w = 0;
        let w1e = w1w + h * wd;
        let b1 = w1e + h * ed;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let w3 = b2 + h;
        let b3 = w3 + P * h;
        Layout {
            w1w,
            w1e,
            b1,
            w2,
            b2,
            w3,
            b3,
            end: b3 + P,
        }
    }

    pub fn n_params(&self) -> usize {
        self.layout().end
    }

    pub fn validate(&self) -> Result<()> {
        if self.w_dim == 0 || self.e_dim == 0 || self.hidden == 0 {
            return Err(Error::validation("decoder dimensions must be positive"));
        }
        if self.output_scale.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::validation("decoder output scales must be positive"));
        }
        Ok(())
    }

    fn scale_row<T: Real>(&self) -> Array1<T> {
        let mut s = Array1::from_elem(P, T::one());
        let classes = [POSITION, SCALE, ROTATION, OPACITY..OPACITY + 1];
        for (range, &v) in classes.into_iter().zip(&self.output_scale) {
            for i in range {
                s[i] = T::lit(v);
            }
        }
        for (j, i) in SH.enumerate() {
            let dc = j % SH_BASIS == 0;
            s[i] = T::lit(self.output_scale[if dc { 4 } else { 5 }]);
        }
        s
    }

    fn check<T>(&self, theta: &[T], w: &[T], e: &ArrayView2<T>) -> Result<()> {
        let dims = [
            ("decoder parameters", self.n_params(), theta.len()),
            ("latent code", self.w_dim, w.len()),
            ("embedding width", self.e_dim, e.ncols()),
        ];
        for (what, expected, got) in dims {
            if expected != got {
                return Err(Error::Dimension { what, expected, got });
            }
        }
        Ok(())
    }

    /// Kaiming-normal hidden layers; zero output layer so a fresh decoder
    /// emits exactly zero offsets.
    pub fn init_params<T: Real>(&self, seed: u64) -> Vec<T> {
        let l = self.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = vec![T::zero(); l.end];
        let std1 = (2.0 / (self.w_dim + self.e_dim) as f64).sqrt();
        let std2 = (2.0 / self.hidden as f64).sqrt();
        let n1 = Normal::new(0.0, std1).unwrap();
        let n2 = Normal::new(0.0, std2).unwrap();
        for v in &mut p[l.w1w..l.b1] {
            *v = T::lit(n1.sample(&mut rng));
        }
        for v in &mut p[l.w2..l.b2] {
            *v = T::lit(n2.sample(&mut rng));
        }
        p
    }

    /// Offsets for every row of `e` (`K × 59`, already scaled).
    pub fn forward<T: Real>(&self, theta: &[T], w: &[T], e: ArrayView2<T>) -> Result<(Array2<T>, Activations<T>)> {
        self.check(theta, w, &e)?;
        let l = self.layout();
        let h = self.hidden;
        let mat = |a: usize, rows: usize, cols: usize| ArrayView2::from_shape((rows, cols), &theta[a..a + rows * cols]).unwrap();
        let vec = |a: usize, n: usize| ArrayView1::from(&theta[a..a + n]);
        let relu = |x: T| if x > T::zero() { x } else { T::zero() };

        // the code's share of layer 1 is the same for every Gaussian
        let a = mat(l.w1w, h, self.w_dim).dot(&ArrayView1::from(w)) + vec(l.b1, h);
        let mut h1 = e.dot(&mat(l.w1e, h, self.e_dim).t());
        h1 += &a;
        h1.mapv_inplace(relu);
        let mut h2 = h1.dot(&mat(l.w2, h, h).t());
        h2 += &vec(l.b2, h);
        h2.mapv_inplace(relu);
        let mut out = h2.dot(&mat(l.w3, P, h).t());
        out += &vec(l.b3, P);
        out *= &self.scale_row::<T>();
        Ok((out, Activations { h1, h2 }))
    }

    /// Pulls `∂L/∂out` (`K × 59`) back onto the parameters, the code and
    /// the embeddings.
    pub fn backward<T: Real>(
        &self,
        theta: &[T],
        w: &[T],
        e: ArrayView2<T>,
        act: &Activations<T>,
        d_out: ArrayView2<T>,
    ) -> Result<DecoderGrads<T>> {
        self.check(theta, w, &e)?;
        if d_out.dim() != (e.nrows(), P) {
            return Err(Error::Dimension {
                what: "decoder output gradient",
                expected: e.nrows() * P,
                got: d_out.len(),
            });
        }
        let l = self.layout();
        let h = self.hidden;
        let mat = |a: usize, rows: usize, cols: usize| ArrayView2::from_shape((rows, cols), &theta[a..a + rows * cols]).unwrap();
        let mut grad = vec![T::zero(); l.end];
        let mut put = |at: usize, v: &[T]| grad[at..at + v.len()].copy_from_slice(v);
        let gate = |g: &mut Array2<T>, act: &Array2<T>| {
            g.zip_mut_with(act, |g, &a| {
                if a <= T::zero() {
                    *g = T::zero();
                }
            })
        };

        let g3 = &d_out * &self.scale_row::<T>();
        put(l.w3, &flat(&g3.t().dot(&act.h2)));
        put(l.b3, &flat(&g3.sum_axis(Axis(0))));
        let mut g2 = g3.dot(&mat(l.w3, P, h));
        gate(&mut g2, &act.h2);
        put(l.w2, &flat(&g2.t().dot(&act.h1)));
        put(l.b2, &flat(&g2.sum_axis(Axis(0))));
        let mut g1 = g2.dot(&mat(l.w2, h, h));
        gate(&mut g1, &act.h1);
        put(l.w1e, &flat(&g1.t().dot(&e)));
        let embeddings = g1.dot(&mat(l.w1e, h, self.e_dim));
        let ga = g1.sum_axis(Axis(0));
        put(l.b1, &flat(&ga));
        let wv = ArrayView1::from(w);
        let outer = ga.view().insert_axis(Axis(1)).dot(&wv.insert_axis(Axis(0)));
        put(l.w1w, &flat(&outer));
        let dw = mat(l.w1w, h, self.w_dim).t().dot(&ga).to_vec();
        Ok(DecoderGrads {
            theta: grad,
            w: dw,
            embeddings,
        })
    }
}

/// Elements in logical (row-major) order, whatever the memory layout.
fn flat<T: Clone, D: ndarray::Dimension>(a: &ndarray::Array<T, D>) -> Vec<T> {
    a.iter().cloned().collect()
}

/// Sinusoidal embeddings of the template positions normalized to
/// `[-1, 1]³` by the template bounding box: for octave `j`, the six
/// values `sin(2^j π x̂), sin(2^j π ŷ), sin(2^j π ẑ)` then the cosines.
pub fn init_embeddings<T: Real>(template: &GaussianModel<T>, frequencies: usize) -> Result<Array2<T>> {
    let (lo, hi) = template
        .position_bounds()
        .ok_or_else(|| Error::validation("cannot embed an empty template"))?;
    let k = template.len();
    let mut e = Array2::zeros((k, 6 * frequencies));
    let pi = T::lit(std::f64::consts::PI);
    for (row, g) in e.rows_mut().into_iter().zip(template.gaussians()) {
        let mut row = row;
        let n: [T; 3] = std::array::from_fn(|i| {
            let ext = hi[i] - lo[i];
            if ext > T::zero() {
                T::lit(2.0) * (g.position[i] - lo[i]) / ext - T::one()
            } else {
                T::zero()
            }
        });
        for j in 0..frequencies {
            let f = T::lit((1u64 << j) as f64) * pi;
            for i in 0..3 {
                row[6 * j + i] = (f * n[i]).sin();
                row[6 * j + 3 + i] = (f * n[i]).cos();
            }
        }
    }
    Ok(e)
}

/// A decoder with fixed parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder<T> {
    pub arch: DecoderArch,
    pub params: Vec<T>,
}

impl<T: Real> Decoder<T> {
    pub fn new(arch: DecoderArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        Ok(Decoder {
            params: arch.init_params(seed),
            arch,
        })
    }

    pub fn from_params(arch: DecoderArch, params: Vec<T>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.n_params() {
            return Err(Error::Dimension {
                what: "decoder parameters",
                expected: arch.n_params(),
                got: params.len(),
            });
        }
        if let Some(i) = params.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "decoder parameters",
                index: i,
            });
        }
        Ok(Decoder { arch, params })
    }

    /// Offsets of one Gaussian.
    pub fn decode(&self, w: &[T], e_k: &[T]) -> Result<[T; P]> {
        let e = ArrayView2::from_shape((1, e_k.len()), e_k).unwrap();
        let (out, _) = self.arch.forward(&self.params, w, e)?;
        Ok(std::array::from_fn(|i| out[[0, i]]))
    }

    /// Offsets of all Gaussians, one per embedding row.
    pub fn decode_all(&self, w: &[T], embeddings: ArrayView2<T>) -> Result<ResidualSet<T>> {
        let (out, _) = self.arch.forward(&self.params, w, embeddings)?;
        ResidualSet::from_vec(out.into_raw_vec_and_offset().0)
    }
}

/// Everything needed to turn a code into a model.
#[derive(Debug, Clone)]
pub struct DecoderBundle<T> {
    pub decoder: Decoder<T>,
    pub embeddings: Array2<T>,
    pub template: GaussianModel<T>,
    /// Trained subject codes by subject id.
    pub codes: BTreeMap<String, Vec<T>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecoderHeader {
    pub arch: DecoderArch,
    pub w_dim: usize,
    pub e_dim: usize,
    pub k: usize,
    pub template_hash: String,
    pub dtype: String,
    pub n_params: usize,
}

impl<T: Real> DecoderBundle<T> {
    pub fn k(&self) -> usize {
        self.template.len()
    }

    pub fn decode_all(&self, w: &[T]) -> Result<ResidualSet<T>> {
        self.decoder.decode_all(w, self.embeddings.view())
    }

    /// `apply_residuals(template, decode_all(w))`
    pub fn model_for(&self, w: &[T]) -> Result<GaussianModel<T>> {
        apply_residuals(&self.template, &self.decode_all(w)?)
    }

    pub fn code(&self, id: &str) -> Result<&[T]> {
        self.codes
            .get(id)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::validation(format!("no code for subject {id}")))
    }

    pub fn template_hash(&self) -> String {
        model_hash(&self.template)
    }

    /// Writes `decoder.bin` (parameters then embeddings), `codes.json` and
    /// `template.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::validation(format!("{}: {e}", dir.display())))?;
        let header = DecoderHeader {
            arch: self.decoder.arch,
            w_dim: self.decoder.arch.w_dim,
            e_dim: self.decoder.arch.e_dim,
            k: self.k(),
            template_hash: self.template_hash(),
            dtype: dtype_of::<T>().into(),
            n_params: self.decoder.params.len(),
        };
        let mut blob = self.decoder.params.clone();
        blob.extend(self.embeddings.iter().copied());
        write_blob(dir.join(DECODER_FILE), DECODER_MAGIC, &header, &blob)?;
        let codes: BTreeMap<&String, Vec<f64>> = self.codes.iter().map(|(k, v)| (k, v.iter().map(|x| x.as_f64()).collect())).collect();
        write_json(dir.join(CODES_FILE), &codes)?;
        save_model(dir.join(TEMPLATE_FILE), &self.template)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let (header, blob): (DecoderHeader, Vec<T>) = read_blob(dir.join(DECODER_FILE), DECODER_MAGIC)?;
        let template64: GaussianModel<f64> = load_model(dir.join(TEMPLATE_FILE))?;
        let template: GaussianModel<T> = template64.cast();
        let arch = header.arch;
        if arch.w_dim != header.w_dim || arch.e_dim != header.e_dim || header.k != template.len() {
            return Err(Error::validation("decoder header is inconsistent with its template"));
        }
        let n = arch.n_params();
        if blob.len() != n + header.k * arch.e_dim {
            return Err(Error::Dimension {
                what: "decoder blob",
                expected: n + header.k * arch.e_dim,
                got: blob.len(),
            });
        }
        // the hash was taken in the artifact's own precision
        let hash = if header.dtype == "f32" {
            model_hash(&template64.cast::<f32>())
        } else {
            model_hash(&template64)
        };
        if hash != header.template_hash {
            return Err(Error::validation("template.json does not match the decoder's template hash"));
        }
        let decoder = Decoder::from_params(arch, blob[..n].to_vec())?;
        let embeddings = Array2::from_shape_vec((header.k, arch.e_dim), blob[n..].to_vec()).unwrap();
        let raw: BTreeMap<String, Vec<f64>> = read_json(dir.join(CODES_FILE))?;
        let mut codes = BTreeMap::new();
        for (id, w) in raw {
            if w.len() != arch.w_dim {
                return Err(Error::Dimension {
                    what: "stored code",
                    expected: arch.w_dim,
                    got: w.len(),
                });
            }
            codes.insert(id, w.into_iter().map(T::lit).collect());
        }
        Ok(DecoderBundle {
            decoder,
            embeddings,
            template,
            codes,
        })
    }
}

/// Multi-view data of one training subject.
#[derive(Debug, Clone)]
pub struct TrainSubject<T> {
    pub id: String,
    pub views: Vec<(Image<T>, Camera<T>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub iters: usize,
    pub seed: u64,
    pub arch: DecoderArch,
    pub lr_theta: f64,
    pub lr_codes: f64,
    pub lr_embeddings: f64,
    /// Standard deviation of the initial codes.
    pub code_init_std: f64,
    pub weights: LossWeights,
    pub background: [f64; 3],
    pub log_every: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            iters: 2000,
            seed: 0,
            arch: DecoderArch::default(),
            lr_theta: 1e-3,
            lr_codes: 1e-2,
            lr_embeddings: 1e-3,
            code_init_std: 1.0,
            weights: LossWeights::default(),
            background: [1.0; 3],
            log_every: 0,
        }
    }
}

/// Loss of one view and its gradients, for decoder parameters `theta`,
/// code `w` and embeddings `e`.
#[allow(clippy::too_many_arguments)]
pub fn view_loss<T: Real>(
    arch: &DecoderArch,
    theta: &[T],
    w: &[T],
    e: ArrayView2<T>,
    template: &GaussianModel<T>,
    target: &Image<T>,
    cam: &Camera<T>,
    background: [T; 3],
    weights: &LossWeights,
) -> Result<(T, Option<DecoderGrads<T>>)> {
    let (out, act) = arch.forward(theta, w, e)?;
    let delta = ResidualSet::from_vec(out.into_raw_vec_and_offset().0)?;
    let model = apply_residuals(template, &delta)?;
    let pred = render(&model, cam, background);
    let d_pos = delta.positions();
    let d_scale = delta.scales();
    let loss = decoder_loss(target, &pred, &d_pos, &d_scale, weights)?;
    if !loss.value.is_finite() {
        return Ok((loss.value, None));
    }
    let g_model = render_backward(&model, cam, background, &loss.grad_image)?;
    let mut g_delta = apply_residuals_backward(template, &delta, &g_model.grads)?;
    for k in 0..template.len() {
        for i in 0..3 {
            g_delta[k * P + POSITION.start + i] += loss.grad_position[3 * k + i];
            g_delta[k * P + SCALE.start + i] += loss.grad_scale[3 * k + i];
        }
    }
    let d_out = ArrayView2::from_shape((template.len(), P), &g_delta).unwrap();
    let grads = arch.backward(theta, w, e, &act, d_out)?;
    Ok((loss.value, Some(grads)))
}

#[derive(Debug, Clone)]
pub struct DecoderTraining<T> {
    pub bundle: DecoderBundle<T>,
    pub trace: Vec<T>,
    pub status: TrainStatus,
}

/// Jointly fits decoder parameters, one code per subject and the
/// embeddings, one random (subject, view) pair per step. On divergence the
/// last parameters that evaluated finitely are returned with status
/// `Diverged`.
pub fn train_decoder<T: Real>(
    subjects: &[TrainSubject<T>],
    template: &GaussianModel<T>,
    cfg: &DecoderConfig,
) -> Result<DecoderTraining<T>> {
    let arch = cfg.arch;
    arch.validate()?;
    cfg.weights.validate()?;
    if subjects.is_empty() || subjects.iter().any(|s| s.views.is_empty()) {
        return Err(Error::validation("train_decoder needs subjects with at least one view each"));
    }
    template.validate()?;
    if arch.e_dim != 6 * arch.frequencies {
        return Err(Error::validation(format!(
            "e_dim {} must equal 6 x frequencies {}",
            arch.e_dim, arch.frequencies
        )));
    }
    let k = template.len();
    let n_theta = arch.n_params();
    let n_codes = subjects.len() * arch.w_dim;
    let n_embed = k * arch.e_dim;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params: Vec<T> = arch.init_params(rng.random());
    let code_dist = Normal::new(0.0, cfg.code_init_std).map_err(|e| Error::validation(e.to_string()))?;
    params.extend((0..n_codes).map(|_| T::lit(code_dist.sample(&mut rng))));
    params.extend(init_embeddings(template, arch.frequencies)?.iter().copied());

    let groups = vec![
        ParamGroup::new("theta", 0..n_theta, cfg.lr_theta),
        ParamGroup::new("codes", n_theta..n_theta + n_codes, cfg.lr_codes),
        ParamGroup::new("embeddings", n_theta + n_codes..n_theta + n_codes + n_embed, cfg.lr_embeddings),
    ];
    let state = AdamState::new(params.len(), cfg.lr_theta).with_groups(groups)?;
    let bg = cfg.background.map(T::lit);

    let mut objective = |p: &[T], _iter: usize, rng: &mut ChaCha8Rng| -> Result<(T, Vec<T>)> {
        let i = rng.random_range(0..subjects.len());
        let (image, cam) = &subjects[i].views[rng.random_range(0..subjects[i].views.len())];
        let theta = &p[..n_theta];
        let w = &p[n_theta + i * arch.w_dim..n_theta + (i + 1) * arch.w_dim];
        let e = ArrayView2::from_shape((k, arch.e_dim), &p[n_theta + n_codes..]).unwrap();
        let (value, grads) = view_loss(&arch, theta, w, e, template, image, cam, bg, &cfg.weights)?;
        let Some(g) = grads else {
            return Ok((value, Vec::new()));
        };
        let mut grad = vec![T::zero(); p.len()];
        grad[..n_theta].copy_from_slice(&g.theta);
        grad[n_theta + i * arch.w_dim..n_theta + (i + 1) * arch.w_dim].copy_from_slice(&g.w);
        grad[n_theta + n_codes..].copy_from_slice(&flat(&g.embeddings));
        Ok((value, grad))
    };
    let schedule = Schedule {
        iters: cfg.iters,
        seed: rng.random(),
        log_every: cfg.log_every,
    };
    let out = train_loop(&mut objective, params, state, &schedule, &mut |_| Control::Continue)?;
    if out.status == TrainStatus::Diverged {
        log::warn!("decoder training diverged after {} iterations; keeping the last finite state", out.trace.len());
    }
    let p = out.params;
    let decoder = Decoder::from_params(arch, p[..n_theta].to_vec())?;
    let codes = subjects
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.clone(), p[n_theta + i * arch.w_dim..n_theta + (i + 1) * arch.w_dim].to_vec()))
        .collect();
    let embeddings = Array2::from_shape_vec((k, arch.e_dim), p[n_theta + n_codes..].to_vec()).unwrap();
    Ok(DecoderTraining {
        bundle: DecoderBundle {
            decoder,
            embeddings,
            template: template.clone(),
            codes,
        },
        trace: out.trace,
        status: out.status,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fit::init_from_landmarks;
    use crate::mesh::LandmarkMesh;

    fn small_arch() -> DecoderArch {
        DecoderArch {
            w_dim: 3,
            e_dim: 6,
            hidden: 5,
            frequencies: 1,
            ..DecoderArch::default()
        }
    }

    fn random_theta(arch: &DecoderArch, seed: u64, scale: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..arch.n_params()).map(|_| scale * rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_network_reproduces_template() {
        let m = LandmarkMesh::<f64>::uv_sphere(3, 5).unwrap();
        let t = init_from_landmarks(&m).unwrap();
        let arch = DecoderArch::default();
        let e = init_embeddings(&t, arch.frequencies).unwrap();
        let dec = Decoder::new(arch, 1).unwrap();
        let w = vec![0.7; arch.w_dim];
        let d = dec.decode_all(&w, e.view()).unwrap();
        assert!(d.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(apply_residuals(&t, &d).unwrap(), t);
    }

    #[test]
    fn one_hidden_unit_by_hand() {
        let arch = DecoderArch {
            w_dim: 1,
            e_dim: 1,
            hidden: 1,
            frequencies: 1,
            output_scale: [1.0; 6],
        };
        // [w1w, w1e, b1, w2, b2, w3 (59), b3 (59)]
        let mut p = vec![0.0; arch.n_params()];
        p[0] = 2.0;
        p[1] = -1.0;
        p[2] = 0.5;
        p[3] = 3.0;
        p[4] = -1.0;
        p[5] = 0.25; // w3 row 0
        p[5 + 59] = 0.1; // b3[0]
        p[5 + 10] = -2.0; // w3 row 10 (opacity)
        let dec = Decoder::from_params(arch, p).unwrap();
        // h1 = relu(2·1 − 1·0.5 + 0.5) = 2; h2 = relu(3·2 − 1) = 5
        let out = dec.decode(&[1.0], &[0.5]).unwrap();
        assert_eq!(out[0], 0.25 * 5.0 + 0.1);
        assert_eq!(out[10], -10.0);
        assert_eq!(out[1], 0.0);
        // negative pre-activation switches everything off except b3
        let out = dec.decode(&[-1.0], &[0.5]).unwrap();
        assert_eq!(out[0], 0.1);
    }

    #[test]
    fn batched_equals_single() {
        let arch = small_arch();
        let dec = Decoder::from_params(arch, random_theta(&arch, 3, 0.5)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let e = Array2::from_shape_fn((7, arch.e_dim), |_| rng.random_range(-1.0..1.0));
        let w = [0.3, -0.2, 0.9];
        let all = dec.decode_all(&w, e.view()).unwrap();
        for k in 0..7 {
            let one = dec.decode(&w, e.row(k).as_slice().unwrap()).unwrap();
            assert_eq!(&one[..], all.gaussian(k));
        }
    }

    #[test]
    fn embedding_values() {
        let g = |x: f64| gsavatar_core::Gaussian::with_color([x, 0.0, 0.0], [1.0; 3], [1.0, 0.0, 0.0, 0.0], 0.5, [0.5; 3]);
        // bounds x ∈ [-1, 1] so x̂ = x
        let t = GaussianModel::new(vec![g(-1.0), g(0.0), g(0.25), g(1.0), g(0.0)]).unwrap();
        let e = init_embeddings(&t, 8).unwrap();
        assert_eq!(e.ncols(), 48);
        for j in 0..8 {
            for i in 0..3 {
                assert_eq!(e[[1, 6 * j + i]], 0.0);
                assert_eq!(e[[1, 6 * j + 3 + i]], 1.0);
            }
        }
        assert!((e[[2, 6]] - 1.0).abs() < 1e-15);
        assert_eq!(e.row(1), e.row(4));
    }

    #[test]
    fn mlp_backward_matches_finite_differences() {
        let arch = small_arch();
        let theta = random_theta(&arch, 5, 0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = Array2::from_shape_fn((4, arch.e_dim), |_| rng.random_range(-1.0..1.0));
        let w = vec![0.4, -0.8, 0.1];
        let upstream = Array2::from_shape_fn((4, P), |_| rng.random_range(-1.0..1.0));
        let f = |th: &[f64], w: &[f64], e: &Array2<f64>| {
            let (o, _) = arch.forward(th, w, e.view()).unwrap();
            (&o * &upstream).sum()
        };
        let (_, act) = arch.forward(&theta, &w, e.view()).unwrap();
        let g = arch.backward(&theta, &w, e.view(), &act, upstream.view()).unwrap();
        let h = 1e-6;
        let check = |num: f64, ana: f64| assert!((num - ana).abs() <= 1e-6 * (1.0 + ana.abs()), "{num} vs {ana}");
        for i in 0..theta.len() {
            let (mut a, mut b) = (theta.clone(), theta.clone());
            a[i] += h;
            b[i] -= h;
            check((f(&a, &w, &e) - f(&b, &w, &e)) / (2.0 * h), g.theta[i]);
        }
        for i in 0..w.len() {
            let (mut a, mut b) = (w.clone(), w.clone());
            a[i] += h;
            b[i] -= h;
            check((f(&theta, &a, &e) - f(&theta, &b, &e)) / (2.0 * h), g.w[i]);
        }
        for idx in [(0, 0), (3, 5), (2, 1)] {
            let (mut a, mut b) = (e.clone(), e.clone());
            a[idx] += h;
            b[idx] -= h;
            check((f(&theta, &w, &a) - f(&theta, &w, &b)) / (2.0 * h), g.embeddings[idx]);
        }
    }

    #[test]
    fn bundle_round_trip() {
        let m = LandmarkMesh::<f64>::uv_sphere(2, 4).unwrap();
        let t = init_from_landmarks(&m).unwrap();
        let arch = DecoderArch {
            hidden: 8,
            ..DecoderArch::default()
        };
        let bundle = DecoderBundle {
            decoder: Decoder::from_params(arch, random_theta(&arch, 1, 0.1)).unwrap(),
            embeddings: init_embeddings(&t, 8).unwrap(),
            template: t,
            codes: BTreeMap::from([("s0".to_string(), vec![0.5; 64])]),
        };
        let dir = tempfile::tempdir().unwrap();
        bundle.save(dir.path()).unwrap();
        let back = DecoderBundle::<f64>::load(dir.path()).unwrap();
        assert_eq!(back.decoder, bundle.decoder);
        assert_eq!(back.embeddings, bundle.embeddings);
        assert_eq!(back.codes, bundle.codes);
        let w = vec![0.1; 64];
        assert_eq!(back.model_for(&w).unwrap(), bundle.model_for(&w).unwrap());

        // tampering with the template is detected
        let mut other = bundle.template.clone();
        other.gaussians_mut()[0].position[0] += 1.0;
        save_model(dir.path().join(TEMPLATE_FILE), &other).unwrap();
        assert!(DecoderBundle::<f64>::load(dir.path()).is_err());
    }

    #[test]
    fn dimension_errors() {
        let arch = small_arch();
        let dec = Decoder::from_params(arch, random_theta(&arch, 1, 0.1)).unwrap();
        assert!(dec.decode(&[0.0; 2], &[0.0; 6]).is_err());
        assert!(dec.decode(&[0.0; 3], &[0.0; 5]).is_err());
        assert!(Decoder::from_params(arch, vec![0.0; 3]).is_err());
    }
}
