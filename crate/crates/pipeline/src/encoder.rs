//! Image → latent code: a feature extractor (by default a small strided
//! convolutional network trained from scratch) followed by a two-layer
//! projection head, trained to regress the decoder's frozen subject codes.

use std::collections::BTreeMap;
use std::path::Path;

use gsavatar_core::error::{Error, Result};
use gsavatar_core::io::hash_bytes;
use gsavatar_core::loss::encoder_loss;
use gsavatar_core::optim::{train_loop, AdamState, Control, Schedule, TrainStatus};
use gsavatar_core::Image;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::{dtype_of, read_blob, write_blob};
use crate::Real;

pub const ENCODER_MAGIC: &[u8; 8] = b"GSAENC01";

/// Anything that turns an image into a fixed-length feature vector.
pub trait FeatureExtractor<T> {
    fn f_dim(&self) -> usize;
    fn features(&self, image: &Image<T>) -> Result<Vec<T>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderArch {
    /// Output channels of the 3×3 stride-2 conv blocks; the last one is the
    /// feature dimension.
    pub channels: Vec<usize>,
    pub head_hidden: usize,
    pub w_dim: usize,
    pub input_res: u32,
}

impl Default for EncoderArch {
    fn default() -> Self {
        EncoderArch {
            channels: vec![16, 32, 64, 128],
            head_hidden: 128,
            w_dim: 64,
            input_res: 128,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvShape {
    c_in: usize,
    c_out: usize,
    h_in: usize,
    h_out: usize,
    w_off: usize,
    b_off: usize,
}

impl EncoderArch {
    pub fn f_dim(&self) -> usize {
        *self.channels.last().unwrap_or(&3)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) || self.head_hidden == 0 || self.w_dim == 0 {
            return Err(Error::validation("encoder dimensions must be positive"));
        }
        if self.input_res < 1 << self.channels.len() {
            return Err(Error::validation("encoder input_res too small for its conv depth"));
        }
        Ok(())
    }

    fn convs(&self) -> Vec<ConvShape> {
        let mut out = Vec::new();
        let (mut c_in, mut h, mut off) = (3, self.input_res as usize, 0);
        for &c_out in &self.channels {
            let h_out = (h - 1) / 2 + 1;
            out.push(ConvShape {
                c_in,
                c_out,
                h_in: h,
                h_out,
                w_off: off,
                b_off: off + c_out * 9 * c_in,
            });
            off += c_out * 9 * c_in + c_out;
            c_in = c_out;
            h = h_out;
        }
        out
    }

    /// `(hidden W, hidden b, out W, out b)` offsets and the total length.
    fn head(&self) -> ([usize; 4], usize) {
        let start = self.convs().last().map(|c| c.b_off + c.c_out).unwrap_or(0);
        let (f, hh, w) = (self.f_dim(), self.head_hidden, self.w_dim);
        let o = [start, start + hh * f, start + hh * f + hh, start + hh * f + hh + w * hh];
        (o, o[3] + w)
    }

    pub fn n_params(&self) -> usize {
        self.head().1
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> Vec<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = vec![T::zero(); self.n_params()];
        let fill = |p: &mut [T], fan_in: usize, rng: &mut ChaCha8Rng| {
            let n = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
            for v in p {
                *v = T::lit(n.sample(rng));
            }
        };
        for c in self.convs() {
            fill(&mut p[c.w_off..c.b_off], 9 * c.c_in, &mut rng);
        }
        let (o, _) = self.head();
        fill(&mut p[o[0]..o[1]], self.f_dim(), &mut rng);
        fill(&mut p[o[2]..o[3]], self.head_hidden, &mut rng);
        p
    }

    /// Resamples to `input_res` and centers around zero. The result is
    /// `(res², 3)`, rows in raster order.
    pub fn preprocess<T: Real>(&self, image: &Image<T>) -> Array2<T> {
        let r = self.input_res;
        let img = if image.width() == r && image.height() == r {
            image.clone()
        } else {
            image.resize_bilinear(r, r)
        };
        let half = T::lit(0.5);
        Array2::from_shape_vec((r as usize * r as usize, 3), img.data().iter().map(|&v| v - half).collect()).unwrap()
    }

    fn forward_input<T: Real>(&self, theta: &[T], x: &Array2<T>) -> Result<Trace<T>> {
        if theta.len() != self.n_params() {
            return Err(Error::Dimension {
                what: "encoder parameters",
                expected: self.n_params(),
                got: theta.len(),
            });
        }
        let mut cols = Vec::new();
        let mut acts = Vec::new();
        let mut cur = x.clone();
        for c in self.convs() {
            let col = im2col(&cur, c.h_in, c.c_in, c.h_out);
            let wmat = ArrayView2::from_shape((c.c_out, 9 * c.c_in), &theta[c.w_off..c.b_off]).unwrap();
            let mut y = col.dot(&wmat.t());
            y += &ArrayView1::from(&theta[c.b_off..c.b_off + c.c_out]);
            y.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
            cols.push(col);
            acts.push(y.clone());
            cur = y;
        }
        let feat = cur.mean_axis(Axis(0)).unwrap();
        let (o, _) = self.head();
        let (f, hh, wd) = (self.f_dim(), self.head_hidden, self.w_dim);
        let h1w = ArrayView2::from_shape((hh, f), &theta[o[0]..o[1]]).unwrap();
        let mut hid = h1w.dot(&feat) + ArrayView1::from(&theta[o[1]..o[2]]);
        hid.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
        let h2w = ArrayView2::from_shape((wd, hh), &theta[o[2]..o[3]]).unwrap();
        let code = h2w.dot(&hid) + ArrayView1::from(&theta[o[3]..o[3] + wd]);
        Ok(Trace {
            cols,
            acts,
            feat,
            hid,
            code,
        })
    }

    /// Gradient of `⟨d_code, code⟩` with respect to the parameters.
    fn backward<T: Real>(&self, theta: &[T], tr: &Trace<T>, d_code: &[T]) -> Vec<T> {
        let mut g = vec![T::zero(); theta.len()];
        let (o, _) = self.head();
        let (f, hh, wd) = (self.f_dim(), self.head_hidden, self.w_dim);
        let dc = ArrayView1::from(d_code);
        let outer = |a: ArrayView1<T>, b: ArrayView1<T>| a.insert_axis(Axis(1)).dot(&b.insert_axis(Axis(0)));
        g[o[2]..o[3]].copy_from_slice(&outer(dc, tr.hid.view()).iter().cloned().collect::<Vec<_>>());
        g[o[3]..o[3] + wd].copy_from_slice(d_code);
        let h2w = ArrayView2::from_shape((wd, hh), &theta[o[2]..o[3]]).unwrap();
        let mut dh = h2w.t().dot(&dc);
        dh.zip_mut_with(&tr.hid, |d, &a| {
            if a <= T::zero() {
                *d = T::zero()
            }
        });
        g[o[0]..o[1]].copy_from_slice(&outer(dh.view(), tr.feat.view()).iter().cloned().collect::<Vec<_>>());
        g[o[1]..o[2]].copy_from_slice(&dh.iter().cloned().collect::<Vec<_>>());
        let h1w = ArrayView2::from_shape((hh, f), &theta[o[0]..o[1]]).unwrap();
        let dfeat = h1w.t().dot(&dh);

        let convs = self.convs();
        let last = convs.last().unwrap();
        let n = T::count(last.h_out * last.h_out);
        let mut dy = Array2::from_shape_fn((last.h_out * last.h_out, last.c_out), |(_, c)| dfeat[c] / n);
        for (l, c) in convs.iter().enumerate().rev() {
            dy.zip_mut_with(&tr.acts[l], |d, &a| {
                if a <= T::zero() {
                    *d = T::zero()
                }
            });
            let dw = dy.t().dot(&tr.cols[l]);
            g[c.w_off..c.b_off].copy_from_slice(&dw.iter().cloned().collect::<Vec<_>>());
            g[c.b_off..c.b_off + c.c_out].copy_from_slice(&dy.sum_axis(Axis(0)).iter().cloned().collect::<Vec<_>>());
            if l > 0 {
                let wmat = ArrayView2::from_shape((c.c_out, 9 * c.c_in), &theta[c.w_off..c.b_off]).unwrap();
                let dcol = dy.dot(&wmat);
                dy = col2im(&dcol, c.h_in, c.c_in, c.h_out);
            }
        }
        g
    }
}

struct Trace<T> {
    cols: Vec<Array2<T>>,
    acts: Vec<Array2<T>>,
    feat: Array1<T>,
    hid: Array1<T>,
    code: Array1<T>,
}

/// 3×3, stride 2, zero padding 1. Row `oy·h_out + ox`, column
/// `(ky·3 + kx)·c + channel`.
fn im2col<T: Real>(x: &Array2<T>, h: usize, c: usize, h_out: usize) -> Array2<T> {
    let mut col = Array2::zeros((h_out * h_out, 9 * c));
    for oy in 0..h_out {
        for ox in 0..h_out {
            let mut row = col.row_mut(oy * h_out + ox);
            for ky in 0..3 {
                let iy = (2 * oy + ky) as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (2 * ox + kx) as isize - 1;
                    if ix < 0 || ix >= h as isize {
                        continue;
                    }
                    let src = x.row(iy as usize * h + ix as usize);
                    let at = (ky * 3 + kx) * c;
                    row.slice_mut(s![at..at + c]).assign(&src);
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`].
fn col2im<T: Real>(col: &Array2<T>, h: usize, c: usize, h_out: usize) -> Array2<T> {
    let mut x = Array2::zeros((h * h, c));
    for oy in 0..h_out {
        for ox in 0..h_out {
            let row = col.row(oy * h_out + ox);
            for ky in 0..3 {
                let iy = (2 * oy + ky) as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (2 * ox + kx) as isize - 1;
                    if ix < 0 || ix >= h as isize {
                        continue;
                    }
                    let at = (ky * 3 + kx) * c;
                    let mut dst = x.row_mut(iy as usize * h + ix as usize);
                    dst += &row.slice(s![at..at + c]);
                }
            }
        }
    }
    x
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    pub arch: EncoderArch,
    pub params: Vec<T>,
    /// Hash of the codes the encoder was trained against.
    pub codes_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderHeader {
    pub arch: EncoderArch,
    pub f_dim: usize,
    pub w_dim: usize,
    pub input_res: u32,
    pub codes_hash: String,
    pub dtype: String,
    pub n_params: usize,
}

impl<T: Real> Encoder<T> {
    pub fn new(arch: EncoderArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        Ok(Encoder {
            params: arch.init_params(seed),
            arch,
            codes_hash: String::new(),
        })
    }

    /// Latent code for an image of any size (resampled to `input_res`).
    pub fn encode(&self, image: &Image<T>) -> Result<Vec<T>> {
        let x = self.arch.preprocess(image);
        Ok(self.arch.forward_input(&self.params, &x)?.code.to_vec())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = EncoderHeader {
            arch: self.arch.clone(),
            f_dim: self.arch.f_dim(),
            w_dim: self.arch.w_dim,
            input_res: self.arch.input_res,
            codes_hash: self.codes_hash.clone(),
            dtype: dtype_of::<T>().into(),
            n_params: self.params.len(),
        };
        write_blob(path, ENCODER_MAGIC, &header, &self.params)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (h, params): (EncoderHeader, Vec<T>) = read_blob(path, ENCODER_MAGIC)?;
        h.arch.validate()?;
        if params.len() != h.arch.n_params() || h.w_dim != h.arch.w_dim || h.f_dim != h.arch.f_dim() {
            return Err(Error::validation("encoder header does not match its parameters"));
        }
        if let Some(i) = params.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "encoder parameters",
                index: i,
            });
        }
        Ok(Encoder {
            arch: h.arch,
            params,
            codes_hash: h.codes_hash,
        })
    }
}

impl<T: Real> FeatureExtractor<T> for Encoder<T> {
    fn f_dim(&self) -> usize {
        self.arch.f_dim()
    }

    fn features(&self, image: &Image<T>) -> Result<Vec<T>> {
        let x = self.arch.preprocess(image);
        Ok(self.arch.forward_input(&self.params, &x)?.feat.to_vec())
    }
}

/// Order-independent hash of a code table.
pub fn codes_hash<T: Real>(codes: &BTreeMap<String, Vec<T>>) -> String {
    let plain: BTreeMap<&String, Vec<f64>> = codes.iter().map(|(k, v)| (k, v.iter().map(|x| x.as_f64()).collect())).collect();
    hash_bytes(&serde_json::to_vec(&plain).expect("codes serialize"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub iters: usize,
    pub batch: usize,
    pub seed: u64,
    pub arch: EncoderArch,
    pub lr: f64,
    /// Weight of `1 − cos(w, ŵ)`.
    pub lambda_cos: f64,
    /// Optional contrastive term over the subject codes (0 = off).
    pub info_nce: f64,
    pub temperature: f64,
    pub log_every: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            iters: 3000,
            batch: 8,
            seed: 0,
            arch: EncoderArch::default(),
            lr: 1e-3,
            lambda_cos: 1.0,
            info_nce: 0.0,
            temperature: 0.1,
            log_every: 0,
        }
    }
}

/// `−log softmax_j(cos(ŵ, w_j)/τ)[target]` and its gradient in `ŵ`.
pub fn info_nce<T: Real>(w_hat: &[T], codes: &[&[T]], target: usize, temperature: f64) -> Result<(T, Vec<T>)> {
    let norm = |v: &[T]| v.iter().map(|&x| x * x).sum::<T>().sqrt();
    let nh = norm(w_hat);
    if nh <= T::zero() || codes.iter().any(|c| norm(c) <= T::zero()) {
        return Err(Error::validation("info_nce: zero-norm code"));
    }
    let tau = T::lit(temperature);
    let u: Vec<T> = w_hat.iter().map(|&x| x / nh).collect();
    let v: Vec<Vec<T>> = codes.iter().map(|c| c.iter().map(|&x| x / norm(c)).collect()).collect();
    let s: Vec<T> = v.iter().map(|vj| u.iter().zip(vj).map(|(&a, &b)| a * b).sum::<T>() / tau).collect();
    let m = s.iter().copied().fold(T::neg_infinity(), T::max);
    let z: T = s.iter().map(|&x| (x - m).exp()).sum();
    let loss = -(s[target] - m - z.ln());
    let mut du = vec![T::zero(); u.len()];
    for (j, vj) in v.iter().enumerate() {
        let p = (s[j] - m).exp() / z - if j == target { T::one() } else { T::zero() };
        for (d, &b) in du.iter_mut().zip(vj) {
            *d += p * b / tau;
        }
    }
    let ud: T = u.iter().zip(&du).map(|(&a, &b)| a * b).sum();
    let grad = du.iter().zip(&u).map(|(&d, &a)| (d - ud * a) / nh).collect();
    Ok((loss, grad))
}

#[derive(Debug, Clone)]
pub struct EncoderTraining<T> {
    pub encoder: Encoder<T>,
    pub trace: Vec<T>,
    pub status: TrainStatus,
}

/// Trains the encoder to map each `(image, subject_id)` sample onto that
/// subject's code. The codes are only read.
pub fn train_encoder<T: Real>(
    samples: &[(Image<T>, String)],
    codes: &BTreeMap<String, Vec<T>>,
    cfg: &EncoderConfig,
) -> Result<EncoderTraining<T>> {
    let arch = &cfg.arch;
    arch.validate()?;
    if samples.is_empty() || cfg.batch == 0 {
        return Err(Error::validation("train_encoder needs samples and a positive batch size"));
    }
    let ids: Vec<&String> = codes.keys().collect();
    let mut targets = Vec::with_capacity(samples.len());
    for (_, id) in samples {
        let i = ids
            .iter()
            .position(|k| *k == id)
            .ok_or_else(|| Error::validation(format!("no code for subject {id}")))?;
        let w = &codes[id];
        if w.len() != arch.w_dim {
            return Err(Error::Dimension {
                what: "subject code",
                expected: arch.w_dim,
                got: w.len(),
            });
        }
        targets.push(i);
    }
    let code_list: Vec<&[T]> = ids.iter().map(|k| codes[*k].as_slice()).collect();
    let inputs: Vec<Array2<T>> = samples.par_iter().map(|(img, _)| arch.preprocess(img)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = arch.init_params(rng.random());
    let state = AdamState::new(params.len(), cfg.lr);
    let batch = cfg.batch.min(samples.len());
    let inv = T::lit(1.0 / batch as f64);

    let mut objective = |theta: &[T], _iter: usize, rng: &mut ChaCha8Rng| -> Result<(T, Vec<T>)> {
        let picks: Vec<usize> = (0..batch).map(|_| rng.random_range(0..samples.len())).collect();
        let parts = picks
            .par_iter()
            .map(|&s| -> Result<(T, Vec<T>)> {
                let tr = arch.forward_input(theta, &inputs[s])?;
                let w_hat = tr.code.to_vec();
                let target = code_list[targets[s]];
                let l = encoder_loss(target, &w_hat, cfg.lambda_cos)?;
                let mut value = l.value;
                let mut d = l.grad;
                if cfg.info_nce > 0.0 {
                    let (v, g) = info_nce(&w_hat, &code_list, targets[s], cfg.temperature)?;
                    value += T::lit(cfg.info_nce) * v;
                    for (a, b) in d.iter_mut().zip(g) {
                        *a += T::lit(cfg.info_nce) * b;
                    }
                }
                Ok((value, arch.backward(theta, &tr, &d)))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut loss = T::zero();
        let mut grad = vec![T::zero(); theta.len()];
        for (v, g) in parts {
            loss += v * inv;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b * inv;
            }
        }
        Ok((loss, grad))
    };
    let schedule = Schedule {
        iters: cfg.iters,
        seed: rng.random(),
        log_every: cfg.log_every,
    };
    let out = train_loop(&mut objective, params, state, &schedule, &mut |_| Control::Continue)?;
    if out.status == TrainStatus::Diverged {
        log::warn!("encoder training diverged after {} iterations", out.trace.len());
    }
    Ok(EncoderTraining {
        encoder: Encoder {
            arch: arch.clone(),
            params: out.params,
            codes_hash: codes_hash(codes),
        },
        trace: out.trace,
        status: out.status,
    })
}

/// Cosine similarity; zero if either vector is zero.
pub fn cosine<T: Real>(a: &[T], b: &[T]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x.as_f64() * y.as_f64()).sum();
    let na: f64 = a.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}
