//! Latent-space operations: test-time refinement of a code and a private
//! decoder copy, linear interpolation, and attribute directions from a
//! linear SVM.

use std::path::Path;

use gsavatar_core::error::{Error, Result};
use gsavatar_core::io::{read_json, write_json};
use gsavatar_core::loss::LossWeights;
use gsavatar_core::optim::{train_loop, AdamState, Control, ParamGroup, Schedule, TrainStatus};
use gsavatar_core::{Camera, GaussianModel, Image};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{view_loss, Decoder, DecoderBundle};
use crate::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub iters: usize,
    pub lr_code: f64,
    pub lr_theta: f64,
    pub weights: LossWeights,
    pub background: [f64; 3],
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            iters: 300,
            lr_code: 1e-2,
            lr_theta: 1e-4,
            weights: LossWeights::default(),
            background: [1.0; 3],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Refined<T> {
    pub w: Vec<T>,
    /// The adapted copy; the bundle's decoder is untouched.
    pub decoder: Decoder<T>,
    pub model: GaussianModel<T>,
    /// Input-view loss before each update.
    pub trace: Vec<T>,
    /// Loss of the returned parameters (`None` when `iters = 0`).
    pub best_loss: Option<T>,
    pub status: TrainStatus,
}

/// Adam on the code and a copy of the decoder parameters against one view.
/// Returns the best parameters seen, so the input-view loss never ends
/// above its starting value.
pub fn refine<T: Real>(
    image: &Image<T>,
    cam: &Camera<T>,
    w_hat: &[T],
    bundle: &DecoderBundle<T>,
    cfg: &RefineConfig,
) -> Result<Refined<T>> {
    let arch = bundle.decoder.arch;
    if w_hat.len() != arch.w_dim {
        return Err(Error::Dimension {
            what: "latent code",
            expected: arch.w_dim,
            got: w_hat.len(),
        });
    }
    cam.validate()?;
    let wd = arch.w_dim;
    let mut params = w_hat.to_vec();
    params.extend_from_slice(&bundle.decoder.params);
    let n = params.len();
    let state = AdamState::new(n, cfg.lr_theta).with_groups(vec![
        ParamGroup::new("code", 0..wd, cfg.lr_code),
        ParamGroup::new("theta", wd..n, cfg.lr_theta),
    ])?;
    let bg = cfg.background.map(T::lit);
    let e = bundle.embeddings.view();
    let mut objective = |p: &[T], _: usize, _: &mut ChaCha8Rng| -> Result<(T, Vec<T>)> {
        let (value, grads) = view_loss(&arch, &p[wd..], &p[..wd], e, &bundle.template, image, cam, bg, &cfg.weights)?;
        let Some(g) = grads else {
            return Ok((value, Vec::new()));
        };
        let mut grad = g.w;
        grad.extend_from_slice(&g.theta);
        Ok((value, grad))
    };
    let schedule = Schedule {
        iters: cfg.iters,
        seed: 0,
        log_every: 0,
    };
    let out = train_loop(&mut objective, params, state, &schedule, &mut |_| Control::Continue)?;
    if out.status == TrainStatus::Diverged {
        log::warn!("refinement hit a non-finite loss; returning the best parameters so far");
    }
    let best = out.best_params;
    let decoder = Decoder::from_params(arch, best[wd..].to_vec())?;
    let w = best[..wd].to_vec();
    let model = gsavatar_core::apply_residuals(&bundle.template, &decoder.decode_all(&w, e)?)?;
    Ok(Refined {
        w,
        decoder,
        model,
        best_loss: out.trace.iter().copied().fold(None, |m: Option<T>, v| Some(m.map_or(v, |m| m.min(v)))),
        trace: out.trace,
        status: out.status,
    })
}

/// `(1 − α)·w1 + α·w2` for `α ∈ [0, 1]`.
pub fn interpolate<T: Real>(w1: &[T], w2: &[T], alpha: f64) -> Result<Vec<T>> {
    if w1.len() != w2.len() {
        return Err(Error::Dimension {
            what: "interpolated codes",
            expected: w1.len(),
            got: w2.len(),
        });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::validation(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let a = T::lit(alpha);
    Ok(w1.iter().zip(w2).map(|(&x, &y)| (T::one() - a) * x + a * y).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MarginStats {
    pub accuracy: f64,
    pub min_margin: f64,
    pub mean_margin: f64,
}

/// A separating hyperplane `n̂·w + b = 0` in code space, `‖n̂‖ = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeDirection {
    pub name: String,
    pub n: Vec<f64>,
    pub b: f64,
    #[serde(default)]
    pub stats: MarginStats,
}

impl AttributeDirection {
    pub fn score<T: Real>(&self, w: &[T]) -> f64 {
        self.n.iter().zip(w).map(|(a, b)| a * b.as_f64()).sum::<f64>() + self.b
    }

    pub fn classify<T: Real>(&self, w: &[T]) -> i8 {
        if self.score(w) >= 0.0 {
            1
        } else {
            -1
        }
    }

    pub fn validate(&self) -> Result<()> {
        let norm = self.n.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-9 || !self.b.is_finite() {
            return Err(Error::validation(format!("direction {} is not a unit normal", self.name)));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let d: AttributeDirection = read_json(path)?;
        d.validate()?;
        Ok(d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig {
            lambda: 1e-3,
            epochs: 10_000,
            seed: 0,
        }
    }
}

/// Soft-margin linear SVM by stochastic subgradient steps on the
/// regularized hinge loss, with the bias folded in as a constant feature.
pub fn fit_attribute_direction<T: Real>(
    name: &str,
    codes: &[Vec<T>],
    labels: &[i8],
    cfg: &SvmConfig,
) -> Result<AttributeDirection> {
    if codes.len() != labels.len() {
        return Err(Error::Dimension {
            what: "labels",
            expected: codes.len(),
            got: labels.len(),
        });
    }
    if labels.iter().any(|&y| y != 1 && y != -1) {
        return Err(Error::validation("labels must be +1 or -1"));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    if pos < 2 || labels.len() - pos < 2 {
        return Err(Error::validation("each class needs at least two samples"));
    }
    if !(cfg.lambda > 0.0) {
        return Err(Error::validation("svm lambda must be positive"));
    }
    let d = codes[0].len();
    if d == 0 || codes.iter().any(|c| c.len() != d) {
        return Err(Error::validation("codes must share one nonzero dimension"));
    }
    let xs: Vec<Vec<f64>> = codes
        .iter()
        .map(|c| c.iter().map(|v| v.as_f64()).chain(std::iter::once(1.0)).collect())
        .collect();
    let mut v = vec![0.0; d + 1];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let steps = cfg.epochs * xs.len();
    for t in 1..=steps {
        let i = rng.random_range(0..xs.len());
        let y = labels[i] as f64;
        let eta = 1.0 / (cfg.lambda * t as f64);
        let margin = y * v.iter().zip(&xs[i]).map(|(a, b)| a * b).sum::<f64>();
        let shrink = 1.0 - eta * cfg.lambda;
        for (vj, xj) in v.iter_mut().zip(&xs[i]) {
            *vj *= shrink;
            if margin < 1.0 {
                *vj += eta * y * xj;
            }
        }
    }
    let norm = v[..d].iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::validation("svm produced a degenerate normal"));
    }
    let mut dir = AttributeDirection {
        name: name.to_string(),
        n: v[..d].iter().map(|x| x / norm).collect(),
        b: v[d] / norm,
        stats: MarginStats::default(),
    };
    let margins: Vec<f64> = codes.iter().zip(labels).map(|(c, &y)| y as f64 * dir.score(c)).collect();
    dir.stats = MarginStats {
        accuracy: margins.iter().filter(|&&m| m > 0.0).count() as f64 / margins.len() as f64,
        min_margin: margins.iter().copied().fold(f64::INFINITY, f64::min),
        mean_margin: margins.iter().sum::<f64>() / margins.len() as f64,
    };
    Ok(dir)
}

/// `w + λ·n̂`
pub fn traverse<T: Real>(w: &[T], dir: &AttributeDirection, lambda: f64) -> Result<Vec<T>> {
    if w.len() != dir.n.len() {
        return Err(Error::Dimension {
            what: "traversed code",
            expected: dir.n.len(),
            got: w.len(),
        });
    }
    if !lambda.is_finite() {
        return Err(Error::validation("lambda must be finite"));
    }
    Ok(w.iter().zip(&dir.n).map(|(&x, &n)| x + T::lit(lambda * n)).collect())
}
