//! Operations shared by the command line and the HTTP service, so both
//! paths produce identical bytes for identical inputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use gsavatar_core::camera::CameraFile;
use gsavatar_core::io::{hash_bytes, read_json, write_json};
use gsavatar_core::metrics::{mae, psnr, ssim};
use gsavatar_core::{render, Camera, GaussianModel, Image};
use gsavatar_pipeline::encoder::codes_hash;
use gsavatar_pipeline::latent::{refine, RefineConfig};
use gsavatar_pipeline::synth::MANIFEST_FILE;
use gsavatar_pipeline::{decoder::DecoderBundle, AttributeDirection, DatasetManifest, Encoder};
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult, ErrorKind};

/// Layout of an artifact directory.
pub const DECODER_DIR: &str = "decoder";
pub const ENCODER_FILE: &str = "encoder.bin";
pub const DIRECTIONS_DIR: &str = "directions";
pub const DATA_DIR: &str = "data";

/// Orbit defaults: the synthetic dataset's distance and focal factor.
pub const DEFAULT_RES: u32 = 256;
pub const DEFAULT_FOCAL_FACTOR: f64 = 1.4;
pub const DEFAULT_DISTANCE: f64 = 4.0;

fn default_distance() -> f64 {
    DEFAULT_DISTANCE
}

/// Camera on a sphere around the origin. Missing size and focal length
/// fall back to 256 px and 1.4 × width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrbitSpec {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    #[serde(default = "default_distance")]
    pub distance: f64,
    #[serde(default)]
    pub width: Option<u32>,
    #[serde(default)]
    pub height: Option<u32>,
    #[serde(default)]
    pub focal: Option<f64>,
}

impl OrbitSpec {
    pub fn frontal() -> Self {
        OrbitSpec {
            azimuth_deg: 0.0,
            elevation_deg: 0.0,
            distance: DEFAULT_DISTANCE,
            width: None,
            height: None,
            focal: None,
        }
    }

    pub fn camera(&self) -> AppResult<Camera<f64>> {
        let w = self.width.unwrap_or(DEFAULT_RES);
        let h = self.height.unwrap_or(w);
        let focal = self.focal.unwrap_or(DEFAULT_FOCAL_FACTOR * w as f64);
        if !(self.distance.is_finite() && self.distance > 0.0) {
            return Err(AppError::invalid("camera.distance", "distance must be positive"));
        }
        Camera::orbit(w, h, focal, [0.0; 3], self.azimuth_deg, self.elevation_deg, self.distance)
            .map_err(|e| AppError::from(e).with_field("camera"))
    }
}

/// Orbit shorthand or a full camera in the camera file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CameraSpec {
    Orbit(OrbitSpec),
    Full(CameraFile),
}

impl CameraSpec {
    pub fn camera(&self) -> AppResult<Camera<f64>> {
        match self {
            CameraSpec::Orbit(o) => o.camera(),
            CameraSpec::Full(f) => f.to_camera().map_err(|e| AppError::from(e).with_field("camera")),
        }
    }
}

/// Latent code file: `{"w": [...]}`; a bare array is accepted on input.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CodeFile {
    Object { w: Vec<f64> },
    Bare(Vec<f64>),
}

pub fn read_code(path: &Path) -> AppResult<Vec<f64>> {
    let f: CodeFile = read_json(path)?;
    Ok(match f {
        CodeFile::Object { w } | CodeFile::Bare(w) => w,
    })
}

pub fn write_code(path: &Path, w: &[f64]) -> AppResult<()> {
    Ok(write_json(path, &CodeFile::Object { w: w.to_vec() })?)
}

/// Rejects codes of the wrong length or with non-finite entries.
pub fn check_code(w: &[f64], dim: usize, field: &str) -> AppResult<()> {
    if w.len() != dim {
        return Err(AppError::invalid(field, format!("code has length {}, expected {dim}", w.len())));
    }
    if let Some(i) = w.iter().position(|v| !v.is_finite()) {
        return Err(AppError::invalid(field, format!("code entry {i} is not finite")));
    }
    Ok(())
}

pub fn decode_model(bundle: &DecoderBundle<f64>, w: &[f64]) -> AppResult<GaussianModel<f64>> {
    check_code(w, bundle.decoder.arch.w_dim, "w")?;
    Ok(bundle.model_for(w)?)
}

pub fn render_png(model: &GaussianModel<f64>, cam: &Camera<f64>, bg: [f64; 3]) -> AppResult<Vec<u8>> {
    Ok(render(model, cam, bg).encode_png()?)
}

pub fn check_background(bg: [f64; 3], field: &str) -> AppResult<[f64; 3]> {
    if bg.iter().all(|v| (0.0..=1.0).contains(v)) {
        Ok(bg)
    } else {
        Err(AppError::invalid(field, "background channels must lie in [0, 1]"))
    }
}

/// `"r,g,b"` with channels in `[0, 1]`.
pub fn parse_background(s: &str) -> AppResult<[f64; 3]> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let bad = || AppError::invalid("bg", format!("expected R,G,B in [0, 1], got {s:?}"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let mut out = [0.0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().map_err(|_| bad())?;
    }
    check_background(out, "bg")
}

#[derive(Debug, Clone)]
pub struct Inferred {
    pub w: Vec<f64>,
    pub model: GaussianModel<f64>,
    /// Refinement loss per iteration; empty without refinement.
    pub trace: Vec<f64>,
}

/// Encoder pass, decode, and optionally `refine_iters` refinement steps
/// against the same image.
pub fn infer(
    image: &Image<f64>,
    cam: &Camera<f64>,
    encoder: &Encoder<f64>,
    bundle: &DecoderBundle<f64>,
    refine_iters: usize,
) -> AppResult<Inferred> {
    let w = encoder.encode(image)?;
    if refine_iters == 0 {
        let model = decode_model(bundle, &w)?;
        return Ok(Inferred { w, model, trace: Vec::new() });
    }
    refine_code(image, cam, &w, bundle, refine_iters)
}

pub fn refine_code(image: &Image<f64>, cam: &Camera<f64>, w: &[f64], bundle: &DecoderBundle<f64>, iters: usize) -> AppResult<Inferred> {
    check_code(w, bundle.decoder.arch.w_dim, "w")?;
    if image.width() != cam.width || image.height() != cam.height {
        return Err(AppError::invalid(
            "camera",
            format!(
                "camera is {}x{} but the image is {}x{}",
                cam.width,
                cam.height,
                image.width(),
                image.height()
            ),
        ));
    }
    let cfg = RefineConfig {
        iters,
        ..RefineConfig::default()
    };
    let r = refine(image, cam, w, bundle, &cfg)?;
    Ok(Inferred {
        w: r.w,
        model: r.model,
        trace: r.trace,
    })
}

/// Loaded, read-only contents of an artifact directory:
///
/// ```text
/// decoder/      decoder bundle (decoder.bin, codes.json, template.json)
/// encoder.bin   optional
/// directions/   optional, one direction JSON per attribute
/// data/         optional dataset (manifest.json), for subject listing and refinement targets
/// ```
pub struct Artifacts {
    pub root: PathBuf,
    pub bundle: DecoderBundle<f64>,
    pub encoder: Option<Encoder<f64>>,
    pub directions: BTreeMap<String, AttributeDirection>,
    pub dataset: Option<DatasetManifest>,
    pub hashes: BTreeMap<String, String>,
}

fn file_hash(path: &Path) -> AppResult<String> {
    let bytes = std::fs::read(path).map_err(|e| AppError::new(ErrorKind::NotFound, format!("{}: {e}", path.display())))?;
    Ok(hash_bytes(&bytes))
}

impl Artifacts {
    pub fn load(root: impl AsRef<Path>) -> AppResult<Self> {
        let root = root.as_ref().to_path_buf();
        let dec_dir = root.join(DECODER_DIR);
        if !dec_dir.is_dir() {
            return Err(AppError::not_found(
                "artifacts",
                format!("{} has no {DECODER_DIR}/ directory", root.display()),
            ));
        }
        let bundle = DecoderBundle::<f64>::load(&dec_dir)?;
        let mut hashes = BTreeMap::new();
        hashes.insert("template".to_string(), bundle.template_hash());
        hashes.insert("decoder".to_string(), file_hash(&dec_dir.join("decoder.bin"))?);
        hashes.insert("codes".to_string(), codes_hash(&bundle.codes));

        let enc_path = root.join(ENCODER_FILE);
        let encoder = if enc_path.is_file() {
            let enc = Encoder::<f64>::load(&enc_path)?;
            if enc.arch.w_dim != bundle.decoder.arch.w_dim {
                return Err(AppError::invalid(
                    "encoder",
                    format!(
                        "encoder code size {} does not match decoder {}",
                        enc.arch.w_dim, bundle.decoder.arch.w_dim
                    ),
                ));
            }
            if enc.codes_hash != hashes["codes"] {
                log::warn!("encoder was trained against different codes than {}", dec_dir.display());
            }
            hashes.insert("encoder".to_string(), file_hash(&enc_path)?);
            Some(enc)
        } else {
            None
        };

        let mut directions = BTreeMap::new();
        let dir_path = root.join(DIRECTIONS_DIR);
        if dir_path.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(&dir_path)
                .map_err(|e| AppError::new(ErrorKind::Internal, e.to_string()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect();
            files.sort();
            for p in files {
                let d = AttributeDirection::load(&p)?;
                if d.n.len() != bundle.decoder.arch.w_dim {
                    return Err(AppError::invalid(
                        "directions",
                        format!("{}: normal has length {}", p.display(), d.n.len()),
                    ));
                }
                hashes.insert(format!("direction:{}", d.name), file_hash(&p)?);
                directions.insert(d.name.clone(), d);
            }
        }

        let data = root.join(DATA_DIR);
        let dataset = if data.join(MANIFEST_FILE).is_file() {
            Some(DatasetManifest::load(&data)?)
        } else {
            None
        };
        Ok(Artifacts {
            root,
            bundle,
            encoder,
            directions,
            dataset,
            hashes,
        })
    }

    /// Subject ids with whether a trained code exists: dataset subjects if
    /// a dataset is present, plus any coded subject not in it.
    pub fn subjects(&self) -> Vec<(String, bool)> {
        let mut ids: Vec<String> = self
            .dataset
            .as_ref()
            .map(|d| d.subjects.iter().map(|s| s.id.clone()).collect())
            .unwrap_or_default();
        for id in self.bundle.codes.keys() {
            if !ids.contains(id) {
                ids.push(id.clone());
            }
        }
        ids.into_iter()
            .map(|id| {
                let has = self.bundle.codes.contains_key(&id);
                (id, has)
            })
            .collect()
    }

    /// A dataset view named `<subject>/<view index>`.
    pub fn dataset_view(&self, image_id: &str) -> Option<AppResult<(Image<f64>, Camera<f64>)>> {
        let data = self.dataset.as_ref()?;
        let (subject, view) = image_id.rsplit_once('/')?;
        let view: usize = view.parse().ok()?;
        Some((|| {
            let views = data
                .load_views::<f64>(subject)
                .map_err(|e| AppError::not_found("image_id", e.to_string()))?;
            views
                .into_iter()
                .nth(view)
                .ok_or_else(|| AppError::not_found("image_id", format!("subject {subject} has no view {view}")))
        })())
    }
}

/// Per-view and mean metrics of a prediction directory against ground
/// truth. `psnr_db` is `null` for identical images (infinite PSNR); the
/// mean skips those views.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub views: Vec<ViewMetrics>,
    pub mean: MeanMetrics,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ViewMetrics {
    pub name: String,
    pub psnr_db: Option<f64>,
    pub ssim: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MeanMetrics {
    pub psnr_db: Option<f64>,
    pub ssim: f64,
    pub mae: f64,
}

fn image_files(dir: &Path) -> AppResult<BTreeMap<String, PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| AppError::not_found("dir", format!("{}: {e}", dir.display())))?;
    Ok(entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png" || x == "rgbf"))
        .filter_map(|p| Some((p.file_name()?.to_str()?.to_string(), p)))
        .collect())
}

/// Pairs images by file name (`.png` or `.rgbf`).
pub fn eval_dirs(pred_dir: &Path, gt_dir: &Path) -> AppResult<EvalReport> {
    let pred = image_files(pred_dir).map_err(|e| e.with_field("pred-dir"))?;
    let gt = image_files(gt_dir).map_err(|e| e.with_field("gt-dir"))?;
    let mut views = Vec::new();
    for (name, p) in &pred {
        let Some(g) = gt.get(name) else { continue };
        let a: Image<f64> = Image::load(p).map_err(|e| AppError::from(e).with_field("pred-dir"))?;
        let b: Image<f64> = Image::load(g).map_err(|e| AppError::from(e).with_field("gt-dir"))?;
        if !a.same_shape(&b) {
            return Err(AppError::invalid("pred-dir", format!("{name}: image sizes differ")));
        }
        let p = psnr(&b, &a)?;
        views.push(ViewMetrics {
            name: name.clone(),
            psnr_db: p.is_finite().then_some(p),
            ssim: ssim(&b, &a)?,
            mae: mae(&b, &a)?,
        });
    }
    if views.is_empty() {
        return Err(AppError::invalid("pred-dir", "no image file names in common with the ground-truth directory"));
    }
    let n = views.len() as f64;
    let finite: Vec<f64> = views.iter().filter_map(|v| v.psnr_db).collect();
    let mean_psnr = (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64);
    Ok(EvalReport {
        mean: MeanMetrics {
            psnr_db: mean_psnr,
            ssim: views.iter().map(|v| v.ssim).sum::<f64>() / n,
            mae: views.iter().map(|v| v.mae).sum::<f64>() / n,
        },
        views,
    })
}

/// Labels file: `{id: ±1}`, or `{id: {attribute: ±1}}` from which the
/// named attribute is taken.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum LabelValue {
    Flat(i8),
    Named(BTreeMap<String, i8>),
}

pub fn read_labels(path: &Path, name: &str) -> AppResult<BTreeMap<String, i8>> {
    let raw: BTreeMap<String, LabelValue> = read_json(path).map_err(|e| AppError::from(e).with_field("labels"))?;
    raw.into_iter()
        .map(|(id, v)| match v {
            LabelValue::Flat(y) => Ok((id, y)),
            LabelValue::Named(m) => m
                .get(name)
                .map(|&y| (id.clone(), y))
                .ok_or_else(|| AppError::invalid("labels", format!("subject {id} has no label {name:?}"))),
        })
        .collect()
}
