//! Procedural multi-view "head" datasets whose ground truth is itself a
//! Gaussian model, so every fitting and reconstruction step has an exact
//! oracle.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use gsavatar_core::error::{Error, Result};
use gsavatar_core::io::{load_camera, load_model, read_json, save_camera, save_model, write_json};
use gsavatar_core::linalg::{dot3, normalize3, sub3, Vec3};
use gsavatar_core::sh::{basis, dc_for_color};
use gsavatar_core::{render, Camera, GaussianModel, Image, Scalar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fit::init_from_landmarks;
use crate::mesh::{load_landmarks, save_landmarks, LandmarkMesh};

pub const ATTR_BUMP: &str = "bump";
pub const ATTR_STRIPE: &str = "stripe";
pub const ATTRIBUTES: [&str; 2] = [ATTR_BUMP, ATTR_STRIPE];

const BUMP_CENTER: [f64; 3] = [0.0, -0.1, 1.0];
const BUMP_RADIUS: f64 = 0.45;
const BUMP_HEIGHT: f64 = 0.18;
const STRIPE_Y: f64 = 0.35;
const STRIPE_HALF_WIDTH: f64 = 0.12;
const STRIPE_COLOR: [f64; 3] = [0.15, 0.2, 0.55];

/// Generator knobs. Everything except the seed is shared by all subjects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Sphere tessellation; `(65, 78)` gives 5072 vertices.
    pub rings: usize,
    pub segments: usize,
    pub n_views: usize,
    pub image_res: u32,
    pub camera_distance: f64,
    /// Focal length as a multiple of the image size.
    pub focal_factor: f64,
    pub elevation_range: [f64; 2],
    pub azimuth_range: [f64; 2],
    pub background: [f64; 3],
    pub seed: u64,
    /// Relative amplitude of the radial shape field.
    pub shape_amplitude: f64,
    pub color_amplitude: f64,
    /// Log-normal sigma of per-Gaussian scale noise.
    pub scale_jitter: f64,
    /// Store images as lossless f32 instead of 8-bit PNG.
    pub float_images: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            rings: 65,
            segments: 78,
            n_views: 16,
            image_res: 128,
            camera_distance: 4.0,
            focal_factor: 1.4,
            elevation_range: [-10.0, 20.0],
            azimuth_range: [-90.0, 90.0],
            background: [1.0; 3],
            seed: 0,
            shape_amplitude: 0.06,
            color_amplitude: 0.12,
            scale_jitter: 0.1,
            float_images: false,
        }
    }
}

impl SynthConfig {
    pub fn base_mesh<T: Scalar>(&self) -> Result<LandmarkMesh<T>> {
        LandmarkMesh::uv_sphere(self.rings, self.segments)
    }

    pub fn cameras<T: Scalar>(&self) -> Result<Vec<Camera<T>>> {
        generate_cameras(
            self.n_views,
            self.camera_distance,
            self.elevation_range,
            self.azimuth_range,
            self.image_res,
            self.focal_factor,
        )
    }
}

/// Attribute name → ±1.
pub type Labels = BTreeMap<String, i8>;

#[derive(Debug, Clone)]
pub struct Subject<T> {
    pub mesh: LandmarkMesh<T>,
    pub model: GaussianModel<T>,
    pub labels: Labels,
}

fn flag(labels: &Labels, name: &str) -> Result<bool> {
    match labels.get(name).copied().unwrap_or(-1) {
        1 => Ok(true),
        -1 => Ok(false),
        v => Err(Error::validation(format!("attribute {name} must be +1 or -1, got {v}"))),
    }
}

/// Weight in `[0, 1]` of the bump at unit direction `d`; zero outside its
/// support.
pub fn bump_weight(d: Vec3<f64>) -> f64 {
    let c = normalize3(BUMP_CENTER).unwrap();
    let r2 = dot3(sub3(d, c), sub3(d, c)) / (BUMP_RADIUS * BUMP_RADIUS);
    if r2 >= 1.0 {
        0.0
    } else {
        (1.0 - r2) * (1.0 - r2)
    }
}

/// Weight in `[0, 1]` of the color stripe at unit direction `d`.
pub fn stripe_weight(d: Vec3<f64>) -> f64 {
    let t = (d[1] - STRIPE_Y).abs() / STRIPE_HALF_WIDTH;
    if t >= 1.0 || d[2] < 0.0 {
        0.0
    } else {
        (1.0 - t * t) * (1.0 - t * t)
    }
}

/// Whether a base-mesh direction can be affected by `attribute`, with
/// `margin` (in unit-sphere distance) for neighbours whose normals or edge
/// lengths change.
pub fn in_attribute_region(attribute: &str, d: Vec3<f64>, margin: f64) -> bool {
    match attribute {
        ATTR_BUMP => {
            let c = normalize3(BUMP_CENTER).unwrap();
            dot3(sub3(d, c), sub3(d, c)).sqrt() < BUMP_RADIUS + margin
        }
        ATTR_STRIPE => d[2] > -margin && (d[1] - STRIPE_Y).abs() < STRIPE_HALF_WIDTH + margin,
        _ => false,
    }
}

/// One subject: a deformed copy of `base` plus its ground-truth model.
/// The random draws do not depend on `labels`, so two subjects that share
/// a seed differ only inside the attribute regions.
pub fn generate_subject<T: Scalar>(
    seed: u64,
    base: &LandmarkMesh<T>,
    labels: &Labels,
    cfg: &SynthConfig,
) -> Result<Subject<T>> {
    let bump = flag(labels, ATTR_BUMP)?;
    let stripe = flag(labels, ATTR_STRIPE)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();

    // head-like ellipsoid
    let axes = [
        0.82 * (1.0 + 0.06 * normal.sample(&mut rng)),
        1.0 * (1.0 + 0.06 * normal.sample(&mut rng)),
        0.92 * (1.0 + 0.06 * normal.sample(&mut rng)),
    ];
    let mut shape = [0.0; 16];
    for (b, s) in shape.iter_mut().enumerate().skip(1) {
        let band = (b as f64).sqrt().floor();
        *s = cfg.shape_amplitude * normal.sample(&mut rng) / (1.0 + band);
    }
    let skin = [
        0.78 + 0.08 * normal.sample(&mut rng),
        0.58 + 0.08 * normal.sample(&mut rng),
        0.48 + 0.08 * normal.sample(&mut rng),
    ];
    let mut tint = [[0.0; 9]; 3];
    for ch in tint.iter_mut() {
        for (b, t) in ch.iter_mut().enumerate().skip(1) {
            *t = cfg.color_amplitude * normal.sample(&mut rng) / (1.0 + (b as f64).sqrt().floor());
        }
    }

    let dirs: Vec<Vec3<f64>> = base
        .vertices
        .iter()
        .map(|p| normalize3(p.map(|x| x.as_f64())).ok_or_else(|| Error::validation("base vertex at the origin")))
        .collect::<Result<_>>()?;
    let radius = |d: Vec3<f64>| {
        let e = 1.0 / ((d[0] / axes[0]).powi(2) + (d[1] / axes[1]).powi(2) + (d[2] / axes[2]).powi(2)).sqrt();
        let y = basis(d);
        let field: f64 = (1..16).map(|b| shape[b] * y[b]).sum();
        let mut r = e * (1.0 + field);
        if bump {
            r += BUMP_HEIGHT * bump_weight(d);
        }
        r
    };
    let mut mesh = base.clone();
    for (p, &d) in mesh.vertices.iter_mut().zip(&dirs) {
        let r = radius(d);
        *p = d.map(|x| T::lit(x * r));
    }
    mesh.recompute_normals()?;

    let mut model = init_from_landmarks(&mesh)?;
    let jitter = Normal::new(0.0, cfg.scale_jitter.max(0.0)).map_err(|e| Error::validation(e.to_string()))?;
    for (k, g) in model.gaussians_mut().iter_mut().enumerate() {
        let d = dirs[k / 2];
        let y = basis(d);
        let mut rgb = [0.0; 3];
        for ch in 0..3 {
            let field: f64 = (1..9).map(|b| tint[ch][b] * y[b]).sum();
            rgb[ch] = skin[ch] + field;
        }
        if stripe {
            let w = stripe_weight(d);
            for ch in 0..3 {
                rgb[ch] = (1.0 - w) * rgb[ch] + w * STRIPE_COLOR[ch];
            }
        }
        for ch in 0..3 {
            g.sh[ch * 16] = dc_for_color(T::lit(rgb[ch].clamp(0.05, 0.95)));
        }
        for s in g.scale.iter_mut() {
            *s *= T::lit(jitter.sample(&mut rng).exp());
        }
    }
    model.metadata.insert("seed".into(), seed.into());
    model.metadata.insert(
        "attribute_labels".into(),
        serde_json::to_value(labels).map_err(Error::Json)?,
    );
    Ok(Subject {
        mesh,
        model,
        labels: labels.clone(),
    })
}

/// Cameras on a sphere of radius `distance` looking at the origin, split
/// over two elevation rings with azimuths spread over `azimuth_range`.
/// `n_views = 1` gives the frontal camera at `(0, 0, distance)`.
pub fn generate_cameras<T: Scalar>(
    n_views: usize,
    distance: f64,
    elevation_range: [f64; 2],
    azimuth_range: [f64; 2],
    res: u32,
    focal_factor: f64,
) -> Result<Vec<Camera<T>>> {
    if n_views == 0 {
        return Err(Error::validation("n_views must be at least 1"));
    }
    let focal = T::lit(focal_factor * res as f64);
    let orbit = |az: f64, el: f64| Camera::orbit(res, res, focal, [T::zero(); 3], T::lit(az), T::lit(el), T::lit(distance));
    if n_views == 1 {
        return Ok(vec![orbit(0.0, 0.0)?]);
    }
    let rings = [n_views.div_ceil(2), n_views / 2];
    let mut cams = Vec::with_capacity(n_views);
    for (ring, &count) in rings.iter().enumerate() {
        let el = elevation_range[ring];
        for i in 0..count {
            let az = if count == 1 {
                0.5 * (azimuth_range[0] + azimuth_range[1])
            } else {
                azimuth_range[0] + (azimuth_range[1] - azimuth_range[0]) * i as f64 / (count - 1) as f64
            };
            cams.push(orbit(az, el)?);
        }
    }
    Ok(cams)
}

/// Seed for subject `index`, derived from the master seed.
pub fn subject_seed(master: u64, index: usize) -> u64 {
    // splitmix64 step
    let mut z = master.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Balanced labels: subject `i` gets bump on even `i` and stripe on
/// `i mod 4 < 2`.
pub fn default_labels(index: usize) -> Labels {
    let pm = |b: bool| if b { 1 } else { -1 };
    Labels::from([
        (ATTR_BUMP.to_string(), pm(index.is_multiple_of(2))),
        (ATTR_STRIPE.to_string(), pm(index % 4 < 2)),
    ])
}

pub fn subject_id(index: usize) -> String {
    format!("subject_{index:03}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub camera_file: String,
    pub image_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    pub landmark_file: String,
    pub gt_model_file: String,
    pub attribute_labels: Labels,
    pub views: Vec<ViewEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalInfo {
    pub n_views: usize,
    pub image_res: u32,
    pub background: [f64; 3],
    pub seed: u64,
}

/// `manifest.json` at the dataset root. File names are relative to
/// `root`, which is not serialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(skip)]
    pub root: PathBuf,
    pub subjects: Vec<SubjectEntry>,
    pub global: GlobalInfo,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let mut m: DatasetManifest = read_json(root.join(MANIFEST_FILE))?;
        m.root = root.to_path_buf();
        Ok(m)
    }

    pub fn save(&self) -> Result<()> {
        write_json(self.root.join(MANIFEST_FILE), self)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn subject(&self, id: &str) -> Result<&SubjectEntry> {
        self.subjects
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::validation(format!("unknown subject {id}")))
    }

    /// Every referenced file exists, the view count is uniform, and all
    /// landmark sets share one topology.
    pub fn validate(&self) -> Result<()> {
        if self.subjects.is_empty() {
            return Err(Error::validation("manifest lists no subjects"));
        }
        let mut reference: Option<LandmarkMesh<f64>> = None;
        for s in &self.subjects {
            if s.views.len() != self.global.n_views {
                return Err(Error::validation(format!(
                    "subject {} has {} views, expected {}",
                    s.id,
                    s.views.len(),
                    self.global.n_views
                )));
            }
            let files = [&s.landmark_file, &s.gt_model_file]
                .into_iter()
                .chain(s.views.iter().flat_map(|v| [&v.camera_file, &v.image_file]));
            for f in files {
                if !self.path(f).is_file() {
                    return Err(Error::validation(format!("subject {}: missing file {f}", s.id)));
                }
            }
            let mesh: LandmarkMesh<f64> = load_landmarks(self.path(&s.landmark_file))?;
            match &reference {
                None => reference = Some(mesh),
                Some(r) if !r.same_topology(&mesh) => {
                    return Err(Error::validation(format!("subject {} has a different landmark topology", s.id)));
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    pub fn background<T: Scalar>(&self) -> [T; 3] {
        self.global.background.map(T::lit)
    }

    /// Images and cameras of one subject, in manifest order.
    pub fn load_views<T: Scalar>(&self, id: &str) -> Result<Vec<(Image<T>, Camera<T>)>> {
        self.subject(id)?
            .views
            .iter()
            .map(|v| Ok((Image::load(self.path(&v.image_file))?, load_camera(self.path(&v.camera_file))?)))
            .collect()
    }

    pub fn load_gt_model<T: Scalar>(&self, id: &str) -> Result<GaussianModel<T>> {
        load_model(self.path(&self.subject(id)?.gt_model_file))
    }

    pub fn load_landmarks<T: Scalar>(&self, id: &str) -> Result<LandmarkMesh<T>> {
        load_landmarks(self.path(&self.subject(id)?.landmark_file))
    }
}

/// Generates, renders and writes `n_subjects` subjects under `root`.
pub fn build_dataset(root: impl AsRef<Path>, n_subjects: usize, cfg: &SynthConfig) -> Result<DatasetManifest> {
    if n_subjects == 0 {
        return Err(Error::validation("n_subjects must be at least 1"));
    }
    let root = root.as_ref();
    let base: LandmarkMesh<f64> = cfg.base_mesh()?;
    let cams: Vec<Camera<f64>> = cfg.cameras()?;
    let bg = cfg.background;
    let ext = if cfg.float_images { "rgbf" } else { "png" };
    let subjects = (0..n_subjects)
        .into_par_iter()
        .map(|i| -> Result<SubjectEntry> {
            let id = subject_id(i);
            let labels = default_labels(i);
            let subject = generate_subject(subject_seed(cfg.seed, i), &base, &labels, cfg)?;
            let dir = format!("subjects/{id}");
            std::fs::create_dir_all(root.join(&dir)).map_err(|e| Error::validation(format!("{dir}: {e}")))?;
            let landmark_file = format!("{dir}/landmarks.json");
            let gt_model_file = format!("{dir}/gt_model.json");
            save_landmarks(root.join(&landmark_file), &subject.mesh)?;
            let model = subject.model.with_metadata("subject_id", id.clone());
            save_model(root.join(&gt_model_file), &model)?;
            let mut views = Vec::with_capacity(cams.len());
            for (v, cam) in cams.iter().enumerate() {
                let camera_file = format!("{dir}/cam_{v:02}.json");
                let image_file = format!("{dir}/img_{v:02}.{ext}");
                save_camera(root.join(&camera_file), cam)?;
                let img = render(&model, cam, bg);
                if cfg.float_images {
                    img.save_raw_f32(root.join(&image_file))?;
                } else {
                    img.save_png(root.join(&image_file))?;
                }
                views.push(ViewEntry {
                    camera_file,
                    image_file,
                });
            }
            Ok(SubjectEntry {
                id,
                landmark_file,
                gt_model_file,
                attribute_labels: labels,
                views,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        subjects,
        global: GlobalInfo {
            n_views: cams.len(),
            image_res: cfg.image_res,
            background: bg,
            seed: cfg.seed,
        },
    };
    manifest.save()?;
    Ok(manifest)
}

/// Random ±1 draw, for callers that want unbalanced labels.
pub fn random_label(rng: &mut impl Rng) -> i8 {
    if rng.random::<bool>() {
        1
    } else {
        -1
    }
}

/// Synthetic labeled codes `w = z + y·sep·d` with `z ~ N(0, I)`, labels
/// alternating ±1 and `d` a random unit direction. Returns
/// `(codes, labels, d)`.
pub fn planted_codes<T: Scalar>(n: usize, dim: usize, separation: f64, seed: u64) -> (Vec<Vec<T>>, Vec<i8>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let raw: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    let d: Vec<f64> = raw.iter().map(|x| x / norm).collect();
    let labels: Vec<i8> = (0..n).map(|i| if i % 2 == 0 { 1 } else { -1 }).collect();
    let codes = labels
        .iter()
        .map(|&y| {
            d.iter()
                .map(|&di| T::lit(normal.sample(&mut rng) + y as f64 * separation * di))
                .collect()
        })
        .collect();
    (codes, labels, d)
}
