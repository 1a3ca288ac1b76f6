//! JSON file formats for models and cameras, plus content hashing.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::camera::{Camera, CameraFile};
use crate::error::{Error, Result};
use crate::gaussian::{flatten_params, Gaussian, GaussianModel};
use crate::sh::{SH_COEFFS, SH_DEGREE};
use crate::Scalar;

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Model JSON. Stores activated parameters (not residuals).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub version: u32,
    pub k: usize,
    pub sh_degree: usize,
    pub positions: Vec<[f64; 3]>,
    pub scales: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub opacities: Vec<f64>,
    pub sh: Vec<Vec<f64>>,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl<T: Scalar> From<&GaussianModel<T>> for ModelFile {
    fn from(m: &GaussianModel<T>) -> Self {
        let f = |v: T| v.as_f64();
        let gs = m.gaussians();
        ModelFile {
            version: MODEL_FORMAT_VERSION,
            k: gs.len(),
            sh_degree: SH_DEGREE,
            positions: gs.iter().map(|g| g.position.map(f)).collect(),
            scales: gs.iter().map(|g| g.scale.map(f)).collect(),
            rotations: gs.iter().map(|g| g.rotation.map(f)).collect(),
            opacities: gs.iter().map(|g| f(g.opacity)).collect(),
            sh: gs.iter().map(|g| g.sh.iter().map(|&v| f(v)).collect()).collect(),
            metadata: m.metadata.clone(),
        }
    }
}

impl ModelFile {
    pub fn to_model<T: Scalar>(&self) -> Result<GaussianModel<T>> {
        if self.version != MODEL_FORMAT_VERSION {
            return Err(Error::validation(format!("unsupported model version {}", self.version)));
        }
        if self.sh_degree != SH_DEGREE {
            return Err(Error::validation(format!("unsupported sh_degree {}", self.sh_degree)));
        }
        let k = self.k;
        let lens = [
            self.positions.len(),
            self.scales.len(),
            self.rotations.len(),
            self.opacities.len(),
            self.sh.len(),
        ];
        if let Some(&bad) = lens.iter().find(|&&l| l != k) {
            return Err(Error::Dimension {
                what: "model file arrays",
                expected: k,
                got: bad,
            });
        }
        let c = |v: f64| T::lit(v);
        let mut gaussians = Vec::with_capacity(k);
        for i in 0..k {
            if self.sh[i].len() != SH_COEFFS {
                return Err(Error::Dimension {
                    what: "sh coefficients",
                    expected: SH_COEFFS,
                    got: self.sh[i].len(),
                });
            }
            let mut sh = [T::zero(); SH_COEFFS];
            for (o, &v) in sh.iter_mut().zip(&self.sh[i]) {
                *o = c(v);
            }
            gaussians.push(Gaussian {
                position: self.positions[i].map(c),
                scale: self.scales[i].map(c),
                rotation: self.rotations[i].map(c),
                opacity: c(self.opacities[i]),
                sh,
            });
        }
        let mut m = GaussianModel::new(gaussians)?;
        m.metadata = self.metadata.clone();
        Ok(m)
    }
}

pub fn write_json<S: Serialize>(path: impl AsRef<Path>, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path.as_ref(), text).map_err(|e| Error::io(path, e))
}

pub fn read_json<D: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<D> {
    let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn save_model<T: Scalar>(path: impl AsRef<Path>, model: &GaussianModel<T>) -> Result<()> {
    write_json(path, &ModelFile::from(model))
}

pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<GaussianModel<T>> {
    read_json::<ModelFile>(path)?.to_model()
}

pub fn save_camera<T: Scalar>(path: impl AsRef<Path>, cam: &Camera<T>) -> Result<()> {
    write_json(path, &CameraFile::from(cam))
}

pub fn load_camera<T: Scalar>(path: impl AsRef<Path>) -> Result<Camera<T>> {
    read_json::<CameraFile>(path)?.to_camera()
}

/// SHA-256 over a slice of scalars, as little-endian `f64`.
pub fn hash_scalars<T: Scalar>(values: &[T]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.as_f64().to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Hash of a model's parameters (metadata excluded).
pub fn model_hash<T: Scalar>(model: &GaussianModel<T>) -> String {
    hash_scalars(&flatten_params(model))
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
