#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use gsavatar_core::{GaussianModel, Image};
use gsavatar_pipeline::decoder::{init_embeddings, DecoderBundle};
use gsavatar_pipeline::encoder::codes_hash;
use gsavatar_pipeline::fit::init_from_landmarks;
use gsavatar_pipeline::latent::MarginStats;
use gsavatar_pipeline::synth::{build_dataset, SynthConfig};
use gsavatar_pipeline::{AttributeDirection, Decoder, DecoderArch, Encoder, EncoderArch, LandmarkMesh};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

pub const W_DIM: usize = 4;

pub fn small_arch() -> DecoderArch {
    DecoderArch {
        w_dim: W_DIM,
        e_dim: 12,
        hidden: 16,
        frequencies: 2,
        ..DecoderArch::default()
    }
}

pub fn tiny_synth() -> SynthConfig {
    SynthConfig {
        rings: 3,
        segments: 5,
        n_views: 2,
        image_res: 16,
        ..SynthConfig::default()
    }
}

pub fn template() -> GaussianModel<f64> {
    init_from_landmarks(&LandmarkMesh::uv_sphere(3, 5).unwrap()).unwrap()
}

pub struct Fixture {
    pub dir: TempDir,
    pub bundle: DecoderBundle<f64>,
}

impl Fixture {
    pub fn root(&self) -> &Path {
        self.dir.path()
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }
}

/// Artifact directory with a small decoder, encoder, one direction named
/// `smile` and a two-subject dataset. `zero_decoder` keeps the freshly
/// initialized decoder, whose output is exactly zero.
pub fn artifacts(zero_decoder: bool) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let template = template();
    let mut decoder = Decoder::<f64>::new(small_arch(), 1).unwrap();
    if !zero_decoder {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for p in decoder.params.iter_mut() {
            *p += rng.random_range(-0.05..0.05);
        }
    }
    let embeddings = init_embeddings(&template, 2).unwrap();
    let codes: BTreeMap<String, Vec<f64>> = [
        ("s0".to_string(), vec![0.5, -0.2, 0.1, 0.0]),
        ("s1".to_string(), vec![-0.3, 0.4, 0.0, 0.2]),
    ]
    .into_iter()
    .collect();
    let bundle = DecoderBundle {
        decoder,
        embeddings,
        template,
        codes: codes.clone(),
    };
    bundle.save(root.join("decoder")).unwrap();

    let mut encoder = Encoder::<f64>::new(
        EncoderArch {
            channels: vec![4, 8],
            head_hidden: 8,
            w_dim: W_DIM,
            input_res: 16,
        },
        2,
    )
    .unwrap();
    encoder.codes_hash = codes_hash(&codes);
    encoder.save(root.join("encoder.bin")).unwrap();

    std::fs::create_dir(root.join("directions")).unwrap();
    AttributeDirection {
        name: "smile".into(),
        n: vec![1.0, 0.0, 0.0, 0.0],
        b: 0.1,
        stats: MarginStats::default(),
    }
    .save(root.join("directions/smile.json"))
    .unwrap();

    build_dataset(root.join("data"), 2, &tiny_synth()).unwrap();
    Fixture { dir, bundle }
}

pub fn gray_png(w: u32, h: u32, v: f64) -> Vec<u8> {
    Image::<f64>::filled(w, h, [v, v * 0.8, v * 0.6]).unwrap().encode_png().unwrap()
}
