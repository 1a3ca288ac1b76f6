//! The avatar pipeline on top of `gsavatar-core`: synthetic multi-view
//! subjects, per-subject fitting, template averaging, the residual
//! decoder, the image encoder, and latent-space refinement and editing.

pub mod artifact;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod fit;
pub mod latent;
pub mod mesh;
pub mod synth;
pub mod template;

use gsavatar_core::Scalar;
use ndarray::{LinalgScalar, ScalarOperand};

/// Scalar usable in the dense network code: a core [`Scalar`] that ndarray
/// can multiply.
pub trait Real: Scalar + LinalgScalar + ScalarOperand {}

impl<T: Scalar + LinalgScalar + ScalarOperand> Real for T {}

pub use decoder::{Decoder, DecoderArch};
pub use encoder::{Encoder, EncoderArch};
pub use latent::AttributeDirection;
pub use mesh::LandmarkMesh;
pub use synth::DatasetManifest;

pub type LandmarkMesh64 = LandmarkMesh<f64>;
pub type LandmarkMesh32 = LandmarkMesh<f32>;
pub type Decoder64 = Decoder<f64>;
pub type Decoder32 = Decoder<f32>;
pub type Encoder64 = Encoder<f64>;
pub type Encoder32 = Encoder<f32>;
