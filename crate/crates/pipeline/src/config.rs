//! Training configuration files. Each command reads one flat JSON object;
//! missing fields take their defaults.

use std::path::Path;

use gsavatar_core::error::Result;
use gsavatar_core::io::read_json;
use serde::de::DeserializeOwned;

pub use crate::decoder::DecoderConfig;
pub use crate::encoder::EncoderConfig;
pub use crate::fit::FitConfig;
pub use crate::latent::{RefineConfig, SvmConfig};

/// Reads `path`, or returns the defaults when there is none.
pub fn load_config<C: DeserializeOwned + Default>(path: Option<&Path>) -> Result<C> {
    match path {
        Some(p) => read_json(p),
        None => Ok(C::default()),
    }
}
