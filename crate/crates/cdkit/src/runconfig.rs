//! Run configuration: an optional TOML file, overridden by command-line
//! flags, resolved once and written next to the run's outputs.
//!
//! File keys (all optional):
//!
//! ```toml
//! preset = "tiny"        # or "base"
//! dtype = "f32"          # or "f64"
//! eval_every = 1         # epochs between selection evaluations
//!
//! [train]                # any TrainConfig field
//! epochs = 200
//! batch_size = 16
//! initial_lr = 1e-4
//!
//! [train.augment]        # any AugmentConfig field
//! enabled = true
//!
//! [upsample]             # overrides the decoder's transposed conv
//! kernel = 4
//! output_padding = 0
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cdkit_core::config::{ModelConfig, TrainConfig};
use cdkit_core::DType;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub preset: Option<String>,
    pub dtype: Option<String>,
    pub eval_every: Option<usize>,
    pub train: TrainConfig,
    pub upsample: UpsampleOverride,
}

/// Optional replacement for the final upsampling geometry. Kept for
/// experiments; the shipped presets are left untouched when absent.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UpsampleOverride {
    pub kernel: Option<usize>,
    pub stride: Option<usize>,
    pub padding: Option<usize>,
    pub output_padding: Option<usize>,
}

impl UpsampleOverride {
    pub fn apply(&self, model: &mut ModelConfig) {
        let d = &mut model.decoder;
        if let Some(k) = self.kernel {
            d.upsample_kernel = k;
        }
        if let Some(s) = self.stride {
            d.upsample_stride = s;
        }
        if let Some(p) = self.padding {
            d.upsample_padding = p;
        }
        if let Some(op) = self.output_padding {
            d.upsample_output_padding = op;
        }
    }
}

impl FileConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Everything a training run depends on, fully resolved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: PathBuf,
    pub out: PathBuf,
    pub dtype: String,
    pub eval_every: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn dtype(&self) -> Result<DType> {
        match DType::parse(&self.dtype) {
            Some(d) => Ok(d),
            None => bail!("unknown dtype `{}` (expected f32 or f64)", self.dtype),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing run config")
    }

    pub fn dump(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("config.toml");
        fs::write(&path, self.to_toml()?).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
