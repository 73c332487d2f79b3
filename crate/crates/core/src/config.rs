//! Architecture and training hyperparameters.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One encoder stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub channels: usize,
    /// Transformer blocks in the stage.
    pub depth: usize,
    pub heads: usize,
    /// Sequence-reduction ratio: the key/value token count is divided by this.
    pub reduction: usize,
    /// Hidden width of the Mix-FFN as a multiple of `channels`.
    pub mlp_ratio: usize,
}

impl StageConfig {
    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub embed_dim: usize,
    pub num_classes: usize,
    pub upsample_kernel: usize,
    pub upsample_stride: usize,
    pub upsample_padding: usize,
    pub upsample_output_padding: usize,
}

impl DecoderConfig {
    pub fn new(embed_dim: usize) -> Self {
        DecoderConfig {
            embed_dim,
            num_classes: 2,
            upsample_kernel: 3,
            upsample_stride: 4,
            upsample_padding: 0,
            upsample_output_padding: 1,
        }
    }
}

/// Spatial window `(rows, cols)` folded into channels by a reduction of `r`
/// tokens: the most square factorization with `rows ≤ cols`.
pub fn reduction_window(r: usize) -> (usize, usize) {
    let mut rows = 1;
    let mut d = 1;
    while d * d <= r {
        if r.is_multiple_of(d) {
            rows = d;
        }
        d += 1;
    }
    (rows, r / rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub preset: String,
    pub in_channels: usize,
    /// Training resolution. The network itself accepts any multiple of 32.
    pub height: usize,
    pub width: usize,
    pub stages: Vec<StageConfig>,
    pub decoder: DecoderConfig,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl ModelConfig {
    fn from_parts(preset: &str, channels: [usize; 4], depth: usize, embed_dim: usize, size: usize) -> Self {
        let heads = [1, 2, 4, 8];
        let reductions = [8, 4, 2, 1];
        let stages = (0..4)
            .map(|i| StageConfig {
                channels: channels[i],
                depth,
                heads: heads[i],
                reduction: reductions[i],
                mlp_ratio: 4,
            })
            .collect();
        ModelConfig {
            preset: preset.to_string(),
            in_channels: 3,
            height: size,
            width: size,
            stages,
            decoder: DecoderConfig::new(embed_dim),
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    /// Desk-scale preset used for CI and the overfit experiments.
    pub fn tiny() -> Self {
        Self::from_parts("tiny", [8, 16, 32, 64], 1, 32, 64)
    }

    pub fn base() -> Self {
        Self::from_parts("base", [32, 64, 128, 256], 2, 256, 256)
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "base" => Ok(Self::base()),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected tiny or base)"))),
        }
    }

    pub fn with_size(mut self, height: usize, width: usize) -> Self {
        self.height = height;
        self.width = width;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.stages.len() != 4 {
            return fail(format!("expected 4 encoder stages, got {}", self.stages.len()));
        }
        if self.in_channels == 0 {
            return fail("in_channels must be positive".into());
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.channels == 0 || s.depth == 0 || s.heads == 0 || s.reduction == 0 || s.mlp_ratio == 0 {
                return fail(format!("stage {}: all sizes must be positive", i + 1));
            }
            if s.channels % s.heads != 0 {
                return fail(format!("stage {}: {} channels not divisible by {} heads", i + 1, s.channels, s.heads));
            }
            if i > 0 && s.channels <= self.stages[i - 1].channels {
                return fail(format!("stage {}: channels must strictly increase", i + 1));
            }
        }
        let d = &self.decoder;
        if d.num_classes != 2 {
            return fail(format!("num_classes must be 2 (change / no-change), got {}", d.num_classes));
        }
        if d.embed_dim == 0 {
            return fail("decoder embed_dim must be positive".into());
        }
        if d.upsample_output_padding >= d.upsample_stride {
            return fail("decoder upsample output padding must be smaller than its stride".into());
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0 && self.bn_eps > 0.0) {
            return fail("batch-norm momentum must be in (0, 1) and eps positive".into());
        }
        self.check_input(self.height, self.width)
    }

    /// Checks that a `height × width` input yields a proper pyramid and that
    /// every stage's reduction window tiles its feature map.
    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        if height == 0 || width == 0 || !height.is_multiple_of(32) || !width.is_multiple_of(32) {
            return Err(Error::Config(format!("input size {height}×{width} is not a positive multiple of 32")));
        }
        for (i, s) in self.stages.iter().enumerate() {
            let (h, w) = (height >> (i + 2), width >> (i + 2));
            let (rh, rw) = reduction_window(s.reduction);
            if h % rh != 0 || w % rw != 0 {
                return Err(Error::Config(format!(
                    "stage {}: {h}×{w} feature map cannot be tiled by the {rh}×{rw} reduction window (R={})",
                    i + 1,
                    s.reduction
                )));
            }
        }
        Ok(())
    }
}

/// Augmentation probabilities and ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    pub rescale_prob: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub blur_prob: f64,
    pub blur_sigma_max: f64,
    pub jitter_prob: f64,
    /// Brightness, contrast and saturation each vary by up to this fraction.
    pub jitter_strength: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            rescale_prob: 0.5,
            scale_min: 0.8,
            scale_max: 1.2,
            blur_prob: 0.5,
            blur_sigma_max: 1.5,
            jitter_prob: 0.5,
            jitter_strength: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 200,
            batch_size: 16,
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.initial_lr, self.weight_decay, self.adam_eps];
        if positive.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) || self.adam_eps <= 0.0 {
            return Err(Error::Config("learning rate, weight decay and adam eps must be finite and non-negative".into()));
        }
        for b in [self.beta1, self.beta2] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("beta {b} is outside (0, 1)")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let a = &self.augment;
        if !(0.0 < a.scale_min && a.scale_min <= a.scale_max) || a.blur_sigma_max < 0.0 || a.jitter_strength < 0.0 {
            return Err(Error::Config("invalid augmentation ranges".into()));
        }
        let probs = [a.hflip_prob, a.vflip_prob, a.rescale_prob, a.blur_prob, a.jitter_prob];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("augmentation probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::tiny().validate().unwrap();
        ModelConfig::base().validate().unwrap();
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn windows_are_most_square() {
        assert_eq!(reduction_window(1), (1, 1));
        assert_eq!(reduction_window(2), (1, 2));
        assert_eq!(reduction_window(4), (2, 2));
        assert_eq!(reduction_window(8), (2, 4));
        assert_eq!(reduction_window(16), (4, 4));
        assert_eq!(reduction_window(64), (8, 8));
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = ModelConfig::tiny();
        c.stages[1].channels = 8;
        assert!(c.validate().is_err());
        assert!(ModelConfig::tiny().with_size(50, 64).validate().is_err());
        let mut c = ModelConfig::tiny();
        c.decoder.num_classes = 3;
        assert!(c.validate().is_err());
        let t = TrainConfig { beta2: 1.0, ..TrainConfig::default() };
        assert!(t.validate().is_err());
    }
}
