//! Run configuration, loaded from TOML.
//!
//! [`Config::default`] carries the full-size network widths and training
//! hyperparameters. [`Config::desk`] shrinks widths, batch and sample counts
//! so training finishes in minutes on one CPU core.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Master seed for initialization and sampling.
    pub seed: u64,
    pub image: ImageConfig,
    pub model: ModelConfig,
    pub render: RenderConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub blend: BlendConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageConfig {
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Channels of the per-pixel feature maps.
    pub feature_dim: usize,
    /// Channel widths of the four downsampling encoder blocks.
    pub encoder_widths: Vec<usize>,
    /// Frequency levels for canonical positions.
    pub position_freqs: usize,
    /// Frequency levels for view directions.
    pub direction_freqs: usize,
    /// Frequency levels for point-to-joint distances.
    pub distance_freqs: usize,
    /// Hidden widths of the per-view feature weighting network.
    pub view_weight_hidden: Vec<usize>,
    /// Hidden widths of the deformation residual network.
    pub deform_hidden: Vec<usize>,
    /// Bound on the deformation residual, meters.
    pub deform_max: f64,
    /// Whether the aggregated feature is an input to the deformation network.
    pub deform_uses_features: bool,
    /// Width of the radiance-field trunk.
    pub field_width: usize,
    /// Number of trunk layers.
    pub field_depth: usize,
    /// Trunk layer whose input is concatenated with the encoded position.
    pub field_skip: usize,
    /// Hidden widths of the color head.
    pub color_hidden: Vec<usize>,
    /// Hidden widths of the appearance blending network.
    pub blend_hidden: Vec<usize>,
    /// Gaussian falloff of the skinning weights, meters.
    pub skinning_tau: f64,
    /// Dilation of the posed-joint bounding box, meters.
    pub bounds_margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub coarse_samples: usize,
    pub fine_samples: usize,
    /// Uniform probability mass mixed into the importance-sampling PDF.
    pub importance_floor: f64,
    /// Rays per chunk when rendering whole images.
    pub chunk_rays: usize,
    /// Alpha below which a pixel counts as background for depth maps.
    pub background_alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_rays: usize,
    /// Weight of the silhouette term.
    pub mask_weight: f64,
    pub lr_start: f64,
    pub lr_end: f64,
    /// Steps over which the learning rate decays; 0 means `steps`.
    pub lr_horizon: u64,
    /// Number of source views feeding the feature aggregation.
    pub source_views: usize,
    /// Probability of withholding the target's own view from its sources
    /// on steps where the dataset has no other view to take its place.
    pub target_dropout: f64,
    /// Fraction of batch rays drawn from the dilated foreground mask.
    pub foreground_fraction: f64,
    /// Mask dilation radius in pixels for foreground ray sampling.
    pub mask_dilation: usize,
    pub log_every: u64,
    /// Validation PSNR cadence; 0 disables.
    pub validate_every: u64,
    /// Checkpoint cadence; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub steps: u64,
    pub lr_start: f64,
    pub lr_end: f64,
    /// Also optimize the image encoder (frozen by default).
    pub train_encoder: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DepthSource {
    /// Depth rendered by the radiance field.
    Rendered,
    /// Depth maps stored in the dataset.
    Dataset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlendConfig {
    pub steps: u64,
    pub batch_pixels: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    /// Visibility threshold on the depth residual, meters.
    pub visibility_eps: f64,
    /// Multiplier applied to `visibility_eps`.
    pub scene_scale: f64,
    /// Fraction of training targets whose own view is removed from the
    /// candidate sources.
    pub leave_one_out_fraction: f64,
    /// Where source-view depth comes from at inference.
    pub source_depth: DepthSource,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 7,
            image: ImageConfig::default(),
            model: ModelConfig::default(),
            render: RenderConfig::default(),
            train: TrainConfig::default(),
            finetune: FinetuneConfig::default(),
            blend: BlendConfig::default(),
        }
    }
}

impl Default for ImageConfig {
    fn default() -> Self {
        Self { width: 64, height: 64 }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            encoder_widths: vec![32, 64, 128, 256],
            position_freqs: 10,
            direction_freqs: 4,
            distance_freqs: 4,
            view_weight_hidden: vec![256, 256, 256, 256, 128],
            deform_hidden: vec![256, 256, 256, 256, 128],
            deform_max: 0.05,
            deform_uses_features: true,
            field_width: 256,
            field_depth: 7,
            field_skip: 4,
            color_hidden: vec![256, 128],
            blend_hidden: vec![256, 256, 256, 256, 256, 256, 128],
            skinning_tau: 0.05,
            bounds_margin: 0.3,
        }
    }
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            coarse_samples: 32,
            fine_samples: 64,
            importance_floor: 1e-2,
            chunk_rays: 1024,
            background_alpha: 0.05,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 8000,
            batch_rays: 4096,
            mask_weight: 0.1,
            lr_start: 1e-4,
            lr_end: 1e-5,
            lr_horizon: 0,
            source_views: 6,
            target_dropout: 0.5,
            foreground_fraction: 0.5,
            mask_dilation: 2,
            log_every: 50,
            validate_every: 0,
            checkpoint_every: 0,
        }
    }
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr_start: 1e-4,
            lr_end: 1e-5,
            train_encoder: false,
        }
    }
}

impl Default for BlendConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_pixels: 1024,
            lr_start: 1e-4,
            lr_end: 1e-5,
            visibility_eps: 0.02,
            scene_scale: 1.0,
            leave_one_out_fraction: 0.5,
            source_depth: DepthSource::Rendered,
        }
    }
}

impl Config {
    /// Desk-scale profile: narrow networks, small batches, short schedules.
    pub fn desk() -> Self {
        let mut c = Config::default();
        c.model = ModelConfig {
            feature_dim: 16,
            encoder_widths: vec![16, 32, 32, 64],
            position_freqs: 6,
            view_weight_hidden: vec![32, 32],
            deform_hidden: vec![64, 32],
            field_width: 96,
            field_depth: 4,
            field_skip: 2,
            color_hidden: vec![64, 32],
            blend_hidden: vec![64, 64, 32],
            ..ModelConfig::default()
        };
        c.render.coarse_samples = 16;
        c.render.fine_samples = 32;
        c.train = TrainConfig {
            steps: 3000,
            batch_rays: 256,
            lr_start: 2e-3,
            lr_end: 1e-4,
            source_views: 4,
            log_every: 100,
            ..TrainConfig::default()
        };
        c.finetune = FinetuneConfig {
            steps: 300,
            lr_start: 5e-4,
            lr_end: 5e-5,
            ..FinetuneConfig::default()
        };
        c.blend = BlendConfig {
            steps: 800,
            batch_pixels: 512,
            lr_start: 2e-3,
            lr_end: 2e-4,
            ..BlendConfig::default()
        };
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "default" | "paper" => Ok(Self::default()),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected desk or default)"))),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: Config = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Canonical text used for hashing and checkpoint embedding.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// FNV-1a hash of [`Config::canonical_json`].
    pub fn hash(&self) -> u64 {
        fnv1a(self.canonical_json().as_bytes())
    }

    pub fn lr_horizon(&self) -> u64 {
        if self.train.lr_horizon == 0 {
            self.train.steps.max(1)
        } else {
            self.train.lr_horizon
        }
    }

    pub fn visibility_threshold(&self) -> f64 {
        self.blend.visibility_eps * self.blend.scene_scale
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if m.encoder_widths.len() != 4 {
            return bad("model.encoder_widths needs exactly four entries");
        }
        if m.feature_dim == 0 || m.field_width == 0 || m.field_depth == 0 {
            return bad("network widths must be positive");
        }
        if m.field_skip == 0 || m.field_skip >= m.field_depth {
            return bad("model.field_skip must lie strictly inside the trunk");
        }
        if m.deform_max < 0.0 || m.skinning_tau <= 0.0 || m.bounds_margin < 0.0 {
            return bad("deform_max, skinning_tau and bounds_margin must be nonnegative (tau positive)");
        }
        if self.image.width % 16 != 0 || self.image.height % 16 != 0 || self.image.width == 0 || self.image.height == 0 {
            return Err(Error::ImageSize {
                width: self.image.width,
                height: self.image.height,
                factor: 16,
            });
        }
        if self.render.coarse_samples == 0 {
            return bad("render.coarse_samples must be positive");
        }
        if self.train.batch_rays == 0 || self.blend.batch_pixels == 0 {
            return bad("batch sizes must be positive");
        }
        if self.train.source_views == 0 {
            return bad("train.source_views must be positive");
        }
        if !(0.0..=1.0).contains(&self.train.foreground_fraction)
            || !(0.0..=1.0).contains(&self.train.target_dropout)
            || !(0.0..=1.0).contains(&self.blend.leave_one_out_fraction)
        {
            return bad("fractions must lie in [0, 1]");
        }
        for lr in [
            self.train.lr_start,
            self.train.lr_end,
            self.finetune.lr_start,
            self.finetune.lr_end,
            self.blend.lr_start,
            self.blend.lr_end,
        ] {
            if !(lr > 0.0) {
                return bad("learning rates must be positive");
            }
        }
        Ok(())
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
