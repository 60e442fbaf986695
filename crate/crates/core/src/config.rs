//! Flat TOML run configuration. Every key has a default; unknown keys are
//! rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask_head::{BaseFeatureLevels, DivisionRule, MaskHeadConfig, REFERENCE_DIVISOR, REFERENCE_WIDTH};
use crate::model::{InferConfig, LossWeights, ModelConfig};
use crate::tracking_head::{RadiusSource, TrackerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    // model
    pub num_classes: usize,
    pub feat_channels: usize,
    pub backbone_widths: [usize; 4],
    pub tower_depth: usize,
    pub base_hidden: usize,
    pub base_channels: usize,
    /// Maximum sub-regions per box side.
    pub division_cap: usize,
    /// Pixels per sub-region step; unset means `50 · width / 640`.
    pub eq1_divisor: Option<f64>,
    pub upsample_factor: usize,
    pub base_feature_levels: BaseFeatureLevels,
    pub center_sampling: bool,
    /// Radius in strides when `center_sampling` is on.
    pub center_radius: f64,

    // training
    pub lr: f64,
    pub momentum: f64,
    /// Learning-rate factor applied once per epoch.
    pub lr_decay: f64,
    pub steps: usize,
    /// Frames per training clip.
    pub clip_length: usize,
    pub track_warmup_steps: usize,
    pub grad_clip: f64,
    pub w_cls: f64,
    pub w_cent: f64,
    pub w_box: f64,
    pub w_mask: f64,
    pub w_track: f64,
    pub seed: u64,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,

    // inference
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub top_k: usize,
    pub max_gap: usize,
    pub match_radius_source: RadiusSource,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            num_classes: 3,
            feat_channels: 32,
            backbone_widths: [16, 32, 64, 64],
            tower_depth: 2,
            base_hidden: 64,
            base_channels: 36,
            division_cap: 6,
            eq1_divisor: None,
            upsample_factor: 4,
            base_feature_levels: BaseFeatureLevels::P3P5,
            center_sampling: false,
            center_radius: 1.5,
            lr: 0.005,
            momentum: 0.9,
            lr_decay: 0.995,
            steps: 2000,
            clip_length: 8,
            track_warmup_steps: 200,
            grad_clip: 10.0,
            w_cls: 1.0,
            w_cent: 1.0,
            w_box: 1.0,
            w_mask: 1.0,
            w_track: 1.0,
            seed: 0,
            checkpoint_every: 500,
            score_threshold: 0.05,
            nms_iou: 0.6,
            top_k: 10,
            max_gap: 4,
            match_radius_source: RadiusSource::Detection,
        }
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 || self.feat_channels == 0 || self.backbone_widths.contains(&0) {
            return fail("class count, feature channels and backbone widths must be positive".into());
        }
        if self.base_hidden == 0 || self.base_channels == 0 {
            return fail("base_hidden and base_channels must be positive".into());
        }
        if self.division_cap == 0 {
            return fail("division_cap must be at least 1".into());
        }
        if let Some(d) = self.eq1_divisor {
            if !(d > 0.0 && d.is_finite()) {
                return fail(format!("eq1_divisor must be positive, got {d}"));
            }
        }
        if ![1, 2, 4].contains(&self.upsample_factor) {
            return fail(format!("upsample_factor must be 1, 2 or 4, got {}", self.upsample_factor));
        }
        if !(self.lr > 0.0) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return fail(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay));
        }
        if self.clip_length < 2 {
            return fail(format!("clip_length must be at least 2, got {}", self.clip_length));
        }
        if !(self.grad_clip > 0.0) {
            return fail("grad_clip must be positive".into());
        }
        let w = [self.w_cls, self.w_cent, self.w_box, self.w_mask, self.w_track];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return fail("loss weights must be finite and non-negative".into());
        }
        if !(self.score_threshold > 0.0 && self.score_threshold < 1.0) {
            return fail("score_threshold must lie in (0, 1)".into());
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return fail("nms_iou must lie in (0, 1)".into());
        }
        if self.top_k == 0 {
            return fail("top_k must be at least 1".into());
        }
        Ok(())
    }

    /// Sub-region rule for frames of the given width.
    pub fn division_rule(&self, image_width: usize) -> DivisionRule {
        DivisionRule {
            divisor: self
                .eq1_divisor
                .unwrap_or(REFERENCE_DIVISOR * image_width as f64 / REFERENCE_WIDTH),
            cap: self.division_cap,
        }
    }

    pub fn model_config(&self, image_width: usize) -> ModelConfig {
        ModelConfig {
            num_classes: self.num_classes,
            feat_channels: self.feat_channels,
            backbone_widths: self.backbone_widths,
            tower_depth: self.tower_depth,
            mask: MaskHeadConfig {
                division: self.division_rule(image_width),
                upsample_factor: self.upsample_factor,
                levels: self.base_feature_levels,
                base_channels: self.base_channels,
                base_hidden: self.base_hidden,
            },
            center_radius: self.center_sampling.then_some(self.center_radius),
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            cls: self.w_cls,
            cent: self.w_cent,
            bbox: self.w_box,
            mask: self.w_mask,
            track: self.w_track,
        }
    }

    pub fn infer_config(&self) -> InferConfig {
        InferConfig {
            score_threshold: self.score_threshold,
            nms_iou: self.nms_iou,
            top_k: self.top_k,
            tracker: TrackerConfig {
                max_gap: self.max_gap,
                radius_source: self.match_radius_source,
            },
        }
    }
}
