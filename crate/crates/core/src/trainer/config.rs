use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::detector::ToyDetArch;
use crate::error::{Error, Result};

/// What the unsupervised loss is divided by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnsupNormalizer {
    /// Positive cells under the pseudo labels, or 1 when there are none.
    Pseudo,
    /// Positive cells of the supervised batch in the same step, or 1.
    Supervised,
}

/// Every knob of a training run, as a flat key/value table.
///
/// Defaults follow the reference hyperparameters (tau 0.7, lambda_u 4.0,
/// EMA decay 0.5 ramped to 0.9996, MUM with p = 1 and 4 x 4 tiles in groups
/// of 4, SGD at 0.01 with momentum 0.9 and weight decay 1e-4) at desk scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub image_size: usize,
    pub channels: [usize; 3],

    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_eval: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,

    pub total_steps: u64,
    /// Evaluate teacher and student every this many steps (0: only at the end).
    pub eval_interval: u64,

    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,

    /// Train on labeled data only; the teacher still follows by EMA.
    pub supervised_only: bool,
    pub tau: f64,
    pub lambda_u: f64,
    /// Include box regression on pseudo boxes in the unsupervised loss.
    pub unsup_reg: bool,
    pub unsup_normalizer: UnsupNormalizer,
    /// Steps at the start during which the unsupervised term has zero weight.
    pub burn_in_steps: u64,
    pub delta_init: f64,
    pub delta_final: f64,
    pub ramp_end_step: u64,

    pub mum_probability: f64,
    pub group_size: usize,
    pub tiles_per_axis: usize,

    /// Score floor applied to teacher output before NMS and the tau filter.
    pub teacher_score_floor: f64,
    pub eval_score_floor: f64,
    pub nms_iou: f64,

    pub flip_prob: f64,
    pub contrast_min: f32,
    pub contrast_max: f32,
    pub brightness_min: f32,
    pub brightness_max: f32,
    pub cutout_min: usize,
    pub cutout_max: usize,
    pub cutout_size_min: f64,
    pub cutout_size_max: f64,
    pub cutout_fill: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let aug = AugmentConfig::default();
        Self {
            seed: 0,
            image_size: 64,
            channels: [16, 32, 64],
            n_labeled: 100,
            n_unlabeled: 900,
            n_eval: 200,
            batch_labeled: 8,
            batch_unlabeled: 8,
            total_steps: 2000,
            eval_interval: 500,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            supervised_only: false,
            tau: 0.7,
            lambda_u: 4.0,
            unsup_reg: true,
            unsup_normalizer: UnsupNormalizer::Pseudo,
            burn_in_steps: 0,
            delta_init: 0.5,
            delta_final: 0.9996,
            ramp_end_step: 1000,
            mum_probability: 1.0,
            group_size: 4,
            tiles_per_axis: 4,
            teacher_score_floor: 0.05,
            eval_score_floor: 0.05,
            nms_iou: 0.5,
            flip_prob: aug.flip_prob,
            contrast_min: aug.contrast_range.0,
            contrast_max: aug.contrast_range.1,
            brightness_min: aug.brightness_range.0,
            brightness_max: aug.brightness_range.1,
            cutout_min: aug.cutout_count.0,
            cutout_max: aug.cutout_count.1,
            cutout_size_min: aug.cutout_size.0,
            cutout_size_max: aug.cutout_size.1,
            cutout_fill: aug.cutout_fill,
        }
    }
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Validation(format!("{name} = {v} is not in [0, 1]")));
    }
    Ok(())
}

fn check_positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::Validation(format!("{name} must be positive")));
    }
    Ok(())
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Validation(format!("config: {}", e.message())))?;
        Self::from_table(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Validation(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `key=value` overrides; values use TOML syntax, bare words are taken as strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut table = toml::Table::try_from(self).expect("config serializes");
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Validation(format!("override {item:?} is not key=value")))?;
            let key = key.trim();
            if !table.contains_key(key) {
                return Err(Error::Validation(format!("unknown config key {key:?}")));
            }
            let value = format!("v = {}", raw.trim())
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
            table.insert(key.to_string(), value);
        }
        Self::from_table(table)
    }

    pub fn arch(&self) -> ToyDetArch {
        ToyDetArch {
            input_size: self.image_size,
            in_channels: 3,
            channels: self.channels,
            num_classes: super::dataset::NUM_CLASSES,
        }
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            flip_prob: self.flip_prob,
            contrast_range: (self.contrast_min, self.contrast_max),
            brightness_range: (self.brightness_min, self.brightness_max),
            cutout_count: (self.cutout_min, self.cutout_max),
            cutout_size: (self.cutout_size_min, self.cutout_size_max),
            cutout_fill: self.cutout_fill,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("tau", self.tau),
            ("delta_init", self.delta_init),
            ("delta_final", self.delta_final),
            ("mum_probability", self.mum_probability),
            ("teacher_score_floor", self.teacher_score_floor),
            ("eval_score_floor", self.eval_score_floor),
            ("flip_prob", self.flip_prob),
        ] {
            check_unit(name, v)?;
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return Err(Error::Validation(format!("nms_iou = {} is not in (0, 1)", self.nms_iou)));
        }
        if self.delta_init > self.delta_final {
            return Err(Error::Validation(format!(
                "delta_init {} exceeds delta_final {}",
                self.delta_init, self.delta_final
            )));
        }
        if self.ramp_end_step == 0 {
            return Err(Error::Validation("ramp_end_step must be positive".into()));
        }
        for (name, v) in [("lr", self.lr), ("momentum", self.momentum), ("weight_decay", self.weight_decay), ("lambda_u", self.lambda_u)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Validation(format!("{name} = {v} must be finite and non-negative")));
            }
        }
        check_positive("batch_labeled", self.batch_labeled)?;
        check_positive("batch_unlabeled", self.batch_unlabeled)?;
        check_positive("group_size", self.group_size)?;
        check_positive("tiles_per_axis", self.tiles_per_axis)?;
        if self.total_steps > 0 {
            check_positive("n_labeled", self.n_labeled)?;
            if !self.supervised_only {
                check_positive("n_unlabeled", self.n_unlabeled)?;
            }
        }
        let arch = self.arch();
        arch.validate().map_err(|e| Error::Validation(format!("image_size/channels: {e}")))?;
        if !self.image_size.is_multiple_of(self.tiles_per_axis) {
            return Err(Error::Validation(format!(
                "image height/width {} is not divisible by tiles_per_axis {}",
                self.image_size, self.tiles_per_axis
            )));
        }
        arch.check_tiles(self.tiles_per_axis)
            .map_err(|e| Error::Validation(e.to_string()))?;
        self.augment()
            .validate()
            .map_err(|e| Error::Validation(format!("augmentation: {e}")))
    }
}
