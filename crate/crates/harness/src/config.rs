//! Experiment configuration: a flat TOML table with fixed key names.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use c2f_core::encode::BoxRaster;
use c2f_core::nn::{Head, ModelSpec};
use c2f_core::optim::SgdConfig;
use c2f_core::schedule::{SamplingMode, Schedule, Strategy};
use c2f_core::tasks::{TaskConfig, TaskFamily};
use c2f_core::train::{InferOptions, TrainOptions};

use crate::error::HarnessError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskName {
    Loc,
    Cls,
    Seg,
}

impl TaskName {
    pub fn family(self) -> TaskFamily {
        match self {
            TaskName::Loc => TaskFamily::Localization,
            TaskName::Cls => TaskFamily::Classification,
            TaskName::Seg => TaskFamily::Segmentation,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyName {
    Bl,
    Ind,
    Jnt,
    Pt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RasterName {
    Soft,
    Hard,
}

/// Everything needed to reproduce one run except the seed.
///
/// Schedule positions (`hold`, `ramp_end`) and learning-rate drop points
/// (`lr_drops`) are fractions of `total_iters`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskName,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub noise: f64,
    pub distractors: usize,
    pub jitter: f64,
    pub data_seed: u64,
    pub widths: Vec<usize>,
    pub strategy: StrategyName,
    pub t0: f64,
    pub hold: f64,
    pub ramp_end: f64,
    pub sampling: SamplingMode,
    pub raster: RasterName,
    pub raster_k: f64,
    pub crop_margin: Option<usize>,
    pub lr: f64,
    pub momentum: f64,
    pub lr_drops: Vec<f64>,
    pub lr_drop_factor: f64,
    pub total_iters: usize,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Defaults for each task family.
    pub fn preset(task: TaskName) -> Self {
        let base = Self {
            task,
            height: 48,
            width: 48,
            channels: 1,
            classes: 1,
            n_train: 1000,
            n_test: 200,
            noise: 0.1,
            distractors: 2,
            jitter: 1.0,
            data_seed: 0,
            widths: vec![8, 8, 16, 16],
            strategy: StrategyName::Pt,
            t0: 0.5,
            hold: 0.0,
            ramp_end: 0.6,
            sampling: SamplingMode::Hard,
            raster: RasterName::Soft,
            raster_k: 1.0,
            crop_margin: None,
            lr: 0.01,
            momentum: 0.9,
            lr_drops: vec![0.75, 0.833_333, 0.916_667],
            lr_drop_factor: 0.5,
            total_iters: 3000,
            batch_size: 4,
            seeds: vec![1],
            output_dir: PathBuf::from("runs"),
        };
        match task {
            // A higher rate kills most units early in some seeds.
            TaskName::Loc => Self {
                lr: 0.005,
                n_train: 500,
                raster_k: 4.0,
                ..base
            },
            TaskName::Cls => Self {
                classes: 10,
                distractors: 0,
                noise: 0.3,
                widths: vec![8, 16],
                height: 32,
                width: 32,
                n_train: 1000,
                n_test: 500,
                lr: 0.005,
                ..base
            },
            TaskName::Seg => Self {
                widths: vec![8, 8, 8],
                t0: 0.0,
                hold: 1.0 / 3.0,
                ramp_end: 2.0 / 3.0,
                crop_margin: Some(2),
                total_iters: 2400,
                batch_size: 1,
                ..base
            },
        }
    }

    /// Parses a (possibly partial) config; keys left out take the preset
    /// values of the file's `task`.
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let parse_err = |e: toml::de::Error| HarnessError::Config {
            field: field_of(&e.to_string()),
            message: e.message().to_string(),
        };
        let user: toml::Table = toml::from_str(text).map_err(parse_err)?;
        let task: TaskName = match user.get("task") {
            Some(v) => v.clone().try_into().map_err(parse_err)?,
            None => {
                return Err(HarnessError::Config {
                    field: "task".into(),
                    message: "missing field `task`".into(),
                })
            }
        };
        let mut merged: toml::Table = toml::from_str(&Self::preset(task).to_toml_string())
            .expect("preset always parses");
        merged.extend(user);
        let cfg: Self = toml::Value::Table(merged).try_into().map_err(parse_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    /// Checks every constraint before any compute happens.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |field: &str, message: String| {
            Err(HarnessError::Config {
                field: field.to_string(),
                message,
            })
        };
        if let Err(e) = self.task_config().validate() {
            return fail("task", e.to_string());
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return fail("widths", "need at least one non-zero width".into());
        }
        if self.total_iters == 0 {
            return fail("total_iters", "must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size", "must be at least 1".into());
        }
        if self.seeds.is_empty() {
            return fail("seeds", "need at least one seed".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr", format!("must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum", format!("must be in [0, 1), got {}", self.momentum));
        }
        if let Some(d) = self.lr_drops.iter().find(|d| !(0.0..=1.0).contains(*d)) {
            return fail("lr_drops", format!("fraction {d} is outside [0, 1]"));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor <= 1.0) {
            return fail("lr_drop_factor", "must be in (0, 1]".into());
        }
        if self.raster == RasterName::Soft && !(self.raster_k > 0.0 && self.raster_k.is_finite()) {
            return fail("raster_k", format!("must be positive, got {}", self.raster_k));
        }
        if self.crop_margin.is_some() && self.task != TaskName::Seg {
            return fail("crop_margin", "only segmentation crops".into());
        }
        if !(0.0..=1.0).contains(&self.t0) {
            return fail("t0", format!("must be in [0, 1], got {}", self.t0));
        }
        if !(0.0..=1.0).contains(&self.hold) {
            return fail("hold", format!("must be in [0, 1], got {}", self.hold));
        }
        if !(0.0..=1.0).contains(&self.ramp_end) {
            return fail("ramp_end", format!("must be in [0, 1], got {}", self.ramp_end));
        }
        if self.hold > self.ramp_end {
            return fail("hold", format!("{} exceeds ramp_end {}", self.hold, self.ramp_end));
        }
        if let Err(e) = self.build_strategy() {
            return fail("ramp_end", e.to_string());
        }
        Ok(())
    }

    pub fn task_config(&self) -> TaskConfig {
        TaskConfig {
            family: self.task.family(),
            height: self.height,
            width: self.width,
            channels: self.channels,
            classes: self.classes,
            n_train: self.n_train,
            n_test: self.n_test,
            noise: self.noise,
            distractors: self.distractors,
            jitter: self.jitter,
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        let head = match self.task {
            TaskName::Loc => Head::Box,
            TaskName::Cls => Head::Classes(self.classes),
            TaskName::Seg => Head::Mask,
        };
        ModelSpec::backbone(self.channels, self.height, self.width, &self.widths, head)
    }

    pub fn box_raster(&self) -> BoxRaster {
        match self.raster {
            RasterName::Soft => BoxRaster::Soft { k: self.raster_k },
            RasterName::Hard => BoxRaster::Hard,
        }
    }

    pub fn build_strategy(&self) -> c2f_core::Result<Strategy> {
        Ok(match self.strategy {
            StrategyName::Bl => Strategy::Baseline,
            StrategyName::Ind => Strategy::Individual,
            StrategyName::Jnt => Strategy::Joint,
            StrategyName::Pt => Strategy::Progressive(Schedule::from_fractions(
                self.t0,
                self.hold,
                self.ramp_end,
                self.total_iters,
            )?),
        })
    }

    pub fn sgd(&self) -> SgdConfig {
        let at = |f: f64| (f * self.total_iters as f64).round() as usize;
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            drops: self.lr_drops.iter().map(|&f| at(f)).collect(),
            drop_factor: self.lr_drop_factor,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            sampling: self.sampling,
            crop_margin: self.crop_margin,
        }
    }

    pub fn infer_options(&self) -> InferOptions {
        InferOptions {
            crop_margin: self.crop_margin,
        }
    }

    /// SHA-256 of the config's canonical JSON form (object keys sorted).
    pub fn fingerprint(&self) -> String {
        let value = serde_json::to_value(self).expect("config always serializes");
        fingerprint_value(&value)
    }
}

/// SHA-256 over compact JSON with keys sorted at every level.
pub fn fingerprint_value(value: &serde_json::Value) -> String {
    let canonical = canonicalize(value).to_string();
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

fn canonicalize(value: &serde_json::Value) -> serde_json::Value {
    use serde_json::Value;
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let mut out = serde_json::Map::new();
            for k in keys {
                out.insert(k.clone(), canonicalize(&map[k]));
            }
            Value::Object(out)
        }
        Value::Array(items) => Value::Array(items.iter().map(canonicalize).collect()),
        v => v.clone(),
    }
}

/// Best-effort extraction of the offending key from a TOML error message.
fn field_of(message: &str) -> String {
    for marker in ["unknown field `", "missing field `"] {
        if let Some(rest) = message.split(marker).nth(1) {
            if let Some(name) = rest.split('`').next() {
                return name.to_string();
            }
        }
    }
    if let Some(line) = message.lines().find(|l| l.contains('=')) {
        if let Some(key) = line.split('=').next() {
            let key = key.trim_start_matches(|c: char| c.is_ascii_digit() || c == ' ' || c == '|');
            return key.trim().to_string();
        }
    }
    "config".to_string()
}
