//! Plain-text `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, DeoeError, Result};
use crate::heads::{HeadLayout, ObjectnessBranches};
use crate::infer::InferConfig;
use crate::model::DetectorConfig;
use crate::sampling::VariantMode;
use crate::trainer::TrainConfig;

/// Ordered key/value pairs; `#` starts a comment.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| DeoeError::Invalid(format!("config line {}: expected `key = value`", i + 1)))?;
            let k = k.trim().to_string();
            if k.is_empty() {
                return invalid(format!("config line {}: empty key", i + 1));
            }
            if entries.insert(k.clone(), v.trim().to_string()).is_some() {
                return invalid(format!("config line {}: duplicate key `{k}`", i + 1));
            }
        }
        Ok(Self { entries })
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.get_str(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| DeoeError::Invalid(format!("config key `{key}` = `{v}`: {e}")))
            })
            .transpose()
    }

    pub fn get_list(&self, key: &str) -> Result<Option<Vec<usize>>> {
        self.get_str(key)
            .map(|v| {
                v.split(',')
                    .map(|p| {
                        p.trim()
                            .parse::<usize>()
                            .map_err(|e| DeoeError::Invalid(format!("config key `{key}` = `{v}`: {e}")))
                    })
                    .collect()
            })
            .transpose()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

const KEYS: &[&str] = &[
    "seed",
    "variant",
    "potential_count",
    "pos_iou",
    "neg_iou",
    "sequence_length",
    "batch_size",
    "lr",
    "min_lr",
    "warmup_frac",
    "iterations",
    "frame_window_us",
    "grad_clip",
    "checkpoint_every",
    "t_bins",
    "sensor_width",
    "sensor_height",
    "downsample",
    "widths",
    "strides",
    "recurrent_kernel",
    "head_channels",
    "dropout",
    "objectness",
    "dual_regressor",
    "score_threshold",
    "nms_iou",
    "max_detections",
    "scene",
    "train_scenes",
];

/// Everything a training or inference run needs, resolved from a
/// [`KvConfig`] over defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub detector: DetectorConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    /// Scene template (TOML) used to synthesize training recordings.
    pub scene: Option<PathBuf>,
    /// Number of recordings synthesized from `scene`; recording `i` uses the
    /// template seed plus `i`.
    pub train_scenes: usize,
    pub checkpoint_every: u64,
}

fn parse_objectness(v: &str) -> Result<ObjectnessBranches> {
    match v {
        "disentangled" => Ok(ObjectnessBranches::Disentangled),
        "pos_neg_only" => Ok(ObjectnessBranches::PosNegOnly),
        "pos_only" => Ok(ObjectnessBranches::PosOnly),
        _ => invalid(format!(
            "objectness `{v}` (expected disentangled|pos_neg_only|pos_only)"
        )),
    }
}

/// Layout a variant uses unless overridden: the baselines carry a single
/// positive-negative objectness branch and one regressor.
pub fn default_layout(variant: VariantMode) -> HeadLayout {
    match variant {
        VariantMode::Deoe | VariantMode::Oracle => HeadLayout::FULL,
        VariantMode::Ca | VariantMode::CaO | VariantMode::CaP => HeadLayout::BASELINE,
    }
}

impl RunConfig {
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        if let Some(k) = kv.keys().find(|k| !KEYS.contains(k)) {
            return invalid(format!("unknown config key `{k}`"));
        }
        let mut t = TrainConfig::default();
        macro_rules! take {
            ($target:expr, $key:literal) => {
                if let Some(v) = kv.get($key)? {
                    $target = v;
                }
            };
        }
        take!(t.seed, "seed");
        take!(t.variant, "variant");
        take!(t.screening.potential_count, "potential_count");
        take!(t.screening.pos_iou, "pos_iou");
        take!(t.screening.neg_iou, "neg_iou");
        take!(t.sequence_length, "sequence_length");
        take!(t.batch_size, "batch_size");
        take!(t.lr, "lr");
        take!(t.min_lr, "min_lr");
        take!(t.warmup_frac, "warmup_frac");
        take!(t.iterations, "iterations");
        take!(t.frame_window_us, "frame_window_us");
        take!(t.grad_clip, "grad_clip");

        let mut d = DetectorConfig {
            layout: default_layout(t.variant),
            ..DetectorConfig::default()
        };
        take!(d.t_bins, "t_bins");
        take!(d.sensor_width, "sensor_width");
        take!(d.sensor_height, "sensor_height");
        take!(d.downsample, "downsample");
        take!(d.recurrent_kernel, "recurrent_kernel");
        take!(d.head_channels, "head_channels");
        take!(d.dropout, "dropout");
        take!(d.layout.dual_regressor, "dual_regressor");
        if let Some(v) = kv.get_list("widths")? {
            d.widths = v;
        }
        if let Some(v) = kv.get_list("strides")? {
            d.strides = v;
        }
        if let Some(v) = kv.get_str("objectness") {
            d.layout.objectness = parse_objectness(v)?;
        }

        let mut i = InferConfig::default();
        take!(i.score_threshold, "score_threshold");
        take!(i.nms_iou, "nms_iou");
        take!(i.max_detections, "max_detections");

        let mut cfg = Self {
            detector: d,
            train: t,
            infer: i,
            scene: kv.get_str("scene").map(PathBuf::from),
            train_scenes: 8,
            checkpoint_every: 0,
        };
        take!(cfg.train_scenes, "train_scenes");
        take!(cfg.checkpoint_every, "checkpoint_every");
        cfg.detector.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}
