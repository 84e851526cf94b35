//! Desk-scale open-world benchmark on synthetic scenes: rectangles are the
//! known class, discs and triangles are never annotated for training.

use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{DeoeError, Result};
use crate::evalkit::{align_frames, evaluate_frames, ClassSplit, EvalConfig, EvalReport, FrameInstance};
use crate::events::{synth_scene, AnnotationRecord, EventStream, SceneSpec, ShapeKind, ShapePopulation};
use crate::heads::HeadLayout;
use crate::infer::{run_stream, InferConfig};
use crate::model::DetectorConfig;
use crate::sampling::{ScreeningConfig, VariantMode};
use crate::trainer::{run_training, RunOptions, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub sensor: u16,
    pub known_per_kind: usize,
    /// Instances per never-annotated kind.
    pub unknown_per_kind: usize,
    pub size: [f64; 2],
    pub speed: [f64; 2],
    /// Speed range of the never-annotated kinds.
    pub unknown_speed: [f64; 2],
    /// Size range of the never-annotated kinds.
    pub unknown_size: [f64; 2],
    pub noise_rate: f64,
    pub scene_duration_us: u64,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub detector: DetectorConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            sensor: 128,
            known_per_kind: 2,
            unknown_per_kind: 5,
            size: [8.0, 13.0],
            speed: [60.0, 160.0],
            unknown_speed: [350.0, 600.0],
            unknown_size: [8.0, 13.0],
            noise_rate: 0.5,
            scene_duration_us: 300_000,
            train_scenes: 24,
            test_scenes: 8,
            detector: DetectorConfig {
                t_bins: 2,
                sensor_height: 128,
                sensor_width: 128,
                downsample: true,
                widths: vec![8, 16],
                strides: vec![2, 2],
                recurrent_kernel: 3,
                head_channels: 16,
                dropout: 0.1,
                layout: HeadLayout::FULL,
            },
            train: TrainConfig {
                iterations: 800,
                batch_size: 2,
                lr: 2e-3,
                min_lr: 1e-5,
                ..TrainConfig::default()
            },
            infer: InferConfig::default(),
        }
    }
}

impl BenchmarkSpec {
    pub fn scene(&self, seed: u64) -> SceneSpec {
        let mut spec = SceneSpec::new(self.sensor, self.sensor, self.scene_duration_us, seed);
        spec.population = ShapeKind::ALL
            .into_iter()
            .map(|kind| ShapePopulation {
                kind,
                count: if kind == ShapeKind::Rectangle { self.known_per_kind } else { self.unknown_per_kind },
                size: if kind == ShapeKind::Rectangle { self.size } else { self.unknown_size },
                speed: if kind == ShapeKind::Rectangle { self.speed } else { self.unknown_speed },
                contrast: [0.5, 1.0],
            })
            .collect();
        spec.known_kinds = vec![ShapeKind::Rectangle];
        spec.noise_rate = self.noise_rate;
        spec.annotation_period_us = self.train.frame_window_us;
        spec
    }
}

const TRAIN_SEED_BASE: u64 = 10_000;
const TEST_SEED_BASE: u64 = 20_000;

/// One training configuration compared in the benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub label: String,
    pub variant: VariantMode,
    pub layout: HeadLayout,
    pub potential_count: usize,
}

impl Arm {
    pub fn new(label: &str, variant: VariantMode, layout: HeadLayout, potential_count: usize) -> Self {
        Self {
            label: label.to_string(),
            variant,
            layout,
            potential_count,
        }
    }

    pub fn deoe(n: usize) -> Self {
        Self::new(&format!("deoe_n{n}"), VariantMode::Deoe, HeadLayout::FULL, n)
    }

    pub fn ca() -> Self {
        Self::new("ca", VariantMode::Ca, HeadLayout::BASELINE, 0)
    }

    pub fn oracle() -> Self {
        Self::new("oracle", VariantMode::Oracle, HeadLayout::FULL, 0)
    }

    /// Disentangled objectness alone: single regressor, no potentials.
    pub fn disentangled_only() -> Self {
        Self::new(
            "disentangled_only",
            VariantMode::Deoe,
            HeadLayout {
                objectness: crate::heads::ObjectnessBranches::Disentangled,
                dual_regressor: false,
            },
            0,
        )
    }
}

/// `ca`, `oracle`, `dis`, `deoe` (default potential count) or `deoe<N>`.
impl FromStr for Arm {
    type Err = DeoeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ca" => Ok(Arm::ca()),
            "oracle" => Ok(Arm::oracle()),
            "dis" => Ok(Arm::disentangled_only()),
            "deoe" => Ok(Arm::deoe(ScreeningConfig::default().potential_count)),
            _ => s
                .strip_prefix("deoe")
                .and_then(|n| n.parse().ok())
                .map(Arm::deoe)
                .ok_or_else(|| DeoeError::Invalid(format!("unknown arm `{s}` (expected ca|oracle|dis|deoe|deoe<N>)"))),
        }
    }
}

pub struct Benchmark {
    pub spec: BenchmarkSpec,
    pub train: Dataset,
    pub test: Vec<(EventStream, Vec<AnnotationRecord>)>,
}

impl Benchmark {
    pub fn build(spec: BenchmarkSpec) -> Result<Self> {
        let train_specs: Vec<SceneSpec> = (0..spec.train_scenes)
            .map(|i| spec.scene(TRAIN_SEED_BASE + i as u64))
            .collect();
        let train = Dataset::from_scenes(&train_specs, spec.detector.t_bins, spec.train.frame_window_us)?;
        let test = (0..spec.test_scenes)
            .into_par_iter()
            .map(|i| synth_scene(&spec.scene(TEST_SEED_BASE + i as u64)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { spec, train, test })
    }

    pub fn configs(&self, arm: &Arm, seed: u64) -> (DetectorConfig, TrainConfig) {
        let detector = DetectorConfig {
            layout: arm.layout,
            ..self.spec.detector.clone()
        };
        let train = TrainConfig {
            seed,
            variant: arm.variant,
            screening: ScreeningConfig {
                potential_count: arm.potential_count,
                ..self.spec.train.screening
            },
            ..self.spec.train.clone()
        };
        (detector, train)
    }

    /// Trains `arm` with `seed` and evaluates it on the held-out scenes.
    pub fn run(&self, arm: &Arm, seed: u64) -> Result<EvalReport> {
        let (dcfg, tcfg) = self.configs(arm, seed);
        let outcome = run_training(&dcfg, &tcfg, &self.train, &RunOptions::default())?;
        let model = crate::trainer::detector_from_checkpoint(&outcome.checkpoint)?;
        let mut frames: Vec<FrameInstance> = Vec::new();
        let mut all_ann = Vec::new();
        for (stream, ann) in &self.test {
            let sets = run_stream(
                &model,
                stream,
                tcfg.frame_window_us,
                Some(self.spec.scene_duration_us),
                &self.spec.infer,
            )?;
            frames.extend(align_frames(&sets, ann)?);
            all_ann.extend_from_slice(ann);
        }
        let split = ClassSplit::with_known(&[ShapeKind::Rectangle.class_id()], &all_ann)?;
        evaluate_frames(&format!("{}_s{seed}", arm.label), &frames, &split, &EvalConfig::default())
    }
}
