//! Sequence training with truncated backpropagation through time.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use deoe_nncore::{Adam, Checkpoint, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Dataset, Frame};
use crate::encode::write_dump;
use crate::error::{invalid, io_err, DeoeError, Result};
use crate::heads::{CellPredictions, HeadTemporalBuffer};
use crate::loss::{frame_loss, LossBreakdown};
use crate::model::{Detector, DetectorConfig};
use crate::sampling::{variant_assign, ScreeningConfig, VariantMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub sequence_length: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    /// Fraction of iterations spent in linear warmup.
    pub warmup_frac: f64,
    pub iterations: u64,
    pub seed: u64,
    pub variant: VariantMode,
    pub screening: ScreeningConfig,
    /// Frame window in microseconds.
    pub frame_window_us: u64,
    /// Global gradient-norm clip per update; 0 disables it.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sequence_length: 5,
            batch_size: 4,
            lr: 2e-4,
            min_lr: 1e-5,
            warmup_frac: 0.05,
            iterations: 1000,
            seed: 0,
            variant: VariantMode::Deoe,
            screening: ScreeningConfig::default(),
            frame_window_us: 10_000,
            grad_clip: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sequence_length == 0 || self.batch_size == 0 {
            return invalid("sequence length and batch size must be at least 1");
        }
        if !(self.lr >= 0.0) || !(self.min_lr >= 0.0) || !(0.0..=1.0).contains(&self.warmup_frac) {
            return invalid("learning-rate schedule out of range");
        }
        if self.frame_window_us == 0 {
            return invalid("frame window must be positive");
        }
        if !(self.grad_clip >= 0.0) {
            return invalid("gradient clip must be non-negative");
        }
        self.screening.validate()
    }

    /// Linear warmup to `lr`, then cosine decay to `min_lr`.
    pub fn lr_at(&self, iteration: u64) -> f64 {
        let total = self.iterations.max(1) as f64;
        let warm = (self.warmup_frac * total).ceil();
        let it = iteration as f64;
        if it < warm {
            return self.lr * (it + 1.0) / warm;
        }
        let span = (total - warm).max(1.0);
        let progress = ((it - warm) / span).min(1.0);
        self.min_lr + 0.5 * (self.lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Mixes several words into one seed (splitmix64 finalizer per word).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

/// `(recording, first frame)` of each sequence in the batch of `iteration`.
pub fn batch_indices(dataset: &Dataset, cfg: &TrainConfig, iteration: u64) -> Result<Vec<(usize, usize)>> {
    let eligible: Vec<usize> = (0..dataset.recordings.len())
        .filter(|&r| dataset.recordings[r].len() >= cfg.sequence_length)
        .collect();
    if eligible.is_empty() {
        return invalid(format!(
            "no recording has {} frames for a training sequence",
            cfg.sequence_length
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, iteration, 0xba7c]));
    Ok((0..cfg.batch_size)
        .map(|_| {
            let r = eligible[rng.random_range(0..eligible.len())];
            let start = rng.random_range(0..=dataset.recordings[r].len() - cfg.sequence_length);
            (r, start)
        })
        .collect())
}

/// Where a non-finite loss dumps the offending frame.
#[derive(Clone, Debug, Default)]
pub struct StepContext {
    pub dump_dir: Option<PathBuf>,
}

/// One iteration: for every sequence in the batch, roll the detector over its
/// frames from a reset state, sum the frame losses, backpropagate once and take
/// one Adam step. Returns the breakdown summed over frames and averaged over
/// sequences.
pub fn train_step(
    model: &mut Detector<f32>,
    adam: &mut Adam<f32>,
    batch: &[&[Frame]],
    cfg: &TrainConfig,
    iteration: u64,
    ctx: &StepContext,
) -> Result<LossBreakdown> {
    let lr = cfg.lr_at(iteration);
    let mut mean = LossBreakdown::default();
    for (si, seq) in batch.iter().enumerate() {
        let (total, breakdown) = sequence_loss_and_update(model, adam, seq, cfg, iteration, si, lr, ctx)?;
        debug_assert!(total.is_finite());
        mean.accumulate(&breakdown);
    }
    let k = 1.0 / batch.len().max(1) as f64;
    mean.l_sp *= k;
    mean.l_iou *= k;
    mean.l_pn *= k;
    mean.l_po *= k;
    mean.total *= k;
    Ok(mean)
}

#[allow(clippy::too_many_arguments)]
fn sequence_loss_and_update(
    model: &mut Detector<f32>,
    adam: &mut Adam<f32>,
    seq: &[Frame],
    cfg: &TrainConfig,
    iteration: u64,
    si: usize,
    lr: f64,
    ctx: &StepContext,
) -> Result<(f64, LossBreakdown)> {
    let mut tape = Tape::<f32>::new();
    let bound = model.params().bind(&mut tape);
    let mut live = model.reset_state().attach(&mut tape);
    let mut buffer = HeadTemporalBuffer::new();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, iteration, si as u64, 0xd70f]));
    let grid = model.grid();
    let mut totals: Vec<Var> = Vec::with_capacity(seq.len());
    let mut sum = LossBreakdown::default();
    for (fi, frame) in seq.iter().enumerate() {
        let input = model.prepare_input(&frame.tensor)?;
        let (vars, next) = model.step(&mut tape, &bound, input, &live, true, &mut rng)?;
        live = next;
        let mut preds = CellPredictions::from_vars(&tape, &vars, grid)?;
        buffer.update(&mut preds)?;
        let sup = variant_assign(cfg.variant, &preds, &frame.known, Some(&frame.all), &cfg.screening)?;
        let terms = frame_loss(&mut tape, &vars, &preds, &sup)?;
        let b = terms.breakdown(&tape, &sup);
        if !b.is_finite() {
            return Err(non_finite(ctx, frame, iteration, si, fi, &b));
        }
        sum.accumulate(&b);
        totals.push(terms.total);
    }
    let mut loss = totals[0];
    for &t in &totals[1..] {
        loss = tape.add(loss, t)?;
    }
    let grads = tape.backward(loss)?;
    let mut g = bound.grads(&grads, model.params());
    if cfg.grad_clip > 0.0 {
        clip_global_norm(&mut g, cfg.grad_clip);
    }
    adam.step_with_lr(model.params_mut(), &g, lr)?;
    Ok((tape.scalar(loss) as f64, sum))
}

fn clip_global_norm(grads: &mut [Vec<f32>], max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = (max_norm / norm) as f32;
        for v in grads.iter_mut().flat_map(|g| g.iter_mut()) {
            *v *= k;
        }
    }
}

fn non_finite(ctx: &StepContext, frame: &Frame, iteration: u64, sequence: usize, fi: usize, b: &LossBreakdown) -> DeoeError {
    let mut detail = format!(
        "frame t={} l_pn={} l_po={} l_sp={} l_iou={}",
        frame.t, b.l_pn, b.l_po, b.l_sp, b.l_iou
    );
    if let Some(dir) = &ctx.dump_dir {
        let path = dir.join(format!("nonfinite_it{iteration}_seq{sequence}_frame{fi}.bin"));
        match write_dump(&frame.tensor, &path) {
            Ok(()) => detail.push_str(&format!("; frame dumped to {}", path.display())),
            Err(e) => detail.push_str(&format!("; dump failed: {e}")),
        }
    }
    DeoeError::NonFiniteLoss {
        iteration,
        sequence,
        frame: fi,
        detail,
    }
}

/// Hex SHA-256 of the serialized detector and training configuration.
pub fn config_hash(model: &DetectorConfig, train: &TrainConfig) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(model).expect("config serializes"));
    h.update(serde_json::to_vec(train).expect("config serializes"));
    hex::encode(h.finalize())
}

pub const META_ITERATION: &str = "iteration";
pub const META_CONFIG_HASH: &str = "config_hash";
pub const META_DETECTOR: &str = "detector";
pub const META_TRAIN: &str = "train";

pub fn make_checkpoint(model: &Detector<f32>, adam: &Adam<f32>, cfg: &TrainConfig, iteration: u64) -> Checkpoint<f32> {
    Checkpoint {
        meta: vec![
            (META_ITERATION.into(), iteration.to_string()),
            (META_CONFIG_HASH.into(), config_hash(model.config(), cfg)),
            (
                META_DETECTOR.into(),
                serde_json::to_string(model.config()).expect("config serializes"),
            ),
            (META_TRAIN.into(), serde_json::to_string(cfg).expect("config serializes")),
        ],
        params: model.params().clone(),
        adam: Some(adam.clone()),
    }
}

/// Detector stored in a checkpoint.
pub fn detector_from_checkpoint(ck: &Checkpoint<f32>) -> Result<Detector<f32>> {
    let text = ck
        .meta_value(META_DETECTOR)
        .ok_or_else(|| DeoeError::Invalid("checkpoint carries no detector configuration".into()))?;
    let cfg: DetectorConfig =
        serde_json::from_str(text).map_err(|e| DeoeError::Invalid(format!("checkpoint detector config: {e}")))?;
    Detector::from_params(cfg, &ck.params)
}

/// Training configuration stored in a checkpoint.
pub fn train_config_from_checkpoint(ck: &Checkpoint<f32>) -> Result<TrainConfig> {
    let text = ck
        .meta_value(META_TRAIN)
        .ok_or_else(|| DeoeError::Invalid("checkpoint carries no training configuration".into()))?;
    serde_json::from_str(text).map_err(|e| DeoeError::Invalid(format!("checkpoint training config: {e}")))
}

pub fn checkpoint_iteration(ck: &Checkpoint<f32>) -> Result<u64> {
    ck.meta_value(META_ITERATION)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| DeoeError::Invalid("checkpoint carries no iteration count".into()))
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Receives `loss.csv`, periodic `ckpt_<iteration>.bin` and `final.bin`.
    pub out_dir: Option<PathBuf>,
    /// Checkpoint period in iterations; 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub resume: Option<Checkpoint<f32>>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint<f32>,
    pub log: Vec<(u64, LossBreakdown)>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

/// Trains from scratch (or from `opts.resume`) up to `cfg.iterations`.
pub fn run_training(
    model_cfg: &DetectorConfig,
    cfg: &TrainConfig,
    dataset: &Dataset,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (mut model, mut adam, start) = match &opts.resume {
        Some(ck) => {
            let hash = ck.meta_value(META_CONFIG_HASH).unwrap_or_default();
            if hash != config_hash(model_cfg, cfg) {
                return invalid("checkpoint was produced by a different configuration");
            }
            let model = detector_from_checkpoint(ck)?;
            let adam = ck
                .adam
                .clone()
                .ok_or_else(|| DeoeError::Invalid("checkpoint has no optimizer state to resume".into()))?;
            (model, adam, checkpoint_iteration(ck)?)
        }
        None => {
            let model = Detector::<f32>::new(model_cfg.clone(), cfg.seed)?;
            let adam = Adam::new(model.params(), cfg.lr);
            (model, adam, 0)
        }
    };
    let mut csv = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let path = dir.join("loss.csv");
            let mut f = if start == 0 {
                fs::File::create(&path)
            } else {
                fs::OpenOptions::new().append(true).create(true).open(&path)
            }
            .map_err(io_err(&path))?;
            if start == 0 {
                writeln!(f, "{}", LossBreakdown::CSV_HEADER).map_err(io_err(&path))?;
            }
            Some((f, path))
        }
        None => None,
    };
    let ctx = StepContext {
        dump_dir: opts.out_dir.clone(),
    };
    let mut log = Vec::new();
    for it in start..cfg.iterations {
        let idx = batch_indices(dataset, cfg, it)?;
        let batch: Vec<&[Frame]> = idx
            .iter()
            .map(|&(r, s)| &dataset.recordings[r][s..s + cfg.sequence_length])
            .collect();
        let b = train_step(&mut model, &mut adam, &batch, cfg, it, &ctx)?;
        let step = it + 1;
        if let Some((f, path)) = csv.as_mut() {
            writeln!(f, "{}", b.csv_row(step)).map_err(io_err(path.as_path()))?;
        }
        log.push((step, b));
        if let Some(dir) = &opts.out_dir {
            if opts.checkpoint_every > 0 && step % opts.checkpoint_every == 0 && step < cfg.iterations {
                let path = dir.join(format!("ckpt_{step:06}.bin"));
                write_file(&path, &make_checkpoint(&model, &adam, cfg, step).to_bytes())?;
            }
        }
    }
    let checkpoint = make_checkpoint(&model, &adam, cfg, cfg.iterations.max(start));
    if let Some(dir) = &opts.out_dir {
        write_file(&dir.join("final.bin"), &checkpoint.to_bytes())?;
    }
    Ok(TrainOutcome { checkpoint, log })
}
