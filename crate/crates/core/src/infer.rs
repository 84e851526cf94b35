//! Stateful stream inference with class-agnostic NMS.

use std::fs;
use std::path::Path;
use std::time::Instant;

use deoe_nncore::{Real, Tape};
use image::{Rgb, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{detach_state, RecurrentState};
use crate::dataset::encode_frame_at;
use crate::encode::EventTensor;
use crate::error::{invalid, io_err, DeoeError, Result};
use crate::events::EventStream;
use crate::geometry::{iou, BBox};
use crate::heads::{CellPredictions, HeadTemporalBuffer};
use crate::model::Detector;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub obj: f64,
    pub bbox: BBox,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DetectionSet {
    pub t: u64,
    /// Sorted by `obj`, highest first.
    pub detections: Vec<Detection>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            nms_iou: 0.65,
            max_detections: 300,
        }
    }
}

/// Recurrent state plus temporal buffer of one stream.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamState<F> {
    pub recurrent: RecurrentState<F>,
    pub buffer: HeadTemporalBuffer,
}

impl<F: Real> StreamState<F> {
    pub fn new(model: &Detector<F>) -> Self {
        Self {
            recurrent: model.reset_state(),
            buffer: HeadTemporalBuffer::new(),
        }
    }
}

fn rank_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.obj
        .total_cmp(&a.obj)
        .then(a.bbox.x_min.total_cmp(&b.bbox.x_min))
        .then(a.bbox.y_min.total_cmp(&b.bbox.y_min))
        .then(a.bbox.w.total_cmp(&b.bbox.w))
        .then(a.bbox.h.total_cmp(&b.bbox.h))
}

/// Greedy suppression: walk detections by descending score (ties broken by
/// coordinates) and drop any box overlapping an already kept one at IoU >=
/// `iou_threshold`.
pub fn nms(mut dets: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    dets.sort_by(rank_order);
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) < iou_threshold) {
            kept.push(d);
        }
    }
    kept
}

/// Fused detections of one eval-mode prediction.
pub fn detections_from_cells(preds: &CellPredictions, width: f64, height: f64, cfg: &InferConfig) -> Vec<Detection> {
    let candidates = preds
        .obj_fused
        .iter()
        .zip(&preds.box_fused)
        .filter(|(&obj, _)| obj >= cfg.score_threshold)
        .filter_map(|(&obj, b)| b.clip(width, height).map(|bbox| Detection { obj, bbox }))
        .collect();
    let mut kept = nms(candidates, cfg.nms_iou);
    kept.truncate(cfg.max_detections);
    kept
}

/// Eval-mode forward of one frame; advances `state`.
pub fn predict_frame<F: Real>(
    model: &Detector<F>,
    tensor: &EventTensor,
    state: &mut StreamState<F>,
    cfg: &InferConfig,
) -> Result<(DetectionSet, CellPredictions)> {
    let mut tape = Tape::<F>::new();
    let bound = model.params().bind_frozen(&mut tape);
    let live = state.recurrent.attach(&mut tape);
    let input = model.prepare_input(tensor)?;
    // Dropout is inactive in eval mode; the generator is never drawn from.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (vars, next) = model.step(&mut tape, &bound, input, &live, false, &mut rng)?;
    let mut preds = CellPredictions::from_vars(&tape, &vars, model.grid())?;
    state.buffer.update(&mut preds)?;
    state.recurrent = detach_state(&tape, &next);
    let c = model.config();
    let detections = detections_from_cells(&preds, c.sensor_width as f64, c.sensor_height as f64, cfg);
    Ok((DetectionSet { t: tensor.t_b, detections }, preds))
}

/// Frame end times `k * window_us` for `k >= 1`, up to and including the
/// first tick at or after `end_us`.
pub fn frame_ticks(end_us: u64, window_us: u64) -> Vec<u64> {
    if window_us == 0 {
        return Vec::new();
    }
    (1..=end_us.div_ceil(window_us)).map(|k| k * window_us).collect()
}

/// Runs the detector over `stream` in consecutive windows from a reset
/// state. `end_us` defaults to just past the last event.
pub fn run_stream<F: Real>(
    model: &Detector<F>,
    stream: &EventStream,
    window_us: u64,
    end_us: Option<u64>,
    cfg: &InferConfig,
) -> Result<Vec<DetectionSet>> {
    if window_us == 0 {
        return invalid("frame window must be positive");
    }
    let end = end_us.unwrap_or_else(|| stream.events().last().map_or(0, |e| e.t + 1));
    let mut state = StreamState::new(model);
    frame_ticks(end, window_us)
        .into_iter()
        .map(|t| {
            let tensor = encode_frame_at(stream, t, window_us, model.config().t_bins)?;
            let (mut set, _) = predict_frame(model, &tensor, &mut state, cfg)?;
            set.t = t;
            Ok(set)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

impl LatencyStats {
    pub fn from_samples(samples_ms: &[f64], height: usize, width: usize) -> Result<Self> {
        if samples_ms.is_empty() {
            return invalid("no latency samples");
        }
        let mut s = samples_ms.to_vec();
        s.sort_by(f64::total_cmp);
        let pct = |q: f64| s[((q * (s.len() - 1) as f64).round() as usize).min(s.len() - 1)];
        Ok(Self {
            frames: s.len(),
            height,
            width,
            mean_ms: s.iter().sum::<f64>() / s.len() as f64,
            p50_ms: pct(0.5),
            p99_ms: pct(0.99),
            min_ms: s[0],
            max_ms: s[s.len() - 1],
        })
    }
}

/// Wall-clock time per frame, tensor in to detections out, batch 1. The first
/// `warmup` frames run but are not measured.
pub fn bench_inference<F: Real>(
    model: &Detector<F>,
    frames: &[EventTensor],
    warmup: usize,
    cfg: &InferConfig,
) -> Result<LatencyStats> {
    let mut state = StreamState::new(model);
    let mut samples = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        let start = Instant::now();
        let out = predict_frame(model, f, &mut state, cfg)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        std::hint::black_box(out);
        if i >= warmup {
            samples.push(ms);
        }
    }
    let c = model.config();
    LatencyStats::from_samples(&samples, c.sensor_height, c.sensor_width)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub t: u64,
    pub obj: f64,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

pub fn prediction_records(sets: &[DetectionSet]) -> Vec<PredictionRecord> {
    sets.iter()
        .flat_map(|s| {
            s.detections.iter().map(move |d| PredictionRecord {
                t: s.t,
                obj: d.obj,
                x: d.bbox.x_min,
                y: d.bbox.y_min,
                w: d.bbox.w,
                h: d.bbox.h,
            })
        })
        .collect()
}

pub fn write_predictions(sets: &[DetectionSet]) -> String {
    let mut out = String::new();
    for r in prediction_records(sets) {
        out.push_str(&serde_json::to_string(&r).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn save_predictions(sets: &[DetectionSet], path: &Path) -> Result<()> {
    fs::write(path, write_predictions(sets)).map_err(io_err(path))
}

pub fn read_predictions(text: &str, origin: &Path) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: PredictionRecord = serde_json::from_str(line).map_err(|e| DeoeError::Parse {
            path: origin.to_path_buf(),
            location: format!("line {}", i + 1),
            msg: e.to_string(),
        })?;
        out.push(r);
    }
    Ok(out)
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    read_predictions(&text, path)
}

/// Groups records into per-frame sets, each sorted by score.
pub fn group_predictions(records: &[PredictionRecord]) -> Vec<DetectionSet> {
    let mut map = std::collections::BTreeMap::<u64, Vec<Detection>>::new();
    for r in records {
        map.entry(r.t).or_default().push(Detection {
            obj: r.obj,
            bbox: BBox::new(r.x, r.y, r.w, r.h),
        });
    }
    map.into_iter()
        .map(|(t, mut detections)| {
            detections.sort_by(rank_order);
            DetectionSet { t, detections }
        })
        .collect()
}

const DET_COLOR: Rgb<u8> = Rgb([255, 64, 64]);
const GT_COLOR: Rgb<u8> = Rgb([64, 255, 64]);

fn draw_box(img: &mut RgbImage, b: &BBox, color: Rgb<u8>) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let x0 = (b.x_min.floor() as i64).clamp(0, w - 1);
    let y0 = (b.y_min.floor() as i64).clamp(0, h - 1);
    let x1 = ((b.x_max().ceil() as i64) - 1).clamp(0, w - 1);
    let y1 = ((b.y_max().ceil() as i64) - 1).clamp(0, h - 1);
    for x in x0..=x1 {
        img.put_pixel(x as u32, y0 as u32, color);
        img.put_pixel(x as u32, y1 as u32, color);
    }
    for y in y0..=y1 {
        img.put_pixel(x0 as u32, y as u32, color);
        img.put_pixel(x1 as u32, y as u32, color);
    }
}

/// Event-count image (brighter = more events) with detections in red and
/// optional ground truth in green.
pub fn render_overlay(tensor: &EventTensor, dets: &[Detection], gts: &[BBox]) -> RgbImage {
    let counts = tensor.count_image();
    let peak = counts.iter().copied().fold(0f32, f32::max).max(1.0);
    let mut img = RgbImage::from_fn(tensor.width as u32, tensor.height as u32, |x, y| {
        let c = counts[y as usize * tensor.width + x as usize];
        let v = (255.0 * (c / peak).sqrt()) as u8;
        Rgb([v, v, v])
    });
    for g in gts {
        draw_box(&mut img, g, GT_COLOR);
    }
    for d in dets {
        draw_box(&mut img, &d.bbox, DET_COLOR);
    }
    img
}

pub fn save_overlay(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| DeoeError::Invalid(format!("{}: {e}", path.display())))
}
