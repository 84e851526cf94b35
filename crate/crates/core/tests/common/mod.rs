#![allow(dead_code)]

use deoe_core::events::EventPoint;
use deoe_core::events::AnnotationRecord;
use deoe_core::evalkit::{ClassSplit, EvalConfig, FrameInstance};
use deoe_core::infer::{Detection, DetectionSet};
use deoe_core::heads::{HeadLayout, ObjectnessBranches};
use deoe_core::BBox;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Sorted random events on a `width x height` sensor with timestamps in `[t0, t1]`.
pub fn random_events<R: Rng>(rng: &mut R, width: u16, height: u16, n: usize, t0: u64, t1: u64) -> Vec<EventPoint> {
    let mut ts: Vec<u64> = (0..n).map(|_| rng.random_range(t0..=t1)).collect();
    ts.sort_unstable();
    ts.into_iter()
        .map(|t| EventPoint::new(t, rng.random_range(0..width), rng.random_range(0..height), rng.random_range(0..2)))
        .collect()
}

/// Time bin by scanning the bin boundaries `t_a + k * span / T` in exact
/// rational arithmetic; the window end falls into the last bin.
pub fn scan_bin(t: u64, t_a: u64, t_b: u64, t_bins: usize) -> usize {
    let (num, span) = ((t - t_a) as u128 * t_bins as u128, (t_b - t_a) as u128);
    (0..t_bins)
        .find(|&k| num < (k as u128 + 1) * span)
        .unwrap_or(t_bins - 1)
}

/// Per-event accumulation into a `(2T, H, W)` histogram.
pub fn accumulate_oracle(events: &[EventPoint], t_a: u64, t_b: u64, t_bins: usize, h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0f32; 2 * t_bins * h * w];
    for e in events {
        let c = e.p as usize * t_bins + scan_bin(e.t, t_a, t_b, t_bins);
        out[(c * h + e.y as usize) * w + e.x as usize] += 1.0;
    }
    out
}

/// Intersection over union by explicit corner arithmetic.
pub fn iou_oracle(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x_min + a.w).min(b.x_min + b.w) - a.x_min.max(b.x_min);
    let iy = (a.y_min + a.h).min(b.y_min + b.h) - a.y_min.max(b.y_min);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    inter / (a.w * a.h + b.w * b.h - inter)
}

pub fn random_box<R: Rng>(rng: &mut R, extent: f64) -> BBox {
    let w = rng.random_range(2.0..extent / 3.0);
    let h = rng.random_range(2.0..extent / 3.0);
    BBox::new(rng.random_range(0.0..extent - w), rng.random_range(0.0..extent - h), w, h)
}

/// Greedy one-to-one matching written as a plain loop over a full IoU table:
/// number of GT matched by `dets` taken in order.
fn matched_count(dets: &[BBox], gts: &[BBox], thr: f64) -> (usize, Vec<bool>) {
    let table: Vec<Vec<f64>> = dets.iter().map(|d| gts.iter().map(|g| iou_oracle(d, g)).collect()).collect();
    let mut taken = vec![false; gts.len()];
    let mut det_hit = vec![false; dets.len()];
    for (d, row) in table.iter().enumerate() {
        let mut pick = None;
        let mut best = -1.0;
        for (g, &v) in row.iter().enumerate() {
            if !taken[g] && v >= thr && v > best {
                best = v;
                pick = Some(g);
            }
        }
        if let Some(g) = pick {
            taken[g] = true;
            det_hit[d] = true;
        }
    }
    (taken.iter().filter(|&&t| t).count(), det_hit)
}

/// Single-pass evaluator: AR (x100) per budget for the unknown split (when
/// `unknown` is set) or over all classes.
pub fn brute_force_ar(frames: &[FrameInstance], known: &[u32], unknown: bool, budgets: &[usize]) -> Vec<Option<f64>> {
    let thresholds: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let mut hits = vec![0usize; budgets.len()];
    let mut total = 0usize;
    for f in frames {
        let (dets, gts): (Vec<BBox>, Vec<BBox>) = if unknown {
            let known_gt: Vec<BBox> = f.gts.iter().filter(|g| known.contains(&g.1)).map(|g| g.0).collect();
            let (_, on_known) = matched_count(&f.dets, &known_gt, 0.5);
            let dets = f.dets.iter().zip(on_known).filter(|(_, k)| !k).map(|(d, _)| *d).collect();
            (dets, f.gts.iter().filter(|g| !known.contains(&g.1)).map(|g| g.0).collect())
        } else {
            (f.dets.clone(), f.gts.iter().map(|g| g.0).collect())
        };
        total += gts.len();
        for (bi, &k) in budgets.iter().enumerate() {
            let top = &dets[..k.min(dets.len())];
            for &t in &thresholds {
                hits[bi] += matched_count(top, &gts, t).0;
            }
        }
    }
    hits.iter()
        .map(|&h| (total > 0).then(|| 100.0 * h as f64 / (total * thresholds.len()) as f64))
        .collect()
}

pub const DISENTANGLED_SINGLE: HeadLayout = HeadLayout {
    objectness: ObjectnessBranches::Disentangled,
    dual_regressor: false,
};

/// A random `frames`-frame evaluation instance on a 64x64 sensor with classes
/// 0 (known) and 1, 2 (unknown). Detections are perturbed copies of GT mixed
/// with clutter, sorted by score.
pub fn random_run<R: Rng>(rng: &mut R, frames: usize) -> (Vec<DetectionSet>, Vec<AnnotationRecord>) {
    let mut sets = Vec::new();
    let mut ann = Vec::new();
    for f in 0..frames {
        let t = 10_000 * (f as u64 + 1);
        let mut dets = Vec::new();
        for _ in 0..rng.random_range(1..6) {
            let b = random_box(rng, 64.0);
            let class_id = rng.random_range(0..3);
            ann.push(AnnotationRecord {
                t,
                x_min: b.x_min,
                y_min: b.y_min,
                w: b.w,
                h: b.h,
                class_id,
                annotated: class_id == 0,
            });
            for _ in 0..rng.random_range(0..3) {
                let j = |rng: &mut R, v: f64| v + rng.random_range(-0.2..0.2) * b.w.min(b.h);
                let bbox = BBox::new(j(rng, b.x_min), j(rng, b.y_min), b.w, b.h);
                dets.push(Detection { obj: rng.random_range(0.0..1.0), bbox });
            }
        }
        for _ in 0..rng.random_range(0..40) {
            dets.push(Detection {
                obj: rng.random_range(0.0..1.0),
                bbox: random_box(rng, 64.0),
            });
        }
        dets.sort_by(|a, b| b.obj.total_cmp(&a.obj));
        if !dets.is_empty() || rng.random_bool(0.5) {
            sets.push(DetectionSet { t, detections: dets });
        }
    }
    (sets, ann)
}

/// Frames of a run as the brute-force evaluator sees them.
pub fn oracle_frames(sets: &[DetectionSet], ann: &[AnnotationRecord]) -> Vec<FrameInstance> {
    let mut times: Vec<u64> = ann.iter().map(|a| a.t).collect();
    times.sort_unstable();
    times.dedup();
    times
        .into_iter()
        .map(|t| FrameInstance {
            dets: sets
                .iter()
                .filter(|s| s.t == t)
                .flat_map(|s| s.detections.iter().map(|d| d.bbox))
                .collect(),
            gts: ann.iter().filter(|a| a.t == t).map(|a| (a.bbox(), a.class_id)).collect(),
        })
        .collect()
}

/// Whether `evaluate_run` agrees exactly with the brute-force evaluator on
/// one random instance.
pub fn evaluator_matches_oracle(seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (sets, ann) = random_run(&mut rng, 20);
    let split = ClassSplit::new([0], [1, 2]).unwrap();
    let cfg = EvalConfig::default();
    let report = deoe_core::evalkit::evaluate_run("r", &sets, &ann, &split, &cfg).unwrap();
    let frames = oracle_frames(&sets, &ann);
    let unknown = brute_force_ar(&frames, &[0], true, &cfg.budgets);
    let all = brute_force_ar(&frames, &[0], false, &cfg.budgets);
    let got = |k: deoe_core::evalkit::SplitKind| -> Vec<Option<f64>> {
        report.split(k).unwrap().ar.iter().map(|a| a.1).collect()
    };
    got(deoe_core::evalkit::SplitKind::Unknown) == unknown && got(deoe_core::evalkit::SplitKind::All) == all
}
