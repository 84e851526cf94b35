//! Open-world recall evaluation: AR at detection budgets on the unknown and
//! all-class splits, and the log-budget AUC.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, DeoeError, Result};
use crate::events::AnnotationRecord;
use crate::geometry::{iou, BBox};
use crate::infer::DetectionSet;

pub const BUDGETS: [usize; 5] = [10, 30, 50, 100, 300];

/// 0.50, 0.55, ..., 0.95.
pub fn iou_ladder() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub known: BTreeSet<u32>,
    pub unknown: BTreeSet<u32>,
}

impl ClassSplit {
    pub fn new(known: impl IntoIterator<Item = u32>, unknown: impl IntoIterator<Item = u32>) -> Result<Self> {
        let split = Self {
            known: known.into_iter().collect(),
            unknown: unknown.into_iter().collect(),
        };
        if let Some(c) = split.known.intersection(&split.unknown).next() {
            return invalid(format!("class {c} is both known and unknown"));
        }
        Ok(split)
    }

    /// Known = the given ids; unknown = every other class in `annotations`.
    pub fn with_known(known: &[u32], annotations: &[AnnotationRecord]) -> Result<Self> {
        let unknown: BTreeSet<u32> = annotations
            .iter()
            .map(|a| a.class_id)
            .filter(|c| !known.contains(c))
            .collect();
        Self::new(known.iter().copied(), unknown)
    }

    /// Known = classes that carry the annotated flag anywhere.
    pub fn from_annotations(annotations: &[AnnotationRecord]) -> Result<Self> {
        let known: Vec<u32> = annotations
            .iter()
            .filter(|a| a.annotated)
            .map(|a| a.class_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        Self::with_known(&known, annotations)
    }

    pub fn is_known(&self, class_id: u32) -> bool {
        self.known.contains(&class_id)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchResult {
    pub gt_matched: Vec<bool>,
    /// Matched GT per detection.
    pub det_match: Vec<Option<usize>>,
}

/// Greedy one-to-one matching: in the given order, each detection takes the
/// unmatched GT of highest IoU (lowest index on ties) if that IoU reaches
/// `threshold`.
pub fn greedy_match(dets: &[BBox], gts: &[BBox], threshold: f64) -> MatchResult {
    let mut gt_matched = vec![false; gts.len()];
    let mut det_match = vec![None; dets.len()];
    for (d, det) in dets.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt_matched[g] {
                continue;
            }
            let v = iou(det, gt);
            if v >= threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            gt_matched[g] = true;
            det_match[d] = Some(g);
        }
    }
    MatchResult { gt_matched, det_match }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Unknown,
    All,
}

impl SplitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitKind::Unknown => "unknown",
            SplitKind::All => "all",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub budgets: Vec<usize>,
    pub iou_thresholds: Vec<f64>,
    /// Detections matched to known GT at this IoU do not count against the
    /// unknown-split budget.
    pub known_exclusion_iou: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            budgets: BUDGETS.to_vec(),
            iou_thresholds: iou_ladder(),
            known_exclusion_iou: 0.5,
        }
    }
}

/// One frame's ground truth and score-sorted detections.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameInstance {
    pub dets: Vec<BBox>,
    pub gts: Vec<(BBox, u32)>,
}

/// The detections and ground truth a split scores against, before budgeting.
fn split_view(frame: &FrameInstance, split: &ClassSplit, kind: SplitKind, cfg: &EvalConfig) -> (Vec<BBox>, Vec<BBox>) {
    match kind {
        SplitKind::All => (frame.dets.clone(), frame.gts.iter().map(|g| g.0).collect()),
        SplitKind::Unknown => {
            let known: Vec<BBox> = frame.gts.iter().filter(|g| split.is_known(g.1)).map(|g| g.0).collect();
            let unknown: Vec<BBox> = frame.gts.iter().filter(|g| !split.is_known(g.1)).map(|g| g.0).collect();
            let m = greedy_match(&frame.dets, &known, cfg.known_exclusion_iou);
            let dets = frame
                .dets
                .iter()
                .zip(&m.det_match)
                .filter(|(_, k)| k.is_none())
                .map(|(d, _)| *d)
                .collect();
            (dets, unknown)
        }
    }
}

/// Matched-GT counts per `(budget, threshold)` and the GT total of one frame.
fn frame_counts(frame: &FrameInstance, split: &ClassSplit, kind: SplitKind, cfg: &EvalConfig) -> (Vec<Vec<usize>>, usize) {
    let (dets, gts) = split_view(frame, split, kind, cfg);
    let counts = cfg
        .budgets
        .iter()
        .map(|&k| {
            let top = &dets[..k.min(dets.len())];
            cfg.iou_thresholds
                .iter()
                .map(|&t| greedy_match(top, &gts, t).gt_matched.iter().filter(|&&m| m).count())
                .collect()
        })
        .collect();
    (counts, gts.len())
}

/// AR per budget (x100) pooled over `frames`; `None` when the split has no GT.
pub fn average_recall(frames: &[FrameInstance], split: &ClassSplit, kind: SplitKind, cfg: &EvalConfig) -> Vec<Option<f64>> {
    let per_frame: Vec<(Vec<Vec<usize>>, usize)> =
        frames.par_iter().map(|f| frame_counts(f, split, kind, cfg)).collect();
    let total_gt: usize = per_frame.iter().map(|p| p.1).sum();
    (0..cfg.budgets.len())
        .map(|b| {
            if total_gt == 0 {
                return None;
            }
            // Integer hit totals keep the result independent of summation order.
            let hits: usize = per_frame.iter().map(|p| p.0[b].iter().sum::<usize>()).sum();
            Some(100.0 * hits as f64 / (total_gt * cfg.iou_thresholds.len()) as f64)
        })
        .collect()
}

/// Trapezoidal area under AR over `log10(k)`, divided by the log-budget span.
pub fn auc(budgets: &[usize], ar: &[f64]) -> Result<f64> {
    if budgets.len() != ar.len() {
        return invalid(format!("{} budgets but {} AR values", budgets.len(), ar.len()));
    }
    if budgets.len() < 2 {
        return invalid("AUC needs at least two budgets");
    }
    if budgets.windows(2).any(|w| w[0] >= w[1]) || budgets[0] == 0 {
        return invalid("budgets must be positive and strictly increasing");
    }
    let x: Vec<f64> = budgets.iter().map(|&k| (k as f64).log10()).collect();
    let area: f64 = (1..x.len()).map(|i| 0.5 * (ar[i] + ar[i - 1]) * (x[i] - x[i - 1])).sum();
    Ok(area / (x[x.len() - 1] - x[0]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub split: SplitKind,
    pub num_gt: usize,
    /// `(budget, AR)`; AR absent when the split has no ground truth.
    pub ar: Vec<(usize, Option<f64>)>,
    pub auc: Option<f64>,
}

impl SplitReport {
    pub fn ar_at(&self, k: usize) -> Option<f64> {
        self.ar.iter().find(|(b, _)| *b == k).and_then(|(_, v)| *v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub frames: usize,
    pub splits: Vec<SplitReport>,
}

impl EvalReport {
    pub fn split(&self, kind: SplitKind) -> Option<&SplitReport> {
        self.splits.iter().find(|s| s.split == kind)
    }
}

/// Evaluates already grouped frames.
pub fn evaluate_frames(label: &str, frames: &[FrameInstance], split: &ClassSplit, cfg: &EvalConfig) -> Result<EvalReport> {
    let mut splits = Vec::new();
    for kind in [SplitKind::Unknown, SplitKind::All] {
        let ar = average_recall(frames, split, kind, cfg);
        let num_gt = frames
            .iter()
            .flat_map(|f| &f.gts)
            .filter(|g| kind == SplitKind::All || !split.is_known(g.1))
            .count();
        let auc = match ar.iter().copied().collect::<Option<Vec<f64>>>() {
            Some(values) => Some(auc(&cfg.budgets, &values)?),
            None => None,
        };
        splits.push(SplitReport {
            split: kind,
            num_gt,
            ar: cfg.budgets.iter().copied().zip(ar).collect(),
            auc,
        });
    }
    Ok(EvalReport {
        label: label.to_string(),
        frames: frames.len(),
        splits,
    })
}

/// Pairs per-frame predictions with annotations by timestamp. Every
/// annotated timestamp is a frame (missing predictions mean no detections);
/// predictions at a timestamp without annotations are an error.
pub fn align_frames(preds: &[DetectionSet], annotations: &[AnnotationRecord]) -> Result<Vec<FrameInstance>> {
    let mut gts = BTreeMap::<u64, Vec<(BBox, u32)>>::new();
    for a in annotations {
        a.validate()?;
        gts.entry(a.t).or_default().push((a.bbox(), a.class_id));
    }
    let mut dets = BTreeMap::<u64, Vec<BBox>>::new();
    for s in preds {
        if s.detections.windows(2).any(|w| w[0].obj < w[1].obj) {
            return invalid(format!("detections at t={} are not sorted by score", s.t));
        }
        dets.entry(s.t).or_default().extend(s.detections.iter().map(|d| d.bbox));
    }
    let orphaned: Vec<u64> = dets.keys().filter(|t| !gts.contains_key(t)).copied().collect();
    if !orphaned.is_empty() {
        return Err(DeoeError::TimestampMismatch { orphaned });
    }
    Ok(gts
        .into_iter()
        .map(|(t, gts)| FrameInstance {
            dets: dets.remove(&t).unwrap_or_default(),
            gts,
        })
        .collect())
}

pub fn evaluate_run(
    label: &str,
    preds: &[DetectionSet],
    annotations: &[AnnotationRecord],
    split: &ClassSplit,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let frames = align_frames(preds, annotations)?;
    evaluate_frames(label, &frames, split, cfg)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"))
}

/// Aligned plain-text table, one row per report and split.
pub fn format_table(reports: &[EvalReport]) -> String {
    let budgets: Vec<usize> = reports
        .first()
        .and_then(|r| r.splits.first())
        .map(|s| s.ar.iter().map(|a| a.0).collect())
        .unwrap_or_default();
    let mut header = vec!["run".to_string(), "split".to_string(), "AUC".to_string()];
    header.extend(budgets.iter().map(|k| format!("AR_{k}")));
    let mut rows = vec![header];
    for r in reports {
        for s in &r.splits {
            let mut row = vec![r.label.clone(), s.split.as_str().to_string(), cell(s.auc)];
            row.extend(s.ar.iter().map(|a| cell(a.1)));
            rows.push(row);
        }
    }
    let ncol = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..ncol)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(String::len).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &rows {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, v)| if c < 2 { format!("{v:<w$}", w = widths[c]) } else { format!("{v:>w$}", w = widths[c]) })
            .collect();
        writeln!(out, "{}", line.join("  ").trim_end()).expect("write to String");
    }
    out
}

/// One JSON record per report and split.
pub fn format_jsonl(reports: &[EvalReport]) -> String {
    #[derive(Serialize)]
    struct Row<'a> {
        run: &'a str,
        split: SplitKind,
        frames: usize,
        num_gt: usize,
        auc: Option<f64>,
        ar: BTreeMap<String, Option<f64>>,
    }
    let mut out = String::new();
    for r in reports {
        for s in &r.splits {
            let row = Row {
                run: &r.label,
                split: s.split,
                frames: r.frames,
                num_gt: s.num_gt,
                auc: s.auc,
                ar: s.ar.iter().map(|(k, v)| (format!("ar_{k}"), *v)).collect(),
            };
            out.push_str(&serde_json::to_string(&row).expect("report rows serialize"));
            out.push('\n');
        }
    }
    out
}
