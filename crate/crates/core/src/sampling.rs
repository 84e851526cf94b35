//! Training supervision: prior-box assignment, potential-sample screening and
//! the baseline variants.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, DeoeError, Result};
use crate::geometry::{iou, BBox};
use crate::heads::{CellPredictions, PriorGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellStatus {
    Positive,
    Negative,
    Ignore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub status: Vec<CellStatus>,
    /// Index of the matched GT box, positives only.
    pub matched: Vec<Option<usize>>,
    /// IoU of the prior box with its matched GT; 0 for non-positives.
    pub iou_g: Vec<f64>,
}

impl Assignment {
    pub fn len(&self) -> usize {
        self.status.len()
    }

    pub fn is_empty(&self) -> bool {
        self.status.is_empty()
    }

    fn cells_with(&self, s: CellStatus) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.status[i] == s).collect()
    }

    pub fn positives(&self) -> Vec<usize> {
        self.cells_with(CellStatus::Positive)
    }

    pub fn negatives(&self) -> Vec<usize> {
        self.cells_with(CellStatus::Negative)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScreeningConfig {
    pub potential_count: usize,
    pub pos_iou: f64,
    pub neg_iou: f64,
}

impl Default for ScreeningConfig {
    fn default() -> Self {
        Self {
            potential_count: 35,
            pos_iou: 0.5,
            neg_iou: 0.4,
        }
    }
}

impl ScreeningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.pos_iou > self.neg_iou) || !(0.0..=1.0).contains(&self.pos_iou) || self.neg_iou < 0.0 {
            return invalid(format!(
                "assignment thresholds need 0 <= neg ({}) < pos ({}) <= 1",
                self.neg_iou, self.pos_iou
            ));
        }
        Ok(())
    }
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(values: impl Iterator<Item = f64>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best
}

/// Labels every prior square against `gts`: positive at IoU >= `pos_iou`
/// (matched to the best GT, lowest index on ties), negative below `neg_iou`,
/// ignored in between. A GT left without a positive claims its best cell
/// that no other GT has claimed this way.
pub fn assign(grid: &PriorGrid, gts: &[BBox], cfg: &ScreeningConfig) -> Assignment {
    let n = grid.len();
    let mut status = vec![CellStatus::Negative; n];
    let mut matched = vec![None; n];
    let mut iou_g = vec![0.0; n];
    if gts.is_empty() {
        return Assignment { status, matched, iou_g };
    }
    let table: Vec<Vec<f64>> = (0..n)
        .map(|c| {
            let prior = grid.prior_box(c);
            gts.iter().map(|g| iou(&prior, g)).collect()
        })
        .collect();
    for c in 0..n {
        let (g, best) = argmax(table[c].iter().copied()).expect("gts is non-empty");
        if best >= cfg.pos_iou {
            status[c] = CellStatus::Positive;
            matched[c] = Some(g);
            iou_g[c] = best;
        } else if best >= cfg.neg_iou {
            status[c] = CellStatus::Ignore;
        }
    }
    let mut forced = vec![false; n];
    for g in 0..gts.len() {
        if matched.contains(&Some(g)) {
            continue;
        }
        let best = argmax((0..n).map(|c| if forced[c] { f64::NEG_INFINITY } else { table[c][g] }));
        if let Some((c, v)) = best {
            if v > 0.0 {
                forced[c] = true;
                status[c] = CellStatus::Positive;
                matched[c] = Some(g);
                iou_g[c] = v;
            }
        }
    }
    Assignment { status, matched, iou_g }
}

/// `obj * sqrt(iou_s * iou_t)`.
pub fn score_potential(obj: f64, iou_s: f64, iou_t: f64) -> f64 {
    obj * (iou_s * iou_t).sqrt()
}

/// `sqrt(obj * iou_s)`.
pub fn potential_weight(obj: f64, iou_s: f64) -> f64 {
    (obj * iou_s).sqrt()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PotentialSet {
    /// Selected negative cells, best first.
    pub cells: Vec<usize>,
    pub scores: Vec<f64>,
    pub weights: Vec<f64>,
    pub iou_s: Vec<f64>,
}

impl PotentialSet {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

/// The `n` best negatives by `score`, ties to the lower cell index.
fn top_negatives(asg: &Assignment, n: usize, score: impl Fn(usize) -> f64) -> Vec<(usize, f64)> {
    let mut ranked: Vec<(usize, f64)> = asg.negatives().into_iter().map(|c| (c, score(c))).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(n);
    ranked
}

/// Ranks negatives by the spatio-temporal score and keeps the top `n`, each
/// with its soft weight.
pub fn screen_potentials(preds: &CellPredictions, asg: &Assignment, n: usize) -> Result<PotentialSet> {
    check_shapes(preds, asg)?;
    let top = top_negatives(asg, n, |c| score_potential(preds.obj_fused[c], preds.iou_s[c], preds.iou_t[c]));
    Ok(PotentialSet {
        weights: top
            .iter()
            .map(|&(c, _)| potential_weight(preds.obj_fused[c], preds.iou_s[c]))
            .collect(),
        iou_s: top.iter().map(|&(c, _)| preds.iou_s[c]).collect(),
        scores: top.iter().map(|&(_, s)| s).collect(),
        cells: top.into_iter().map(|(c, _)| c).collect(),
    })
}

fn check_shapes(preds: &CellPredictions, asg: &Assignment) -> Result<()> {
    if preds.len() != asg.len() {
        return invalid(format!("{} predictions for {} assigned cells", preds.len(), asg.len()));
    }
    Ok(())
}

/// Rescales `weights` so the weighted loss sum equals the unweighted one:
/// `w~_i = w_i * sum(l) / sum(w l)`. Returned unchanged when `sum(w l)` is 0.
pub fn renormalize_weights(losses: &[f64], weights: &[f64]) -> Vec<f64> {
    let weighted: f64 = losses.iter().zip(weights).map(|(l, w)| l * w).sum();
    if weighted == 0.0 || !weighted.is_finite() {
        return weights.to_vec();
    }
    let total: f64 = losses.iter().sum();
    let k = total / weighted;
    weights.iter().map(|w| w * k).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantMode {
    Deoe,
    Ca,
    CaO,
    CaP,
    Oracle,
}

impl VariantMode {
    pub const ALL: [VariantMode; 5] = [
        VariantMode::Deoe,
        VariantMode::Ca,
        VariantMode::CaO,
        VariantMode::CaP,
        VariantMode::Oracle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VariantMode::Deoe => "deoe",
            VariantMode::Ca => "ca",
            VariantMode::CaO => "ca_o",
            VariantMode::CaP => "ca_p",
            VariantMode::Oracle => "oracle",
        }
    }
}

impl fmt::Display for VariantMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VariantMode {
    type Err = DeoeError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| DeoeError::Invalid(format!("unknown variant `{s}` (expected deoe|ca|ca_o|ca_p|oracle)")))
    }
}

/// How potential samples enter the positive-negative objectness loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PotentialWeighting {
    /// Soft weights, renormalized against the per-sample losses.
    Renormalized,
    /// Plain positives with weight 1.
    Unit,
}

/// Everything the losses need for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Supervision {
    pub assignment: Assignment,
    pub potentials: PotentialSet,
    /// Matched GT box per cell, positives only.
    pub targets: Vec<Option<BBox>>,
    /// Positive-negative target for positives is `iou_g` instead of 1.
    pub soft_positive_target: bool,
    pub weighting: PotentialWeighting,
}

/// Builds the supervision of `mode` for one frame. `known` are the annotated
/// boxes; `all` must carry every box (annotated or not) for the oracle.
pub fn variant_assign(
    mode: VariantMode,
    preds: &CellPredictions,
    known: &[BBox],
    all: Option<&[BBox]>,
    cfg: &ScreeningConfig,
) -> Result<Supervision> {
    let grid = preds.grid;
    let gts = match mode {
        VariantMode::Oracle => all.ok_or_else(|| {
            DeoeError::Invalid("oracle supervision needs the full annotation set".to_string())
        })?,
        _ => known,
    };
    let assignment = assign(&grid, gts, cfg);
    check_shapes(preds, &assignment)?;
    let potentials = match mode {
        VariantMode::Deoe => screen_potentials(preds, &assignment, cfg.potential_count)?,
        VariantMode::CaP => {
            let top = top_negatives(&assignment, cfg.potential_count, |c| preds.obj_fused[c]);
            PotentialSet {
                weights: vec![1.0; top.len()],
                iou_s: top.iter().map(|&(c, _)| preds.iou_s[c]).collect(),
                scores: top.iter().map(|&(_, s)| s).collect(),
                cells: top.into_iter().map(|(c, _)| c).collect(),
            }
        }
        VariantMode::Ca | VariantMode::CaO | VariantMode::Oracle => PotentialSet::default(),
    };
    let targets = assignment.matched.iter().map(|m| m.map(|g| gts[g])).collect();
    Ok(Supervision {
        assignment,
        potentials,
        targets,
        soft_positive_target: mode == VariantMode::CaO,
        weighting: if mode == VariantMode::CaP {
            PotentialWeighting::Unit
        } else {
            PotentialWeighting::Renormalized
        },
    })
}
