//! Per-frame training losses.
//!
//! Every term averages over its own sample subset; empty subsets contribute 0.

use deoe_nncore::{bce_value, Real, Tape, Tensor, Var};
use serde::Serialize;

use crate::error::{invalid, Result};
use crate::geometry::BBox;
use crate::heads::{CellPredictions, HeadVars};
use crate::sampling::{renormalize_weights, PotentialWeighting, Supervision};

/// Added inside the logarithm of the spatial-consistency loss.
pub const LOG_EPS: f64 = 1e-16;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub l_sp: f64,
    pub l_iou: f64,
    pub l_pn: f64,
    pub l_po: f64,
    pub total: f64,
    pub n_pos: usize,
    pub n_pot: usize,
    pub n_neg: usize,
}

impl LossBreakdown {
    pub fn from_terms(l_sp: f64, l_iou: f64, l_pn: f64, l_po: f64) -> Self {
        Self {
            l_sp,
            l_iou,
            l_pn,
            l_po,
            total: l_pn + l_po + l_sp + l_iou,
            ..Self::default()
        }
    }

    /// Term-wise sum, counts included.
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.l_sp += other.l_sp;
        self.l_iou += other.l_iou;
        self.l_pn += other.l_pn;
        self.l_po += other.l_po;
        self.total += other.total;
        self.n_pos += other.n_pos;
        self.n_pot += other.n_pot;
        self.n_neg += other.n_neg;
    }

    pub fn is_finite(&self) -> bool {
        [self.l_sp, self.l_iou, self.l_pn, self.l_po, self.total].iter().all(|v| v.is_finite())
    }

    pub const CSV_HEADER: &'static str = "step,l_pn,l_po,l_sp,l_iou,total,n_pos,n_pot";

    pub fn csv_row(&self, step: u64) -> String {
        format!(
            "{step},{},{},{},{},{},{},{}",
            self.l_pn, self.l_po, self.l_sp, self.l_iou, self.total, self.n_pos, self.n_pot
        )
    }
}

fn zero<F: Real>(tape: &mut Tape<F>) -> Var {
    tape.constant(Tensor::scalar(F::zero()))
}

fn lits<F: Real>(v: &[f64]) -> Vec<F> {
    v.iter().map(|&x| F::lit(x)).collect()
}

/// Mean of `-ln(iou_s + eps)` over `cells`.
pub fn loss_spatial<F: Real>(tape: &mut Tape<F>, iou_s: Var, cells: &[usize]) -> Result<Var> {
    if cells.is_empty() {
        return Ok(zero(tape));
    }
    let x = tape.gather_rows(iou_s, cells)?;
    let x = tape.affine(x, F::one(), F::lit(LOG_EPS));
    let l = tape.log(x);
    let m = tape.mean(l);
    Ok(tape.scale(m, -F::one()))
}

/// Mean of `1 - IoU(box, target)` over `cells`; `boxes` is `[N, 4]` cxcywh.
pub fn loss_iou<F: Real>(tape: &mut Tape<F>, boxes: Var, cells: &[usize], targets: &[BBox]) -> Result<Var> {
    if cells.len() != targets.len() {
        return invalid(format!("{} cells but {} IoU targets", cells.len(), targets.len()));
    }
    if cells.is_empty() {
        return Ok(zero(tape));
    }
    let pred = tape.gather_rows(boxes, cells)?;
    let flat: Vec<f64> = targets.iter().flat_map(|b| b.to_cxcywh()).collect();
    let gt = tape.constant(Tensor::from_f64(&[targets.len(), 4], &flat)?);
    let i = tape.iou(pred, gt)?;
    let l = tape.affine(i, -F::one(), F::one());
    Ok(tape.mean(l))
}

/// Mean BCE of the sigmoided `logits` at `cells` against `targets`, each
/// sample scaled by its constant `weights`.
fn weighted_bce_mean<F: Real>(
    tape: &mut Tape<F>,
    logits: Var,
    cells: &[usize],
    targets: &[f64],
    weights: Option<&[f64]>,
) -> Result<Var> {
    if cells.is_empty() {
        return Ok(zero(tape));
    }
    let z = tape.gather_rows(logits, cells)?;
    let p = tape.sigmoid(z);
    let l = tape.bce(p, lits(targets))?;
    let k = 1.0 / cells.len() as f64;
    let w = match weights {
        Some(w) => w.iter().map(|&w| F::lit(w * k)).collect(),
        None => vec![F::lit(k); cells.len()],
    };
    Ok(tape.weighted_sum(l, w)?)
}

/// Positive-negative objectness: positives toward `pos_targets`, potentials
/// toward 1 scaled by `pot_weights`, negatives toward 0.
pub fn loss_pn<F: Real>(
    tape: &mut Tape<F>,
    logits: Var,
    pos: &[usize],
    pos_targets: &[f64],
    pot: &[usize],
    pot_weights: &[f64],
    neg: &[usize],
) -> Result<Var> {
    if pos.len() != pos_targets.len() || pot.len() != pot_weights.len() {
        return invalid("positive-negative loss: targets or weights misaligned with cells");
    }
    let a = weighted_bce_mean(tape, logits, pos, pos_targets, None)?;
    let b = weighted_bce_mean(tape, logits, pot, &vec![1.0; pot.len()], Some(pot_weights))?;
    let c = weighted_bce_mean(tape, logits, neg, &vec![0.0; neg.len()], None)?;
    let ab = tape.add(a, b)?;
    Ok(tape.add(ab, c)?)
}

/// Positive-only objectness: positives toward `iou_g`, potentials toward their
/// (constant) spatial IoU. Negatives do not appear.
pub fn loss_po<F: Real>(
    tape: &mut Tape<F>,
    logits: Var,
    pos: &[usize],
    iou_g: &[f64],
    pot: &[usize],
    pot_iou_s: &[f64],
) -> Result<Var> {
    if pos.len() != iou_g.len() || pot.len() != pot_iou_s.len() {
        return invalid("positive-only loss: targets misaligned with cells");
    }
    let a = weighted_bce_mean(tape, logits, pos, iou_g, None)?;
    let b = weighted_bce_mean(tape, logits, pot, pot_iou_s, None)?;
    Ok(tape.add(a, b)?)
}

/// Loss nodes of one frame.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub l_sp: Var,
    pub l_iou: Var,
    pub l_pn: Var,
    pub l_po: Var,
    pub total: Var,
}

impl LossTerms {
    pub fn breakdown<F: Real>(&self, tape: &Tape<F>, sup: &Supervision) -> LossBreakdown {
        let v = |x: Var| tape.scalar(x).as_f64();
        LossBreakdown {
            l_sp: v(self.l_sp),
            l_iou: v(self.l_iou),
            l_pn: v(self.l_pn),
            l_po: v(self.l_po),
            total: v(self.total),
            n_pos: sup.assignment.positives().len(),
            n_pot: sup.potentials.len(),
            n_neg: plain_negatives(sup).len(),
        }
    }
}

/// Negatives that were not promoted to potentials.
pub fn plain_negatives(sup: &Supervision) -> Vec<usize> {
    let mut neg = sup.assignment.negatives();
    neg.retain(|c| !sup.potentials.cells.contains(c));
    neg
}

/// Potential weights as they enter the positive-negative loss, given the
/// current positive-negative probabilities.
pub fn effective_potential_weights(preds: &CellPredictions, sup: &Supervision) -> Vec<f64> {
    match sup.weighting {
        PotentialWeighting::Unit => vec![1.0; sup.potentials.len()],
        PotentialWeighting::Renormalized => {
            let losses: Vec<f64> = sup
                .potentials
                .cells
                .iter()
                .map(|&c| bce_value(preds.o_pn[c], 1.0))
                .collect();
            renormalize_weights(&losses, &sup.potentials.weights)
        }
    }
}

/// All four terms and their unweighted sum. Terms whose branch is absent
/// from the head layout are constant zeros.
pub fn frame_loss<F: Real>(
    tape: &mut Tape<F>,
    vars: &HeadVars,
    preds: &CellPredictions,
    sup: &Supervision,
) -> Result<LossTerms> {
    let pos = sup.assignment.positives();
    let pot = &sup.potentials.cells;
    let neg = plain_negatives(sup);
    let targets: Vec<BBox> = pos
        .iter()
        .map(|&c| sup.targets[c].expect("positives carry a target"))
        .collect();
    let iou_g: Vec<f64> = pos.iter().map(|&c| sup.assignment.iou_g[c]).collect();

    let l_sp = match vars.iou_s {
        Some(iou_s) => {
            let cells: Vec<usize> = pos.iter().chain(pot.iter()).copied().collect();
            loss_spatial(tape, iou_s, &cells)?
        }
        None => zero(tape),
    };
    let l_iou = loss_iou(tape, vars.fused, &pos, &targets)?;
    let l_pn = match vars.pn_logit {
        Some(z) => {
            let pos_targets = if sup.soft_positive_target {
                iou_g.clone()
            } else {
                vec![1.0; pos.len()]
            };
            // Renormalization reads the current values only: the weights are constants.
            let weights = effective_potential_weights(preds, sup);
            loss_pn(tape, z, &pos, &pos_targets, pot, &weights, &neg)?
        }
        None => zero(tape),
    };
    let l_po = match vars.po_logit {
        Some(z) => loss_po(tape, z, &pos, &iou_g, pot, &sup.potentials.iou_s)?,
        None => zero(tape),
    };
    let total = total_loss(tape, [l_pn, l_po, l_sp, l_iou])?;
    Ok(LossTerms {
        l_sp,
        l_iou,
        l_pn,
        l_po,
        total,
    })
}

/// Unweighted sum of scalar terms.
pub fn total_loss<F: Real>(tape: &mut Tape<F>, terms: [Var; 4]) -> Result<Var> {
    let a = tape.add(terms[0], terms[1])?;
    let b = tape.add(terms[2], terms[3])?;
    Ok(tape.add(a, b)?)
}

