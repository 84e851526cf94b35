//! Finite-difference check of every loss term through a tiny detector.

use deoe_nncore::{grad_check, Bound, NnError, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geometry::BBox;
use crate::heads::{CellPredictions, HeadLayout, HeadVars};
use crate::loss::{frame_loss, LossTerms};
use crate::model::{Detector, DetectorConfig};
use crate::sampling::{variant_assign, ScreeningConfig, Supervision, VariantMode};

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-6;

/// 16x8 sensor, one stage of stride 8: a two-cell grid.
pub fn tiny_config(layout: HeadLayout) -> DetectorConfig {
    DetectorConfig {
        t_bins: 2,
        sensor_height: 16,
        sensor_width: 8,
        downsample: false,
        widths: vec![4],
        strides: vec![8],
        recurrent_kernel: 3,
        head_channels: 4,
        dropout: 0.1,
        layout,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTerm {
    Sp,
    Iou,
    Pn,
    Po,
    Total,
}

impl LossTerm {
    pub const ALL: [LossTerm; 5] = [LossTerm::Sp, LossTerm::Iou, LossTerm::Pn, LossTerm::Po, LossTerm::Total];

    pub fn pick(self, t: &LossTerms) -> Var {
        match self {
            LossTerm::Sp => t.l_sp,
            LossTerm::Iou => t.l_iou,
            LossTerm::Pn => t.l_pn,
            LossTerm::Po => t.l_po,
            LossTerm::Total => t.total,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LossTerm::Sp => "l_sp",
            LossTerm::Iou => "l_iou",
            LossTerm::Pn => "l_pn",
            LossTerm::Po => "l_po",
            LossTerm::Total => "total",
        }
    }
}

/// Two frames through the detector with parameters bound to `p`; returns the
/// second frame's head outputs. Dropout masks come from a fixed seed so
/// repeated evaluations see the same network.
fn rollout(det: &Detector<f64>, inputs: &[Tensor<f64>], tape: &mut Tape<f64>, p: &Bound) -> Result<HeadVars> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xd0);
    let mut state = det.reset_state().attach(tape);
    let mut out = None;
    for x in inputs {
        let (vars, next) = det.step(tape, p, x.clone(), &state, true, &mut rng)?;
        state = next;
        out = Some(vars);
    }
    Ok(out.expect("at least one input frame"))
}

/// Fixed supervision for the tiny model: one annotated box over cell 0, and
/// cell 1 either a potential (`potential = true`) or a negative.
pub fn tiny_supervision(
    det: &Detector<f64>,
    inputs: &[Tensor<f64>],
    potential: bool,
) -> Result<(CellPredictions, Supervision)> {
    let mut tape = Tape::new();
    let p = det.params().bind_frozen(&mut tape);
    let vars = rollout(det, inputs, &mut tape, &p)?;
    let preds = CellPredictions::from_vars(&tape, &vars, det.grid())?;
    let known = [BBox::new(1.3, 0.7, 6.1, 7.4)];
    let cfg = ScreeningConfig {
        potential_count: usize::from(potential),
        ..ScreeningConfig::default()
    };
    let sup = variant_assign(VariantMode::Deoe, &preds, &known, None, &cfg)?;
    Ok((preds, sup))
}

/// Two random frames already through the `ln(1 + count)` transform.
pub fn tiny_inputs(det: &Detector<f64>, seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = det.config();
    let shape = [2 * cfg.t_bins, cfg.sensor_height, cfg.sensor_width];
    let n = shape.iter().product();
    (0..2)
        .map(|_| {
            let data = (0..n).map(|_| (rng.random_range(0..4) as f64).ln_1p()).collect();
            Tensor::new(&shape, data).expect("shape matches data")
        })
        .collect()
}

/// Max relative error of the tape gradient of `term` with respect to every
/// parameter of the tiny detector, at 64-bit.
pub fn loss_gradcheck(term: LossTerm, seed: u64, potential: bool) -> Result<f64> {
    let det = Detector::<f64>::new(tiny_config(HeadLayout::FULL), seed)?;
    let inputs = tiny_inputs(&det, seed);
    let (preds, sup) = tiny_supervision(&det, &inputs, potential)?;
    let f = |tape: &mut Tape<f64>, vars: &[Var]| {
        let p = Bound::from_vars(vars.to_vec());
        let terms = rollout(&det, &inputs, tape, &p)
            .and_then(|hv| frame_loss(tape, &hv, &preds, &sup))
            .map_err(|e| NnError::InvalidArgument(e.to_string()))?;
        Ok(term.pick(&terms))
    };
    Ok(grad_check(f, det.params().tensors(), STEP)?.max_rel_error)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteRow {
    pub name: String,
    pub max_rel_error: f64,
}

impl SuiteRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// Every term, with the second cell as a potential and as a negative.
pub fn run_suite(seed: u64) -> Result<Vec<SuiteRow>> {
    let mut rows = Vec::new();
    for potential in [true, false] {
        for term in LossTerm::ALL {
            rows.push(SuiteRow {
                name: format!("{}/{}", term.as_str(), if potential { "potential" } else { "negative" }),
                max_rel_error: loss_gradcheck(term, seed, potential)?,
            });
        }
    }
    Ok(rows)
}
