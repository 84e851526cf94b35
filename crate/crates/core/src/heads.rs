//! Dual regressor and disentangled objectness heads, plus per-cell fusion.

use deoe_nncore::{sigmoid, Bound, Conv2d, ParamId, ParamStore, Real, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{iou, BBox};

/// Logit bias of the objectness projections: sigma(-2) ~ 0.12 at init.
pub const OBJECTNESS_BIAS: f64 = -2.0;
/// Scale applied to the fan-in init of the box projections so initial
/// predictions sit close to the prior squares.
const BOX_PROJECTION_SCALE: f64 = 0.1;

/// One prior square of side `stride` per feature cell, row-major.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PriorGrid {
    pub rows: usize,
    pub cols: usize,
    /// Pixels per cell.
    pub stride: f64,
}

impl PriorGrid {
    pub fn new(rows: usize, cols: usize, stride: f64) -> Self {
        Self { rows, cols, stride }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn center(&self, cell: usize) -> (f64, f64) {
        let (i, j) = (cell / self.cols, cell % self.cols);
        ((j as f64 + 0.5) * self.stride, (i as f64 + 0.5) * self.stride)
    }

    pub fn prior_box(&self, cell: usize) -> BBox {
        let (cx, cy) = self.center(cell);
        BBox::from_center(cx, cy, self.stride, self.stride)
    }

    /// Inverse of [`decode_offsets`].
    pub fn encode_offsets(&self, cell: usize, b: &BBox) -> [f64; 4] {
        let (ccx, ccy) = self.center(cell);
        let (cx, cy) = b.center();
        let s = self.stride;
        [(cx - ccx) / s, (cy - ccy) / s, (b.w / s).ln(), (b.h / s).ln()]
    }

    /// `center = cell_center + d * s`, `size = s * exp(d)`.
    pub fn decode_offsets(&self, cell: usize, d: [f64; 4]) -> BBox {
        let (ccx, ccy) = self.center(cell);
        let s = self.stride;
        BBox::from_center(ccx + d[0] * s, ccy + d[1] * s, s * d[2].exp(), s * d[3].exp())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectnessBranches {
    /// Positive-negative and positive-only branches, fused by product.
    Disentangled,
    /// Positive-negative branch alone (the class-agnostic baseline).
    PosNegOnly,
    PosOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadLayout {
    pub objectness: ObjectnessBranches,
    pub dual_regressor: bool,
}

impl HeadLayout {
    pub const FULL: HeadLayout = HeadLayout {
        objectness: ObjectnessBranches::Disentangled,
        dual_regressor: true,
    };
    pub const BASELINE: HeadLayout = HeadLayout {
        objectness: ObjectnessBranches::PosNegOnly,
        dual_regressor: false,
    };

    pub fn has_pn(&self) -> bool {
        self.objectness != ObjectnessBranches::PosOnly
    }

    pub fn has_po(&self) -> bool {
        self.objectness != ObjectnessBranches::PosNegOnly
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadsConfig {
    pub in_channels: usize,
    pub channels: usize,
    pub dropout: f64,
    pub layout: HeadLayout,
}

/// Two 3x3 conv + SiLU layers and a 1x1 projection.
#[derive(Clone, Debug)]
struct Branch {
    convs: [Conv2d; 2],
    out: Conv2d,
    dropout: f64,
}

impl Branch {
    fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        in_c: usize,
        c: usize,
        out_c: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let convs = [
            Conv2d::new(store, &format!("{name}.conv0"), in_c, c, 3, 1, rng)?,
            Conv2d::new(store, &format!("{name}.conv1"), c, c, 3, 1, rng)?,
        ];
        let out = Conv2d::new(store, &format!("{name}.out"), c, out_c, 1, 1, rng)?;
        Ok(Self { convs, out, dropout })
    }

    fn forward<F: Real, R: Rng>(
        &self,
        tape: &mut Tape<F>,
        p: &Bound,
        x: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let mut y = tape.dropout(x, self.dropout, training, rng)?;
        for c in &self.convs {
            y = c.forward(tape, p, y)?;
            y = tape.silu(y);
        }
        Ok(self.out.forward(tape, p, y)?)
    }
}

fn scale_param<F: Real>(store: &mut ParamStore<F>, id: ParamId, s: f64) {
    for v in store.get_mut(id).data_mut() {
        *v *= F::lit(s);
    }
}

fn fill_param<F: Real>(store: &mut ParamStore<F>, id: ParamId, value: f64) {
    for v in store.get_mut(id).data_mut() {
        *v = F::lit(value);
    }
}

#[derive(Clone, Debug)]
pub struct Heads {
    cfg: HeadsConfig,
    reg_a: Branch,
    reg_b: Option<Branch>,
    pn: Option<Branch>,
    po: Option<Branch>,
}

/// Head outputs on the tape. Boxes are `[N, 4]` in `(cx, cy, w, h)` pixels,
/// per-cell scalars are `[N]`, cells row-major.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub box_a: Var,
    pub box_b: Option<Var>,
    pub fused: Var,
    pub iou_s: Option<Var>,
    pub pn_logit: Option<Var>,
    pub po_logit: Option<Var>,
}

impl Heads {
    pub fn new<F: Real, R: Rng>(store: &mut ParamStore<F>, cfg: HeadsConfig, rng: &mut R) -> Result<Self> {
        if !(0.0..1.0).contains(&cfg.dropout) {
            return invalid(format!("dropout rate {} outside [0, 1)", cfg.dropout));
        }
        let (in_c, c) = (cfg.in_channels, cfg.channels);
        let reg = |store: &mut ParamStore<F>, name: &str, rng: &mut R| -> Result<Branch> {
            let b = Branch::new(store, name, in_c, c, 4, cfg.dropout, rng)?;
            scale_param(store, b.out.weight, BOX_PROJECTION_SCALE);
            Ok(b)
        };
        let reg_a = reg(store, "head.reg_a", rng)?;
        let reg_b = if cfg.layout.dual_regressor {
            Some(reg(store, "head.reg_b", rng)?)
        } else {
            None
        };
        let obj = |store: &mut ParamStore<F>, name: &str, rng: &mut R| -> Result<Branch> {
            let b = Branch::new(store, name, in_c, c, 1, 0.0, rng)?;
            fill_param(store, b.out.bias, OBJECTNESS_BIAS);
            Ok(b)
        };
        let pn = if cfg.layout.has_pn() {
            Some(obj(store, "head.obj_pn", rng)?)
        } else {
            None
        };
        let po = if cfg.layout.has_po() {
            Some(obj(store, "head.obj_po", rng)?)
        } else {
            None
        };
        Ok(Self { cfg, reg_a, reg_b, pn, po })
    }

    pub fn config(&self) -> &HeadsConfig {
        &self.cfg
    }

    /// `features` is `[C, rows, cols]`; `stride` converts cells to pixels.
    pub fn forward<F: Real, R: Rng>(
        &self,
        tape: &mut Tape<F>,
        p: &Bound,
        features: Var,
        stride: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<HeadVars> {
        let shape = tape.shape(features).to_vec();
        if shape.len() != 3 || shape[0] != self.cfg.in_channels {
            return invalid(format!(
                "heads expect [{}, rows, cols] features, got {shape:?}",
                self.cfg.in_channels
            ));
        }
        let n = shape[1] * shape[2];
        let s = F::lit(stride);
        let raw_a = self.reg_a.forward(tape, p, features, training, rng)?;
        let box_a = tape.box_decode(raw_a, s)?;
        let (box_b, fused, iou_s) = match &self.reg_b {
            Some(b) => {
                let raw_b = b.forward(tape, p, features, training, rng)?;
                let box_b = tape.box_decode(raw_b, s)?;
                let sum = tape.add(box_a, box_b)?;
                let fused = tape.scale(sum, F::lit(0.5));
                let iou_s = tape.iou(box_a, box_b)?;
                (Some(box_b), fused, Some(iou_s))
            }
            None => (None, box_a, None),
        };
        let mut logit = |b: &Option<Branch>, tape: &mut Tape<F>| -> Result<Option<Var>> {
            match b {
                Some(b) => {
                    let z = b.forward(tape, p, features, training, rng)?;
                    Ok(Some(tape.reshape(z, &[n])?))
                }
                None => Ok(None),
            }
        };
        let pn_logit = logit(&self.pn, tape)?;
        let po_logit = logit(&self.po, tape)?;
        Ok(HeadVars {
            box_a,
            box_b,
            fused,
            iou_s,
            pn_logit,
            po_logit,
        })
    }
}

/// Per-cell values read off the tape. Missing branches read as neutral: an
/// absent objectness branch is 1 and a single regressor has `iou_s = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct CellPredictions {
    pub grid: PriorGrid,
    pub box_a: Vec<BBox>,
    pub box_b: Vec<BBox>,
    pub box_fused: Vec<BBox>,
    pub o_pn: Vec<f64>,
    pub o_po: Vec<f64>,
    pub obj_fused: Vec<f64>,
    pub iou_s: Vec<f64>,
    /// Filled by [`HeadTemporalBuffer::update`]; equals `iou_s` until then.
    pub iou_t: Vec<f64>,
}

fn read_boxes<F: Real>(tape: &Tape<F>, v: Var) -> Vec<BBox> {
    tape.value(v)
        .chunks_exact(4)
        .map(|c| BBox::from_cxcywh([c[0].as_f64(), c[1].as_f64(), c[2].as_f64(), c[3].as_f64()]))
        .collect()
}

fn read_probs<F: Real>(tape: &Tape<F>, v: Option<Var>, n: usize) -> Vec<f64> {
    match v {
        Some(v) => tape.value(v).iter().map(|&z| sigmoid(z.as_f64())).collect(),
        None => vec![1.0; n],
    }
}

impl CellPredictions {
    pub fn from_vars<F: Real>(tape: &Tape<F>, vars: &HeadVars, grid: PriorGrid) -> Result<Self> {
        let box_a = read_boxes(tape, vars.box_a);
        let n = grid.len();
        if box_a.len() != n {
            return invalid(format!("{} predicted boxes for a {}-cell grid", box_a.len(), n));
        }
        let box_b = vars.box_b.map_or_else(|| box_a.clone(), |v| read_boxes(tape, v));
        let box_fused = read_boxes(tape, vars.fused);
        let iou_s: Vec<f64> = match vars.iou_s {
            Some(v) => tape.value(v).iter().map(|x| x.as_f64()).collect(),
            None => vec![1.0; n],
        };
        let o_pn = read_probs(tape, vars.pn_logit, n);
        let o_po = read_probs(tape, vars.po_logit, n);
        let obj_fused = o_pn.iter().zip(&o_po).map(|(a, b)| a * b).collect();
        Ok(Self {
            grid,
            box_a,
            box_b,
            box_fused,
            o_pn,
            o_po,
            obj_fused,
            iou_t: iou_s.clone(),
            iou_s,
        })
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }
}

/// Previous frame's fused boxes, per cell.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HeadTemporalBuffer {
    boxes: Vec<BBox>,
    valid: bool,
}

impl HeadTemporalBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_valid(&self) -> bool {
        self.valid
    }

    pub fn boxes(&self) -> &[BBox] {
        &self.boxes
    }

    pub fn reset(&mut self) {
        self.boxes.clear();
        self.valid = false;
    }

    /// Per-cell IoU between the current and the stored fused boxes, or
    /// `iou_s` when the buffer is empty (first frame of a sequence). Stores
    /// `current` for the next call.
    pub fn temporal_iou(&mut self, current: &[BBox], iou_s: &[f64]) -> Result<Vec<f64>> {
        if current.len() != iou_s.len() {
            return invalid(format!("{} boxes but {} spatial IoUs", current.len(), iou_s.len()));
        }
        let out = if self.valid {
            if self.boxes.len() != current.len() {
                return invalid(format!(
                    "temporal buffer holds {} cells, frame has {}",
                    self.boxes.len(),
                    current.len()
                ));
            }
            current.iter().zip(&self.boxes).map(|(a, b)| iou(a, b)).collect()
        } else {
            iou_s.to_vec()
        };
        self.boxes = current.to_vec();
        self.valid = true;
        Ok(out)
    }

    /// Fills `preds.iou_t` and advances the buffer.
    pub fn update(&mut self, preds: &mut CellPredictions) -> Result<()> {
        preds.iou_t = self.temporal_iou(&preds.box_fused, &preds.iou_s)?;
        Ok(())
    }
}
