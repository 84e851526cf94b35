mod common;

use deoe_core::gradsuite::run_suite;
use deoe_core::heads::{CellPredictions, HeadVars, PriorGrid};
use deoe_core::loss::{
    effective_potential_weights, frame_loss, plain_negatives, loss_iou, loss_pn, loss_po, loss_spatial, total_loss, LossBreakdown,
};
use deoe_core::sampling::{variant_assign, ScreeningConfig, Supervision, VariantMode};
use deoe_core::BBox;
use deoe_nncore::{bce_value, grad_check, sigmoid, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn vec_leaf(tape: &mut Tape<f64>, v: &[f64]) -> Var {
    tape.leaf(Tensor::new(&[v.len()], v.to_vec()).unwrap(), true)
}

#[test]
fn spatial_loss_values() {
    let mut tape = Tape::new();
    let x = vec_leaf(&mut tape, &[0.0]);
    let l = loss_spatial(&mut tape, x, &[0]).unwrap();
    assert!((tape.scalar(l) - 36.841_361_487_904_73).abs() < 1e-9);
    let ones = vec_leaf(&mut tape, &[1.0, 1.0, 0.3]);
    let l = loss_spatial(&mut tape, ones, &[0, 1]).unwrap();
    assert!(tape.scalar(l).abs() < 1e-12);
    let l = loss_spatial(&mut tape, ones, &[]).unwrap();
    assert_eq!(tape.scalar(l), 0.0);

    let r = grad_check(
        |t, v| loss_spatial(t, v[0], &[0]).map_err(|e| deoe_nncore::NnError::InvalidArgument(e.to_string())),
        &[Tensor::new(&[1], vec![0.5]).unwrap()],
        1e-6,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6);
    assert!((r.analytic + 2.0).abs() < 1e-9);
}

#[test]
fn iou_loss_values() {
    let mut tape = Tape::<f64>::new();
    let boxes = tape.leaf(Tensor::new(&[2, 4], vec![5.0, 5.0, 10.0, 10.0, 50.0, 50.0, 4.0, 4.0]).unwrap(), true);
    let gt = BBox::new(5.0, 5.0, 10.0, 10.0);
    let l = loss_iou(&mut tape, boxes, &[0], &[gt]).unwrap();
    assert!((tape.scalar(l) - 6.0 / 7.0).abs() < 1e-12);
    let l = loss_iou(&mut tape, boxes, &[0], &[BBox::new(0.0, 0.0, 10.0, 10.0)]).unwrap();
    assert!(tape.scalar(l).abs() < 1e-12);
    let l = loss_iou(&mut tape, boxes, &[1], &[gt]).unwrap();
    assert!((tape.scalar(l) - 1.0).abs() < 1e-12);
    let l = loss_iou(&mut tape, boxes, &[], &[]).unwrap();
    assert_eq!(tape.scalar(l), 0.0);
    assert!(loss_iou(&mut tape, boxes, &[0, 1], &[gt]).is_err());
}

#[test]
fn positive_negative_loss_values() {
    let mut tape = Tape::new();
    let z = vec_leaf(&mut tape, &[0.0, 0.0, 30.0, -30.0]);
    let l = loss_pn(&mut tape, z, &[], &[], &[], &[], &[0]).unwrap();
    assert!((tape.scalar(l) - std::f64::consts::LN_2).abs() < 1e-12);
    let l = loss_pn(&mut tape, z, &[], &[], &[1], &[0.25], &[]).unwrap();
    assert!((tape.scalar(l) - 0.25 * std::f64::consts::LN_2).abs() < 1e-12);
    assert!((tape.scalar(l) - 0.173_287).abs() < 1e-6);
    let l = loss_pn(&mut tape, z, &[2], &[1.0], &[], &[], &[3]).unwrap();
    assert!(tape.scalar(l) < 1e-6);
    // Each subset is averaged on its own.
    let l = loss_pn(&mut tape, z, &[0, 2], &[1.0, 1.0], &[], &[], &[1]).unwrap();
    let expect = 0.5 * (bce_value(0.5, 1.0) + bce_value(sigmoid(30.0), 1.0)) + bce_value(0.5, 0.0);
    assert!((tape.scalar(l) - expect).abs() < 1e-12);
    assert!(loss_pn(&mut tape, z, &[0], &[], &[], &[], &[]).is_err());
}

#[test]
fn positive_only_loss_values() {
    let mut tape = Tape::new();
    let z = vec_leaf(&mut tape, &[logit(0.7), 30.0, 0.0]);
    let l = loss_po(&mut tape, z, &[0], &[0.7], &[], &[]).unwrap();
    assert!((tape.scalar(l) - 0.610_864).abs() < 1e-6);
    let l = loss_po(&mut tape, z, &[1], &[1.0], &[], &[]).unwrap();
    assert!(tape.scalar(l) < 1e-6);
    let l = loss_po(&mut tape, z, &[], &[], &[2], &[0.3]).unwrap();
    assert!((tape.scalar(l) - bce_value(0.5, 0.3)).abs() < 1e-12);
    assert!(loss_po(&mut tape, z, &[], &[], &[2], &[]).is_err());

    let grads = {
        let mut tape = Tape::new();
        let z = vec_leaf(&mut tape, &[logit(0.7)]);
        let l = loss_po(&mut tape, z, &[0], &[0.7], &[], &[]).unwrap();
        tape.backward(l).unwrap().get(z).unwrap().to_vec()
    };
    assert!(grads[0].abs() < 1e-8);
}

#[test]
fn total_is_the_plain_sum() {
    let mut tape = Tape::new();
    let terms: Vec<Var> = (1..=4).map(|k| tape.constant(Tensor::scalar(k as f64))).collect();
    let t = total_loss(&mut tape, [terms[0], terms[1], terms[2], terms[3]]).unwrap();
    assert_eq!(tape.scalar(t), 10.0);
    let b = LossBreakdown::from_terms(3.0, 4.0, 1.0, 2.0);
    assert_eq!(b.total, 10.0);
    let mut acc = LossBreakdown::default();
    acc.accumulate(&b);
    acc.accumulate(&b);
    assert_eq!(acc.total, 20.0);
    assert!(acc.is_finite());
    assert_eq!(b.csv_row(7).split(',').count(), LossBreakdown::CSV_HEADER.split(',').count());
}

/// Head outputs as tape leaves over a 2x2 grid of 8 px cells.
struct Fixture {
    grid: PriorGrid,
    boxes_a: Vec<f64>,
    boxes_b: Vec<f64>,
    pn: Vec<f64>,
    po: Vec<f64>,
}

impl Fixture {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = PriorGrid::new(2, 2, 8.0);
        let mut boxes = || -> Vec<f64> {
            (0..4)
                .flat_map(|c| {
                    let (cx, cy) = grid.center(c);
                    [
                        cx + rng.random_range(-1.0..1.0),
                        cy + rng.random_range(-1.0..1.0),
                        rng.random_range(6.0..10.0),
                        rng.random_range(6.0..10.0),
                    ]
                })
                .collect()
        };
        let (boxes_a, boxes_b) = (boxes(), boxes());
        let pn = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let po = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        Self { grid, boxes_a, boxes_b, pn, po }
    }

    fn vars(&self, tape: &mut Tape<f64>) -> HeadVars {
        let a = tape.leaf(Tensor::new(&[4, 4], self.boxes_a.clone()).unwrap(), true);
        let b = tape.leaf(Tensor::new(&[4, 4], self.boxes_b.clone()).unwrap(), true);
        let sum = tape.add(a, b).unwrap();
        let fused = tape.scale(sum, 0.5);
        let iou_s = tape.iou(a, b).unwrap();
        let pn = vec_leaf(tape, &self.pn);
        let po = vec_leaf(tape, &self.po);
        HeadVars {
            box_a: a,
            box_b: Some(b),
            fused,
            iou_s: Some(iou_s),
            pn_logit: Some(pn),
            po_logit: Some(po),
        }
    }

    fn supervise(&self, mode: VariantMode, n: usize) -> (CellPredictions, Supervision) {
        let mut tape = Tape::new();
        let vars = self.vars(&mut tape);
        let preds = CellPredictions::from_vars(&tape, &vars, self.grid).unwrap();
        let cfg = ScreeningConfig {
            potential_count: n,
            ..ScreeningConfig::default()
        };
        let known = [BBox::new(0.5, 0.2, 7.0, 7.5)];
        (preds.clone(), variant_assign(mode, &preds, &known, None, &cfg).unwrap())
    }

    fn losses(&self, preds: &CellPredictions, sup: &Supervision) -> LossBreakdown {
        let mut tape = Tape::new();
        let vars = self.vars(&mut tape);
        frame_loss(&mut tape, &vars, preds, sup).unwrap().breakdown(&tape, sup)
    }
}

#[test]
fn raising_a_negative_score_raises_the_pn_loss() {
    let mut fx = Fixture::new(1);
    let (preds, sup) = fx.supervise(VariantMode::Deoe, 1);
    let neg = plain_negatives(&sup)[0];
    let base = fx.losses(&preds, &sup).l_pn;
    fx.pn[neg] += 0.5;
    assert!(fx.losses(&preds, &sup).l_pn > base);
}

#[test]
fn better_agreement_on_a_potential_lowers_the_spatial_loss() {
    let mut fx = Fixture::new(2);
    let (preds, sup) = fx.supervise(VariantMode::Deoe, 1);
    let c = sup.potentials.cells[0];
    let base = fx.losses(&preds, &sup).l_sp;
    let a = fx.boxes_a[4 * c..4 * c + 4].to_vec();
    for (k, v) in a.iter().enumerate() {
        let b = &mut fx.boxes_b[4 * c + k];
        *b = 0.5 * (*b + v);
    }
    assert!(fx.losses(&preds, &sup).l_sp < base);
}

#[test]
fn negatives_never_touch_the_po_loss() {
    let mut fx = Fixture::new(3);
    let (preds, sup) = fx.supervise(VariantMode::Deoe, 1);
    let negs = plain_negatives(&sup);
    assert!(!negs.is_empty());
    let base = fx.losses(&preds, &sup).l_po;
    for &c in &negs {
        fx.po[c] = 0.0;
        fx.boxes_a[4 * c + 2] += 3.0;
    }
    assert_eq!(fx.losses(&preds, &sup).l_po, base);

    let mut tape = Tape::new();
    let vars = fx.vars(&mut tape);
    let terms = frame_loss(&mut tape, &vars, &preds, &sup).unwrap();
    let g = tape.backward(terms.l_po).unwrap();
    let gz = g.get_or_zeros(vars.po_logit.unwrap(), 4);
    assert!(negs.iter().all(|&c| gz[c] == 0.0));
    // The iou_s target is a constant: no path from l_po into the regressors.
    assert!(g.get(vars.box_a).is_none_or(|d| d.iter().all(|&v| v == 0.0)));
}

#[test]
fn potential_weights_are_constants() {
    let fx = Fixture::new(4);
    let (preds, sup) = fx.supervise(VariantMode::Deoe, 1);
    let c = sup.potentials.cells[0];
    let w = effective_potential_weights(&preds, &sup);
    assert_eq!(w.len(), 1);
    let mut tape = Tape::new();
    let vars = fx.vars(&mut tape);
    let terms = frame_loss(&mut tape, &vars, &preds, &sup).unwrap();
    let g = tape.backward(terms.l_pn).unwrap();
    let gz = g.get_or_zeros(vars.pn_logit.unwrap(), 4);
    // d/dz of w * BCE(sigmoid(z), 1) with w held fixed.
    let expect = w[0] * (sigmoid(fx.pn[c]) - 1.0);
    assert!((gz[c] - expect).abs() < 1e-12);
    // A single potential renormalizes to weight 1.
    assert!((w[0] - 1.0).abs() < 1e-12);
}

#[test]
fn zero_potentials_reduce_to_class_aware() {
    let fx = Fixture::new(5);
    let (preds, deoe) = fx.supervise(VariantMode::Deoe, 0);
    let (_, ca) = fx.supervise(VariantMode::Ca, 0);
    let (a, b) = (fx.losses(&preds, &deoe), fx.losses(&preds, &ca));
    assert_eq!(a.l_pn + a.l_iou, b.l_pn + b.l_iou);

    // Against a hand-written baseline: BCE(pos, 1) mean + BCE(neg, 0) mean + l_iou.
    let pos = ca.assignment.positives();
    let neg = ca.assignment.negatives();
    assert_eq!(neg, plain_negatives(&ca));
    let mean = |v: Vec<f64>| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let l_pos = mean(pos.iter().map(|&c| bce_value(sigmoid(fx.pn[c]), 1.0)).collect());
    let l_neg = mean(neg.iter().map(|&c| bce_value(sigmoid(fx.pn[c]), 0.0)).collect());
    let l_iou = mean(
        pos.iter()
            .map(|&c| 1.0 - common::iou_oracle(&preds.box_fused[c], &ca.targets[c].unwrap()))
            .collect(),
    );
    assert!((b.l_pn - (l_pos + l_neg)).abs() < 1e-12);
    assert!((b.l_iou - l_iou).abs() < 1e-12);

}

#[test]
fn soft_positive_target_uses_prior_iou() {
    let fx = Fixture::new(6);
    let (preds, cao) = fx.supervise(VariantMode::CaO, 0);
    let pos = cao.assignment.positives();
    let neg = cao.assignment.negatives();
    let expect = pos
        .iter()
        .map(|&c| bce_value(sigmoid(fx.pn[c]), cao.assignment.iou_g[c]))
        .sum::<f64>()
        / pos.len() as f64
        + neg.iter().map(|&c| bce_value(sigmoid(fx.pn[c]), 0.0)).sum::<f64>() / neg.len() as f64;
    assert!((fx.losses(&preds, &cao).l_pn - expect).abs() < 1e-12);
}

#[test]
fn potentials_leave_the_negative_subset() {
    let fx = Fixture::new(7);
    let (preds, sup) = fx.supervise(VariantMode::Deoe, 2);
    let pot = sup.potentials.cells.clone();
    assert_eq!(pot.len(), 2);
    let neg = plain_negatives(&sup);
    assert!(neg.iter().all(|c| !pot.contains(c)));
    assert_eq!(neg.len() + pot.len(), sup.assignment.negatives().len());
    let w = effective_potential_weights(&preds, &sup);
    let expect = pot.iter().zip(&w).map(|(&c, w)| w * bce_value(sigmoid(fx.pn[c]), 1.0)).sum::<f64>() / 2.0
        + sup.assignment.positives().iter().map(|&c| bce_value(sigmoid(fx.pn[c]), 1.0)).sum::<f64>()
        + neg.iter().map(|&c| bce_value(sigmoid(fx.pn[c]), 0.0)).sum::<f64>() / neg.len() as f64;
    let b = fx.losses(&preds, &sup);
    assert!((b.l_pn - expect).abs() < 1e-12);
    assert_eq!(b.n_neg, neg.len());
}

#[test]
fn full_loss_gradients_on_the_tiny_model() {
    for row in run_suite(11).unwrap() {
        assert!(row.passed(), "{}: {}", row.name, row.max_rel_error);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn terms_are_bounded_and_sum(seed in 0u64..10_000, n in 0usize..4) {
        let fx = Fixture::new(seed);
        let (preds, sup) = fx.supervise(VariantMode::Deoe, n);
        let b = fx.losses(&preds, &sup);
        prop_assert!(b.is_finite());
        prop_assert!(b.l_pn >= 0.0 && b.l_po >= 0.0 && b.l_iou >= 0.0 && b.l_iou <= 1.0);
        prop_assert!(b.l_sp >= -1e-12);
        prop_assert!((b.total - (b.l_pn + b.l_po + b.l_sp + b.l_iou)).abs() < 1e-12);
        prop_assert_eq!(b.n_pot, sup.potentials.len());
    }
}
