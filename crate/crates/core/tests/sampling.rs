mod common;

use common::{iou_oracle, random_box};
use deoe_core::heads::{CellPredictions, PriorGrid};
use deoe_core::sampling::{
    assign, potential_weight, renormalize_weights, score_potential, screen_potentials, variant_assign, CellStatus,
    PotentialWeighting, ScreeningConfig, VariantMode,
};
use deoe_core::BBox;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg(n: usize) -> ScreeningConfig {
    ScreeningConfig {
        potential_count: n,
        pos_iou: 0.5,
        neg_iou: 0.4,
    }
}

fn preds(grid: PriorGrid, obj: Vec<f64>, iou_s: Vec<f64>, iou_t: Vec<f64>) -> CellPredictions {
    let boxes: Vec<BBox> = (0..grid.len()).map(|c| grid.prior_box(c)).collect();
    CellPredictions {
        grid,
        box_a: boxes.clone(),
        box_b: boxes.clone(),
        box_fused: boxes,
        o_pn: obj.clone(),
        o_po: vec![1.0; grid.len()],
        obj_fused: obj,
        iou_s,
        iou_t,
    }
}

fn random_preds(rng: &mut ChaCha8Rng, grid: PriorGrid) -> CellPredictions {
    let n = grid.len();
    let mut v = || (0..n).map(|_| rng.random_range(0.0..1.0)).collect::<Vec<f64>>();
    let (a, b, c) = (v(), v(), v());
    preds(grid, a, b, c)
}

/// Threshold labelling from a full IoU table, before forced positives.
fn threshold_oracle(grid: &PriorGrid, gts: &[BBox], c: &ScreeningConfig) -> Vec<(CellStatus, Option<usize>)> {
    (0..grid.len())
        .map(|cell| {
            let prior = grid.prior_box(cell);
            let mut best = (0.0, None);
            for (g, gt) in gts.iter().enumerate() {
                let v = iou_oracle(&prior, gt);
                if best.1.is_none() || v > best.0 {
                    best = (v, Some(g));
                }
            }
            if best.0 >= c.pos_iou {
                (CellStatus::Positive, best.1)
            } else if best.0 >= c.neg_iou {
                (CellStatus::Ignore, None)
            } else {
                (CellStatus::Negative, None)
            }
        })
        .collect()
}

#[test]
fn assignment_against_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let grid = PriorGrid::new(8, 8, 8.0);
    for _ in 0..50 {
        let gts: Vec<BBox> = (0..rng.random_range(0..6))
            .map(|_| {
                let (w, h) = (rng.random_range(4.0..20.0), rng.random_range(4.0..20.0));
                BBox::new(rng.random_range(0.0..64.0 - w), rng.random_range(0.0..64.0 - h), w, h)
            })
            .collect();
        let asg = assign(&grid, &gts, &cfg(0));
        let oracle = threshold_oracle(&grid, &gts, &cfg(0));
        for c in 0..grid.len() {
            let (s, m) = oracle[c];
            if s == CellStatus::Positive {
                assert_eq!((asg.status[c], asg.matched[c]), (s, m));
                assert!((asg.iou_g[c] - iou_oracle(&grid.prior_box(c), &gts[m.unwrap()])).abs() < 1e-12);
            } else if asg.status[c] == CellStatus::Positive {
                // forced: the matched GT has no threshold positive
                let g = asg.matched[c].unwrap();
                assert!(!oracle.iter().any(|&(st, mm)| st == CellStatus::Positive && mm == Some(g)));
                assert!(asg.iou_g[c] > 0.0);
            } else {
                assert_eq!(asg.status[c], s);
                assert_eq!(asg.matched[c], None);
                assert_eq!(asg.iou_g[c], 0.0);
            }
        }
        for (g, gt) in gts.iter().enumerate() {
            let overlaps = (0..grid.len()).any(|c| iou_oracle(&grid.prior_box(c), gt) > 0.0);
            assert_eq!(asg.matched.contains(&Some(g)), overlaps);
        }
    }
}

#[test]
fn empty_ground_truth_makes_everything_negative() {
    let grid = PriorGrid::new(3, 3, 8.0);
    let asg = assign(&grid, &[], &cfg(5));
    assert_eq!(asg.negatives().len(), 9);
    assert!(asg.positives().is_empty());
}

#[test]
fn small_box_is_forced_onto_its_best_cell() {
    let grid = PriorGrid::new(4, 4, 16.0);
    // 4x4 inside cell 5; IoU with the 16x16 prior is 1/16.
    let gt = BBox::new(20.0, 20.0, 4.0, 4.0);
    let asg = assign(&grid, &[gt], &cfg(0));
    assert_eq!(asg.positives(), vec![5]);
    assert!((asg.iou_g[5] - 1.0 / 16.0).abs() < 1e-12);
    // Two such boxes in one cell: the second takes the next best cell.
    let twin = BBox::new(30.0, 20.0, 4.0, 4.0);
    let asg = assign(&grid, &[gt, twin], &cfg(0));
    assert_eq!(asg.positives(), vec![5, 6]);
    assert_eq!((asg.matched[5], asg.matched[6]), (Some(0), Some(1)));
}

#[test]
fn screening_matches_full_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let grid = PriorGrid::new(6, 6, 8.0);
    for _ in 0..30 {
        let p = random_preds(&mut rng, grid);
        let gts: Vec<BBox> = (0..3).map(|_| random_box(&mut rng, 48.0)).collect();
        let asg = assign(&grid, &gts, &cfg(0));
        let n = rng.random_range(0..40);
        let set = screen_potentials(&p, &asg, n).unwrap();
        let mut all: Vec<(f64, usize)> = asg
            .negatives()
            .into_iter()
            .map(|c| (p.obj_fused[c] * (p.iou_s[c] * p.iou_t[c]).sqrt(), c))
            .collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let expect: Vec<usize> = all.iter().take(n).map(|x| x.1).collect();
        assert_eq!(set.cells, expect);
        for (k, &c) in set.cells.iter().enumerate() {
            assert_eq!(asg.status[c], CellStatus::Negative);
            assert!((set.weights[k] - (p.obj_fused[c] * p.iou_s[c]).sqrt()).abs() < 1e-15);
            assert_eq!(set.iou_s[k], p.iou_s[c]);
        }
    }
}

#[test]
fn ties_go_to_the_lower_index() {
    let grid = PriorGrid::new(2, 3, 8.0);
    let p = preds(grid, vec![0.5; 6], vec![1.0; 6], vec![1.0; 6]);
    let asg = assign(&grid, &[], &cfg(0));
    let set = screen_potentials(&p, &asg, 3).unwrap();
    assert_eq!(set.cells, vec![0, 1, 2]);
}

#[test]
fn score_and_weight_formulas() {
    assert!((score_potential(0.8, 0.9, 0.4) - 0.8 * 0.6).abs() < 1e-12);
    assert!((potential_weight(0.36, 1.0) - 0.6).abs() < 1e-12);
    assert_eq!(score_potential(0.0, 1.0, 1.0), 0.0);
}

#[test]
fn count_larger_than_negatives_keeps_all() {
    let grid = PriorGrid::new(2, 2, 8.0);
    let p = preds(grid, vec![0.1, 0.2, 0.3, 0.4], vec![1.0; 4], vec![1.0; 4]);
    let asg = assign(&grid, &[BBox::new(0.0, 0.0, 8.0, 8.0)], &cfg(0));
    let set = screen_potentials(&p, &asg, 100).unwrap();
    assert_eq!(set.cells, vec![3, 2, 1]);
}

#[test]
fn variant_supervision() {
    let grid = PriorGrid::new(3, 3, 8.0);
    let obj = vec![0.9, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8];
    let iou_s = vec![1.0, 1.0, 0.01, 1.0, 1.0, 1.0, 1.0, 1.0, 0.01];
    let p = preds(grid, obj, iou_s, vec![1.0; 9]);
    let known = [grid.prior_box(0)];
    let all = [grid.prior_box(0), grid.prior_box(4)];
    let c = cfg(2);

    let ca = variant_assign(VariantMode::Ca, &p, &known, None, &c).unwrap();
    assert!(ca.potentials.is_empty());
    assert_eq!(ca.assignment.positives(), vec![0]);
    assert_eq!(ca.targets[0], Some(known[0]));
    assert!(!ca.soft_positive_target);

    let deoe = variant_assign(VariantMode::Deoe, &p, &known, None, &c).unwrap();
    assert_eq!(deoe.potentials.cells, vec![7, 6]);
    assert_eq!(deoe.weighting, PotentialWeighting::Renormalized);

    let cap = variant_assign(VariantMode::CaP, &p, &known, None, &c).unwrap();
    assert_eq!(cap.potentials.cells, vec![8, 7]);
    assert_eq!(cap.potentials.weights, vec![1.0, 1.0]);
    assert_eq!(cap.weighting, PotentialWeighting::Unit);

    let cao = variant_assign(VariantMode::CaO, &p, &known, None, &c).unwrap();
    assert!(cao.soft_positive_target && cao.potentials.is_empty());

    assert!(variant_assign(VariantMode::Oracle, &p, &known, None, &c).is_err());
    let oracle = variant_assign(VariantMode::Oracle, &p, &known, Some(&all), &c).unwrap();
    assert_eq!(oracle.assignment.positives(), vec![0, 4]);
    assert_eq!(oracle.targets[4], Some(all[1]));
}

#[test]
fn zero_potentials_reduce_to_class_aware() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let grid = PriorGrid::new(4, 4, 8.0);
    let p = random_preds(&mut rng, grid);
    let known = [random_box(&mut rng, 32.0)];
    let deoe = variant_assign(VariantMode::Deoe, &p, &known, None, &cfg(0)).unwrap();
    let ca = variant_assign(VariantMode::Ca, &p, &known, None, &cfg(0)).unwrap();
    assert_eq!(deoe, ca);
}

#[test]
fn variant_names_round_trip() {
    for v in VariantMode::ALL {
        assert_eq!(v.as_str().parse::<VariantMode>().unwrap(), v);
        assert_eq!(v.to_string(), v.as_str());
    }
    assert_eq!("CA_P".parse::<VariantMode>().unwrap(), VariantMode::CaP);
    assert!("yolo".parse::<VariantMode>().is_err());
}

#[test]
fn screening_config_validation() {
    assert!(cfg(3).validate().is_ok());
    let mut c = cfg(3);
    c.neg_iou = 0.5;
    assert!(c.validate().is_err());
    c.neg_iou = -0.1;
    assert!(c.validate().is_err());
}

#[test]
fn renormalize_degenerate_cases() {
    assert_eq!(renormalize_weights(&[0.0, 0.0], &[0.3, 0.5]), vec![0.3, 0.5]);
    assert_eq!(renormalize_weights(&[1.0, 2.0], &[0.0, 0.0]), vec![0.0, 0.0]);
    assert!(renormalize_weights(&[], &[]).is_empty());
    let w = renormalize_weights(&[1.0, 3.0], &[0.5, 0.5]);
    assert!((w[0] - 1.0).abs() < 1e-15 && (w[1] - 1.0).abs() < 1e-15);
}

proptest! {
    #[test]
    fn renormalized_weighted_sum_equals_plain_sum(
        pairs in prop::collection::vec((0.0f64..10.0, 0.01f64..1.0), 1..40)
    ) {
        let (l, w): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let r = renormalize_weights(&l, &w);
        let lhs: f64 = l.iter().zip(&r).map(|(a, b)| a * b).sum();
        let rhs: f64 = l.iter().sum();
        prop_assert!((lhs - rhs).abs() <= 1e-9 * rhs.max(1.0));
        let k = r[0] / w[0];
        for (a, b) in r.iter().zip(&w) {
            prop_assert!((a / b - k).abs() <= 1e-9 * k.max(1.0));
        }
    }

    #[test]
    fn potentials_are_negatives_and_sorted(seed in 0u64..500, n in 0usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = PriorGrid::new(5, 5, 8.0);
        let p = random_preds(&mut rng, grid);
        let gts: Vec<BBox> = (0..2).map(|_| random_box(&mut rng, 40.0)).collect();
        let asg = assign(&grid, &gts, &cfg(n));
        let set = screen_potentials(&p, &asg, n).unwrap();
        prop_assert_eq!(set.len(), n.min(asg.negatives().len()));
        prop_assert!(set.scores.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(set.cells.iter().all(|&c| asg.status[c] == CellStatus::Negative));
        prop_assert!(set.weights.iter().all(|&w| (0.0..=1.0).contains(&w)));
    }
}
