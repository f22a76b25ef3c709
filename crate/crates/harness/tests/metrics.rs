mod common;

use common::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use sft_core::head_loss::BBox;
use sft_harness::metrics::{evaluate, evaluate_sequences};

#[test]
fn perfect_predictions() {
    let mut r = rng(1);
    let gts: Vec<BBox> = (0..40).map(|_| random_pixel_box(&mut r, 64.0)).collect();
    let m = evaluate(&gts, &gts).unwrap();
    assert_eq!((m.sr_auc, m.sr50, m.sr75, m.pr, m.ao), (1.0, 1.0, 1.0, 1.0, 1.0));
}

#[test]
fn disjoint_predictions() {
    let gts: Vec<BBox> = (0..10).map(|i| BBox { cx: 10.0 + i as f64, cy: 10.0, w: 8.0, h: 8.0 }).collect();
    let far: Vec<BBox> = gts.iter().map(|b| BBox { cx: b.cx + 30.0, ..*b }).collect();
    let m = evaluate(&far, &gts).unwrap();
    assert_eq!((m.ao, m.sr50, m.sr75, m.pr), (0.0, 0.0, 0.0, 0.0));
    // only the zero threshold is met
    assert!((m.sr_auc - 1.0 / 21.0).abs() < 1e-15);
}

#[test]
fn random_boxes_match_per_frame_oracles() {
    let mut r = rng(2);
    let res: Vec<BBox> = (0..500).map(|_| random_pixel_box(&mut r, 64.0)).collect();
    let gts: Vec<BBox> = (0..500).map(|_| random_pixel_box(&mut r, 64.0)).collect();
    let m = evaluate(&res, &gts).unwrap();
    let ious: Vec<f64> = res.iter().zip(&gts).map(|(a, b)| iou_oracle(a, b)).collect();
    let ao = ious.iter().sum::<f64>() / 500.0;
    assert!((m.ao - ao).abs() < 1e-12);
    let sr = |t: f64| ious.iter().filter(|&&v| v >= t).count() as f64 / 500.0;
    let auc = (0..=20).map(|k| sr(k as f64 * 0.05)).sum::<f64>() / 21.0;
    assert!((m.sr_auc - auc).abs() < 1e-12);
    assert_eq!(m.sr50, sr(0.5));
    let pr = res
        .iter()
        .zip(&gts)
        .filter(|(a, b)| ((a.cx - b.cx).powi(2) + (a.cy - b.cy).powi(2)).sqrt() < 20.0)
        .count() as f64
        / 500.0;
    assert_eq!(m.pr, pr);
}

#[test]
fn pooled_sequences_equal_concatenation() {
    let mut r = rng(3);
    let mk = |r: &mut _, n| (0..n).map(|_| random_pixel_box(r, 64.0)).collect::<Vec<_>>();
    let (a1, g1, a2, g2) = (mk(&mut r, 7), mk(&mut r, 7), mk(&mut r, 4), mk(&mut r, 4));
    let pooled = evaluate_sequences(&[(a1.clone(), g1.clone()), (a2.clone(), g2.clone())]).unwrap();
    let flat = evaluate(&[a1, a2].concat(), &[g1, g2].concat()).unwrap();
    assert_eq!(pooled, flat);
    assert!(evaluate_sequences(&[(mk(&mut r, 2), mk(&mut r, 3))]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn symmetric_under_joint_permutation(seed in any::<u64>(), n in 1usize..40) {
        let mut r = rng(seed);
        let res: Vec<BBox> = (0..n).map(|_| random_pixel_box(&mut r, 64.0)).collect();
        let gts: Vec<BBox> = (0..n).map(|_| random_pixel_box(&mut r, 64.0)).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut r);
        let pr: Vec<BBox> = order.iter().map(|&i| res[i]).collect();
        let pg: Vec<BBox> = order.iter().map(|&i| gts[i]).collect();
        let (a, b) = (evaluate(&res, &gts).unwrap(), evaluate(&pr, &pg).unwrap());
        prop_assert!((a.ao - b.ao).abs() < 1e-12);
        prop_assert_eq!((a.sr_auc, a.sr50, a.sr75, a.pr), (b.sr_auc, b.sr50, b.sr75, b.pr));
    }

    #[test]
    fn metrics_lie_in_unit_interval(seed in any::<u64>(), n in 1usize..30) {
        let mut r = rng(seed);
        let res: Vec<BBox> = (0..n).map(|_| random_pixel_box(&mut r, 64.0)).collect();
        let gts: Vec<BBox> = (0..n).map(|_| random_pixel_box(&mut r, 64.0)).collect();
        let m = evaluate(&res, &gts).unwrap();
        for v in [m.sr_auc, m.sr50, m.sr75, m.pr, m.ao] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(m.sr75 <= m.sr50);
    }
}
