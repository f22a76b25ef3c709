mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use sft_core::head_loss::{
    bce_loss, bce_with_logits, ciou_loss, ellipse_labels, iou_loss_rows, rectangle_labels, total_loss, BBox, BceMode,
    HeadOutput, LabelMap, LossOptions, RegressionIou, TrackingHeads,
};
use sft_core::numerics::{gradient_check_with, GradCheckConfig, Graph, ParamId, ParamStore, Stencil, Tape, Tensor};
use std::f64::consts::PI;

/// Independent scalar CIoU.
fn ciou_oracle(p: &BBox, g: &BBox) -> f64 {
    let (px1, py1, px2, py2) = (p.cx - p.w / 2.0, p.cy - p.h / 2.0, p.cx + p.w / 2.0, p.cy + p.h / 2.0);
    let (gx1, gy1, gx2, gy2) = (g.cx - g.w / 2.0, g.cy - g.h / 2.0, g.cx + g.w / 2.0, g.cy + g.h / 2.0);
    let iw = (px2.min(gx2) - px1.max(gx1)).max(0.0);
    let ih = (py2.min(gy2) - py1.max(gy1)).max(0.0);
    let inter = iw * ih;
    let iou = inter / (p.w * p.h + g.w * g.h - inter);
    let cw = px2.max(gx2) - px1.min(gx1);
    let ch = py2.max(gy2) - py1.min(gy1);
    let rho2 = (p.cx - g.cx).powi(2) + (p.cy - g.cy).powi(2);
    let v = 4.0 / (PI * PI) * ((g.w / g.h).atan() - (p.w / p.h).atan()).powi(2);
    let alpha = if v == 0.0 { 0.0 } else { v / (1.0 - iou + v) };
    1.0 - iou + rho2 / (cw * cw + ch * ch) + alpha * v
}

fn random_box(r: &mut impl Rng) -> BBox {
    BBox::new(r.gen_range(0.1..0.9), r.gen_range(0.1..0.9), r.gen_range(0.02..0.6), r.gen_range(0.02..0.6)).unwrap()
}

fn labels_from(v: Vec<f64>, gh: usize, gw: usize) -> LabelMap {
    LabelMap { values: Tensor::new(vec![v.len()], v).unwrap(), grid_h: gh, grid_w: gw }
}

#[test]
fn zero_weight_heads_score_one_half() {
    let mut r = rng(1);
    let mut store = ParamStore::new();
    let heads = TrackingHeads::new(&mut store, &mut r, 8);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let z = Tensor::zeros(store.value(id).shape());
        store.set_value(id, z).unwrap();
    }
    let tape = Tape::new();
    let g = Graph::eval(&tape, &store);
    let out = heads.forward(&g, g.input(random_tensor(&mut r, &[12, 8], 1.0))).unwrap();
    assert_eq!(out.scores.shape(), vec![12, 1]);
    assert_eq!(out.boxes.shape(), vec![12, 4]);
    assert!(out.scores.value().data().iter().all(|&s| s == 0.5));
}

#[test]
fn random_heads_stay_in_unit_interval() {
    let mut r = rng(2);
    let mut store = ParamStore::new();
    let heads = TrackingHeads::new(&mut store, &mut r, 8);
    let tape = Tape::new();
    let g = Graph::eval(&tape, &store);
    let out = heads.forward(&g, g.input(random_tensor(&mut r, &[20, 8], 2.0))).unwrap();
    assert!(out.scores.value().data().iter().chain(out.boxes.value().data()).all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn ellipse_labels_match_inequality_oracle() {
    let mut r = rng(3);
    for _ in 0..100 {
        let gt = random_box(&mut r);
        let labels = ellipse_labels(&gt, 16, 16);
        for i in 0..16 {
            for j in 0..16 {
                let x = (j as f64 + 0.5) / 16.0;
                let y = (i as f64 + 0.5) / 16.0;
                let lhs = (x - gt.cx).powi(2) / (gt.w / 2.0).powi(2) + (y - gt.cy).powi(2) / (gt.h / 2.0).powi(2);
                let want = if lhs <= 1.0 { 1.0 } else { 0.0 };
                assert_eq!(labels.values.data()[i * 16 + j], want);
            }
        }
    }
}

#[test]
fn ellipse_center_and_corner_points() {
    // center on grid point (1, 2) of a 4×4 grid; the corner lands on (2, 3)
    let gt = BBox::new(0.625, 0.375, 0.5, 0.5).unwrap();
    let l = ellipse_labels(&gt, 4, 4);
    assert_eq!(l.values.data()[4 + 2], 1.0);
    assert_eq!(l.values.data()[2 * 4 + 3], 0.0);
}

#[test]
fn bce_matches_scalar_loop() {
    let mut r = rng(4);
    for mode in [BceMode::PositiveOnly, BceMode::Full] {
        let s: Vec<f64> = (0..30).map(|_| r.gen_range(0.01..0.99)).collect();
        let y: Vec<f64> = (0..30).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
        let labels = labels_from(y.clone(), 5, 6);
        let tape = Tape::new();
        let got = bce_loss(tape.leaf(Tensor::new(vec![30, 1], s.clone()).unwrap()), &labels, mode)
            .unwrap()
            .item()
            .unwrap();
        let mut sum = 0.0;
        for i in 0..30 {
            sum -= y[i] * s[i].ln();
            if mode == BceMode::Full {
                sum -= (1.0 - y[i]) * (1.0 - s[i]).ln();
            }
        }
        let npos = y.iter().sum::<f64>();
        assert!((got - sum / npos).abs() < 1e-12, "{mode:?}");
    }
}

#[test]
fn ciou_examples() {
    let wide = BBox::new(0.5, 0.5, 0.4, 0.2).unwrap();
    let tall = BBox::new(0.5, 0.5, 0.2, 0.4).unwrap();
    assert!((ciou_loss(&wide, &tall).unwrap() - ciou_oracle(&wide, &tall)).abs() < 1e-12);
    let a = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
    let b = BBox::new(10.0, 0.0, 1.0, 1.0).unwrap();
    let l = ciou_loss(&a, &b).unwrap();
    assert!(l > 1.0);
    assert!((l - ciou_oracle(&a, &b)).abs() < 1e-12);
    assert_eq!(ciou_loss(&wide, &wide).unwrap(), 0.0);
}

#[test]
fn ciou_matches_oracle_on_thousand_pairs() {
    let mut r = rng(5);
    for _ in 0..1000 {
        let (p, g) = (random_box(&mut r), random_box(&mut r));
        let got = ciou_loss(&p, &g).unwrap();
        assert!((got - ciou_oracle(&p, &g)).abs() < 1e-10, "{p:?} {g:?}");
    }
}

#[test]
fn giou_variant_is_available() {
    let p = BBox::new(0.3, 0.3, 0.2, 0.2).unwrap();
    let g = BBox::new(0.6, 0.3, 0.2, 0.2).unwrap();
    let tape = Tape::new();
    let pv = tape.leaf(Tensor::new(vec![1, 4], p.to_array().to_vec()).unwrap());
    let gv = tape.leaf(Tensor::new(vec![1, 4], g.to_array().to_vec()).unwrap());
    let giou = iou_loss_rows(pv, gv, RegressionIou::Giou).unwrap().item().unwrap();
    // disjoint: IoU 0, enclosing 0.5×0.2, union 0.08
    assert!((giou - (1.0 + (0.1 - 0.08) / 0.1)).abs() < 1e-12);
}

fn head_output<'t>(tape: &'t Tape, logits: &Tensor, boxes: &Tensor) -> HeadOutput<'t> {
    let l = tape.leaf(logits.clone());
    HeadOutput { logits: l, scores: l.sigmoid(), boxes: tape.leaf(boxes.clone()) }
}

#[test]
fn perfect_prediction_has_zero_loss() {
    let gt = BBox::new(0.5, 0.5, 0.5, 0.5).unwrap();
    let labels = ellipse_labels(&gt, 4, 4);
    let logits = labels.values.map(|y| if y == 1.0 { 800.0 } else { -800.0 }).reshape(&[16, 1]).unwrap();
    let boxes = Tensor::from_fn(&[16, 4], |ix| gt.to_array()[ix[1]]);
    let tape = Tape::new();
    let out = head_output(&tape, &logits, &boxes);
    let loss = total_loss(&out, &labels, &gt, &LossOptions::default()).unwrap();
    assert_eq!(loss.total.item().unwrap(), 0.0);
}

#[test]
fn total_loss_recomposes_from_component_oracles() {
    let mut r = rng(6);
    for _ in 0..20 {
        let gt = random_box(&mut r);
        let labels = ellipse_labels(&gt, 8, 8);
        if labels.positive_count() == 0 {
            continue;
        }
        let logits = random_tensor(&mut r, &[64, 1], 3.0);
        let boxes = Tensor::from_fn(&[64, 4], |_| r.gen_range(0.05..0.95));
        let tape = Tape::new();
        let out = head_output(&tape, &logits, &boxes);
        let opts = LossOptions::default();
        let total = total_loss(&out, &labels, &gt, &opts).unwrap().total.item().unwrap();

        let pos = labels.positives();
        let np = pos.len() as f64;
        let row_box = |i: usize| {
            let b = boxes.row(i);
            BBox::new(b[0], b[1], b[2], b[3]).unwrap()
        };
        let ciou = pos.iter().map(|&i| ciou_oracle(&row_box(i), &gt)).sum::<f64>() / np;
        let l1 = pos
            .iter()
            .map(|&i| boxes.row(i).iter().zip(gt.to_array()).map(|(a, b)| (a - b).abs()).sum::<f64>())
            .sum::<f64>()
            / np;
        let bce = (0..64)
            .map(|i| {
                let p = 1.0 / (1.0 + (-logits.data()[i]).exp());
                let y = labels.values.data()[i];
                -y * p.ln() - (1.0 - y) * (1.0 - p).ln()
            })
            .sum::<f64>()
            / np;
        assert_eq!((opts.weights.ciou, opts.weights.l1, opts.weights.bce), (5.0, 2.0, 10.0));
        let want = 5.0 * ciou + 2.0 * l1 + 10.0 * bce;
        assert!((total - want).abs() < 1e-12 * want.max(1.0), "{total} vs {want}");
    }
}

#[test]
fn heads_and_loss_gradient_check() {
    let mut r = rng(7);
    let mut store = ParamStore::new();
    let heads = TrackingHeads::new(&mut store, &mut r, 6);
    perturb_all(&mut store, &mut r, 0.2);
    let x = random_tensor(&mut r, &[16, 6], 1.0);
    let gt = BBox::new(0.45, 0.55, 0.5, 0.4).unwrap();
    let labels = ellipse_labels(&gt, 4, 4);
    let ids: Vec<ParamId> = store.ids().collect();
    let config = GradCheckConfig { step: 1e-3, stencil: Stencil::Central4, kink_retries: 3 };
    let report = gradient_check_with(&mut store, &ids, config, |tape, s| {
        let g = Graph::eval(tape, s);
        let out = heads.forward(&g, g.input(x.clone()))?;
        Ok(total_loss(&out, &labels, &gt, &LossOptions::default())?.total)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn logits_and_probabilities_agree() {
    let mut r = rng(8);
    let z = random_tensor(&mut r, &[10, 1], 4.0);
    let labels = labels_from((0..10).map(|i| (i % 3 == 0) as u8 as f64).collect(), 2, 5);
    let tape = Tape::new();
    let a = bce_with_logits(tape.leaf(z.clone()), &labels, BceMode::Full).unwrap().item().unwrap();
    let b = bce_loss(tape.leaf(z).sigmoid(), &labels, BceMode::Full).unwrap().item().unwrap();
    assert!((a - b).abs() < 1e-12);
}

proptest! {
    #[test]
    fn ellipse_positives_subset_of_rectangle(cx in 0.0f64..1.0, cy in 0.0f64..1.0, w in 0.01f64..1.0, h in 0.01f64..1.0, gh in 1usize..20, gw in 1usize..20) {
        let gt = BBox::new(cx, cy, w, h).unwrap();
        let e = ellipse_labels(&gt, gh, gw);
        let rect = rectangle_labels(&gt, gh, gw);
        for (a, b) in e.values.data().iter().zip(rect.values.data()) {
            prop_assert!(*a <= *b);
        }
    }

    #[test]
    fn ciou_at_least_one_minus_iou(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (p, g) = (random_box(&mut r), random_box(&mut r));
        prop_assert!(ciou_loss(&p, &g).unwrap() >= 1.0 - p.iou(&g) - 1e-15);
    }

    #[test]
    fn l1_translation_equivariant(coords in prop::collection::vec(1i32..1000, 8), off in (-4096i32..4096, -4096i32..4096)) {
        // dyadic values keep every subtraction exact
        let d = |v: i32| v as f64 / 1024.0;
        let p = BBox::new(d(coords[0]), d(coords[1]), d(coords[2]), d(coords[3])).unwrap();
        let g = BBox::new(d(coords[4]), d(coords[5]), d(coords[6]), d(coords[7])).unwrap();
        let (ox, oy) = (d(off.0), d(off.1));
        let shift = |b: &BBox| BBox { cx: b.cx + ox, cy: b.cy + oy, ..*b };
        let l1 = |a: &BBox, b: &BBox| {
            let labels = labels_from(vec![1.0], 1, 1);
            let tape = Tape::new();
            let out = head_output(&tape, &Tensor::new(vec![1, 1], vec![0.0]).unwrap(), &Tensor::new(vec![1, 4], a.to_array().to_vec()).unwrap());
            total_loss(&out, &labels, b, &LossOptions::default()).unwrap().l1.item().unwrap()
        };
        prop_assert_eq!(l1(&p, &g), l1(&shift(&p), &shift(&g)));
    }
}
