use proptest::prelude::*;
use sft_harness::synth::{gen_sequence, gen_sequence_sized, Difficulty, SequencePlan, MAX_SIDE, MIN_SIDE};

fn inside(b: &sft_core::head_loss::BBox, n: f64) -> bool {
    let (x1, y1, x2, y2) = b.corners();
    x1 >= 0.0 && y1 >= 0.0 && x2 <= n && y2 <= n
}

#[test]
fn same_seed_is_bit_identical() {
    for d in [Difficulty::Plain, Difficulty::Distractor, Difficulty::Occlusion] {
        assert_eq!(gen_sequence(42, 12, d).unwrap(), gen_sequence(42, 12, d).unwrap());
    }
    assert_ne!(gen_sequence(42, 12, Difficulty::Plain).unwrap(), gen_sequence(43, 12, Difficulty::Plain).unwrap());
}

#[test]
fn lengths_and_shapes() {
    let s = gen_sequence(1, 15, Difficulty::Plain).unwrap();
    assert_eq!((s.frames.len(), s.gt_boxes.len(), s.seed), (15, 15, 1));
    assert!(s.frames.iter().all(|f| f.shape() == [3, 64, 64]));
    assert!(s.distractor_boxes.is_empty() && s.occluded.is_none());
}

#[test]
fn target_pixels_carry_the_texture() {
    let plan = SequencePlan::new(8, 10, Difficulty::Plain, 64).unwrap();
    let first = plan.render(0);
    let b0 = plan.gt_box(0);
    for i in 1..10 {
        let f = plan.render(i);
        let b = plan.gt_box(i);
        for c in 0..3 {
            for dy in 0..plan.side {
                for dx in 0..plan.side {
                    let at = |img: &sft_core::numerics::Tensor, bb: &sft_core::head_loss::BBox| {
                        let (x1, y1, _, _) = bb.corners();
                        img.data()[(c * 64 + y1 as usize + dy) * 64 + x1 as usize + dx]
                    };
                    assert_eq!(at(&f, &b), at(&first, &b0));
                }
            }
        }
    }
}

#[test]
fn distractor_mode_has_exactly_two_squares() {
    let plan = SequencePlan::new(11, 30, Difficulty::Distractor, 64).unwrap();
    let seq = plan.to_sequence();
    assert_eq!(seq.distractor_boxes.len(), 30);
    let mut seen_apart = 0;
    for (i, frame) in seq.frames.iter().enumerate() {
        let (t, d) = (seq.gt_boxes[i], seq.distractor_boxes[i]);
        assert_eq!((t.w, t.h), (d.w, d.h));
        if t.iou(&d) > 0.0 {
            continue;
        }
        seen_apart += 1;
        // both squares show the same texture
        let (tx, ty, _, _) = t.corners();
        let (dx, dy, _, _) = d.corners();
        for c in 0..3 {
            for y in 0..plan.side {
                for x in 0..plan.side {
                    let p = |x0: f64, y0: f64| frame.data()[(c * 64 + y0 as usize + y) * 64 + x0 as usize + x];
                    assert_eq!(p(tx, ty), p(dx, dy));
                }
            }
        }
    }
    assert!(seen_apart > 0);
}

#[test]
fn occlusion_window_is_contiguous_and_interior() {
    let s = gen_sequence(13, 25, Difficulty::Occlusion).unwrap();
    let r = s.occluded.clone().unwrap();
    assert!(r.start >= 1 && r.end <= 25 && r.len() == 5);
    let clean = gen_sequence_sized(13, 25, Difficulty::Plain, 64).unwrap();
    assert_eq!(clean.frames.len(), 25);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gt_boxes_stay_inside_the_frame(seed in any::<u64>(), len in 2usize..60, size in 28usize..96) {
        let plan = SequencePlan::new(seed, len, Difficulty::Distractor, size).unwrap();
        prop_assert!((MIN_SIDE..=MAX_SIDE).contains(&plan.side));
        for i in 0..len {
            prop_assert!(inside(&plan.gt_box(i), size as f64));
            prop_assert!(inside(&plan.distractor_box(i).unwrap(), size as f64));
        }
    }
}
