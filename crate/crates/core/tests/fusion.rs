use std::collections::HashSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sft_core::fusion::{
    rearrange_downscale, rearrange_upscale, sinusoidal_pe, CrossScaleFusion, FeatureMap, PatchEmbed, Stage,
};
use sft_core::numerics::{Graph, ParamStore, Tape, Tensor};

fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
    FeatureMap::new(Tensor::from_fn(&[c, h, w], |_| rng.gen_range(-1.0..1.0))).unwrap()
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = a.dims2().unwrap();
    let (_, n) = b.dims2().unwrap();
    Tensor::from_fn(&[m, n], |ix| (0..k).map(|p| a.at2(ix[0], p) * b.at2(p, ix[1])).sum())
}

#[test]
fn upscale_round_trip_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_map(&mut rng, 8, 3, 5);
    let up = rearrange_upscale(&x).unwrap();
    assert_eq!((up.channels, up.height, up.width), (2, 6, 10));
    assert_eq!(rearrange_downscale(&up).unwrap(), x);
}

#[test]
fn upscale_follows_documented_ordering() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_map(&mut rng, 12, 2, 3);
    let up = rearrange_upscale(&x).unwrap();
    for c in 0..3 {
        for oy in 0..4 {
            for ox in 0..6 {
                let src = x.at(4 * c + 2 * (oy % 2) + ox % 2, oy / 2, ox / 2);
                assert_eq!(up.at(c, oy, ox), src);
            }
        }
    }
}

fn desk_and_paper_shapes(c: usize, d: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let csf = CrossScaleFusion::new(&mut store, &mut rng, c, d);
    let fine = random_map(&mut rng, 2 * c, 4, 6);
    let coarse = random_map(&mut rng, 4 * c, 2, 3);
    let seq = csf.fuse_maps(&store, &fine, &coarse).unwrap();
    assert_eq!(seq.tokens.shape(), &[24, d]);
    assert_eq!((seq.grid_h, seq.grid_w), (4, 6));
}

#[test]
fn csf_width_paper_config() {
    desk_and_paper_shapes(96, 256);
}

#[test]
fn csf_width_desk_config() {
    desk_and_paper_shapes(8, 32);
}

#[test]
fn csf_matches_concat_then_matmul_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let (c, d) = (4, 8);
    let csf = CrossScaleFusion::new(&mut store, &mut rng, c, d);
    for layer in &csf.proj.layers {
        let b = Tensor::from_fn(&[layer.d_out], |_| rng.gen_range(-0.5..0.5));
        store.set_value(layer.bias.unwrap(), b).unwrap();
    }
    let fine = random_map(&mut rng, 2 * c, 4, 4);
    let coarse = random_map(&mut rng, 4 * c, 2, 2);
    let got = csf.fuse_maps(&store, &fine, &coarse).unwrap();

    let up = rearrange_upscale(&coarse).unwrap();
    let cat = Tensor::from_fn(&[16, 3 * c], |ix| {
        let (y, x) = (ix[0] / 4, ix[0] % 4);
        if ix[1] < 2 * c {
            fine.at(ix[1], y, x)
        } else {
            up.at(ix[1] - 2 * c, y, x)
        }
    });
    let l0 = &csf.proj.layers[0];
    let l1 = &csf.proj.layers[1];
    let hidden = naive_matmul(&cat, store.value(l0.weight))
        .add_row(store.value(l0.bias.unwrap()))
        .unwrap()
        .map(|v| v.max(0.0));
    let want = naive_matmul(&hidden, store.value(l1.weight)).add_row(store.value(l1.bias.unwrap())).unwrap();
    assert!(got.tokens.max_abs_diff(&want) < 1e-12);
}

#[test]
fn csf_identity_projection_copies_channels() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let (c, d) = (4, 8);
    let csf = CrossScaleFusion::new(&mut store, &mut rng, c, d);
    let select = Tensor::from_fn(&[3 * c, d], |ix| if ix[0] == ix[1] { 1.0 } else { 0.0 });
    store.set_value(csf.proj.layers[0].weight, select).unwrap();
    store.set_value(csf.proj.layers[1].weight, Tensor::identity(d)).unwrap();
    // non-negative inputs pass the relu unchanged
    let fine = FeatureMap::new(Tensor::from_fn(&[2 * c, 2, 2], |_| rng.gen_range(0.0..1.0))).unwrap();
    let coarse = FeatureMap::new(Tensor::from_fn(&[4 * c, 1, 1], |_| rng.gen_range(0.0..1.0))).unwrap();
    let seq = csf.fuse_maps(&store, &fine, &coarse).unwrap();
    for s in 0..4 {
        for ch in 0..d {
            assert_eq!(seq.tokens.at2(s, ch), fine.at(ch, s / 2, s % 2));
        }
    }
}

#[test]
fn patch_embed_token_counts_for_paper_crops() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let embed = PatchEmbed::new(&mut store, &mut rng, 2);
    let tape = Tape::new();
    let g = Graph::eval(&tape, &store);
    let t = embed.tokens(&g, &Tensor::full(&[3, 128, 128], 0.5), Stage::Fine).unwrap();
    let s = embed.tokens(&g, &Tensor::full(&[3, 256, 256], 0.5), Stage::Fine).unwrap();
    assert_eq!(t.dims2().unwrap().0, 256);
    assert_eq!(s.dims2().unwrap().0, 1024);
}

#[test]
fn position_codes_distinct_up_to_64x64() {
    let pe = sinusoidal_pe(64, 64, 32).unwrap();
    let rows: HashSet<Vec<u64>> = (0..64 * 64).map(|s| pe.row(s).iter().map(|v| v.to_bits()).collect()).collect();
    assert_eq!(rows.len(), 64 * 64);
    // bitwise distinctness can hide near-duplicates; require a real gap too
    let mut min_gap = f64::INFINITY;
    for a in 0..64 * 64 {
        for b in a + 1..64 * 64 {
            let d: f64 = pe.row(a).iter().zip(pe.row(b)).map(|(x, y)| (x - y).powi(2)).sum();
            min_gap = min_gap.min(d);
        }
    }
    assert!(min_gap > 1e-6, "closest pair squared distance {min_gap}");
}

#[test]
fn position_codes_deterministic_and_on_unit_circle() {
    let a = sinusoidal_pe(5, 7, 16).unwrap();
    assert_eq!(a, sinusoidal_pe(5, 7, 16).unwrap());
    for s in 0..35 {
        for pair in a.row(s).chunks(2) {
            assert!((pair[0] * pair[0] + pair[1] * pair[1] - 1.0).abs() < 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn upscale_inverse_identity(seed in any::<u64>(), c in 1usize..5, h in 1usize..5, w in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_map(&mut rng, 4 * c, h, w);
        prop_assert_eq!(rearrange_downscale(&rearrange_upscale(&x).unwrap()).unwrap(), x);
    }

    #[test]
    fn csf_output_shape_independent_of_c(c in 1usize..12, gh in 1usize..4, gw in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(c as u64);
        let mut store = ParamStore::new();
        let csf = CrossScaleFusion::new(&mut store, &mut rng, c, 12);
        let fine = random_map(&mut rng, 2 * c, 2 * gh, 2 * gw);
        let coarse = random_map(&mut rng, 4 * c, gh, gw);
        let seq = csf.fuse_maps(&store, &fine, &coarse).unwrap();
        prop_assert_eq!(seq.tokens.shape(), &[4 * gh * gw, 12]);
    }
}
