//! Straight-line reference implementations over plain `Vec<Vec<f64>>`.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sft_core::numerics::{Linear, Mlp, ParamStore, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

pub fn to_mat(t: &Tensor) -> Mat {
    let (r, _) = t.dims2().unwrap();
    (0..r).map(|i| t.row(i).to_vec()).collect()
}

pub fn to_tensor(m: &Mat) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = b[0].len();
    a.iter()
        .map(|row| (0..n).map(|j| row.iter().zip(b).map(|(x, brow)| x * brow[j]).sum()).collect())
        .collect()
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn cols(a: &Mat, lo: usize, hi: usize) -> Mat {
    a.iter().map(|r| r[lo..hi].to_vec()).collect()
}

pub fn hcat(parts: &[Mat]) -> Mat {
    (0..parts[0].len())
        .map(|i| parts.iter().flat_map(|p| p[i].iter().copied()).collect())
        .collect()
}

pub fn softmax(a: &Mat) -> Mat {
    a.iter()
        .map(|r| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        })
        .collect()
}

pub fn layer_norm(a: &Mat, gain: &[f64], shift: &[f64]) -> Mat {
    a.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-5).sqrt();
            r.iter().enumerate().map(|(j, v)| (v - mean) * inv * gain[j] + shift[j]).collect()
        })
        .collect()
}

pub fn linear(store: &ParamStore, l: &Linear, x: &Mat) -> Mat {
    let w = to_mat(store.value(l.weight));
    let y = matmul(x, &w);
    match l.bias {
        Some(id) => {
            let b = store.value(id).data();
            y.into_iter().map(|r| r.iter().zip(b).map(|(v, c)| v + c).collect()).collect()
        }
        None => y,
    }
}

pub fn relu(a: &Mat) -> Mat {
    a.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect()
}

pub fn mlp_relu(store: &ParamStore, m: &Mlp, x: &Mat) -> Mat {
    let mut h = x.clone();
    for (i, l) in m.layers.iter().enumerate() {
        h = linear(store, l, &h);
        if i + 1 < m.layers.len() {
            h = relu(&h);
        }
    }
    h
}

pub fn max_diff(a: &Mat, b: &Tensor) -> f64 {
    let mut m: f64 = 0.0;
    for (i, r) in a.iter().enumerate() {
        for (j, v) in r.iter().enumerate() {
            m = m.max((v - b.at2(i, j)).abs());
        }
    }
    m
}

/// Randomizes every parameter (including biases and norms) with `±scale`.
pub fn perturb_all(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let cur = store.value(id).clone();
        let noise = random_tensor(rng, cur.shape(), scale);
        let next = cur.add(&noise).unwrap();
        store.set_value(id, next).unwrap();
    }
}
