//! Layer-by-layer frequency content of token sequences passed through
//! stacked attention blocks without residual paths.
//!
//! The DC ratio of `X ∈ ℝ^{S×D}` is `r = S·‖x̄‖² / ‖X‖²_F`, the share of
//! energy carried by the mean token; `1 − r` is the high-frequency share.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sft_core::gaussian_prior::ggn_base_center;
use sft_core::gpha::{gpha_block, AttnInputs, GphaBlock, GphaOptions};
use sft_core::numerics::{Graph, ParamStore, Tape, Tensor};

use crate::config::SpectrumConfig;
use crate::{derive_seed, streams, HarnessError, Result};

pub const CSV_HEADER: &str = "layer,config,dc_ratio,hf_share";

/// One attention configuration of the sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumVariant {
    pub name: String,
    pub beta: f64,
    /// Gaussian scale when the prior is enabled.
    pub alpha: Option<f64>,
}

impl SpectrumVariant {
    pub fn vanilla() -> Self {
        Self { name: "vanilla".into(), beta: 0.0, alpha: None }
    }

    pub fn beta(beta: f64) -> Self {
        Self { name: format!("gpha_beta={beta}"), beta, alpha: None }
    }

    pub fn prior(alpha: f64) -> Self {
        Self { name: format!("gpha_prior_alpha={alpha}"), beta: 0.0, alpha: Some(alpha) }
    }
}

/// Vanilla first, then one variant per `β`, then one per prior `α`.
pub fn variants(cfg: &SpectrumConfig) -> Vec<SpectrumVariant> {
    let mut v = vec![SpectrumVariant::vanilla()];
    v.extend(cfg.betas.iter().map(|&b| SpectrumVariant::beta(b)));
    v.extend(cfg.alphas.iter().map(|&a| SpectrumVariant::prior(a)));
    v
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumRow {
    /// 0 is the input sequence.
    pub layer: usize,
    pub config: String,
    pub dc_ratio: f64,
    pub hf_share: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumReport {
    pub rows: Vec<SpectrumRow>,
    pub seeds: usize,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
}

impl SpectrumReport {
    pub fn csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.layer, r.config, r.dc_ratio, r.hf_share);
        }
        s
    }

    /// Mean HF share per layer (input first) for the named configuration.
    pub fn hf_curve(&self, config: &str) -> Vec<f64> {
        self.rows.iter().filter(|r| r.config == config).map(|r| r.hf_share).collect()
    }
}

pub fn dc_ratio(x: &Tensor) -> Result<f64> {
    Ok(split(x)?.dc_ratio)
}

/// DC ratio and HF share of one token matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Split {
    /// `S‖mean‖² / ‖X‖²`
    pub dc_ratio: f64,
    /// `‖X − 1·mean‖² / ‖X‖²`, equal to `1 − dc_ratio` but without the
    /// cancellation when the DC ratio is close to 1.
    pub hf_share: f64,
}

pub fn split(x: &Tensor) -> Result<Split> {
    let (s, d) = x.dims2()?;
    let energy: f64 = x.data().iter().map(|v| v * v).sum();
    if energy == 0.0 {
        return Ok(Split { dc_ratio: 1.0, hf_share: 0.0 });
    }
    let mean = x.mean_rows()?;
    let m = mean.data();
    let dc: f64 = m.iter().map(|v| v * v).sum::<f64>() * s as f64;
    let hf: f64 = x.data().chunks(d).flat_map(|row| row.iter().zip(m).map(|(v, c)| (v - c) * (v - c))).sum();
    Ok(Split { dc_ratio: (dc / energy).clamp(0.0, 1.0), hf_share: (hf / energy).clamp(0.0, 1.0) })
}

/// Most nearly square `h × w = n` grid.
pub fn grid_for(n: usize) -> (usize, usize) {
    let mut h = (n as f64).sqrt() as usize;
    while h > 1 && n % h != 0 {
        h -= 1;
    }
    (h.max(1), n / h.max(1))
}

/// Spectral split after each layer (input first) for every variant, one seed.
pub fn run_seed(cfg: &SpectrumConfig, variants: &[SpectrumVariant], seed: u64) -> Result<Vec<Vec<Split>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let options = GphaOptions { alpha: 1.0, gaussian_prior: false, residual: false };
    let blocks = (0..cfg.layers)
        .map(|l| GphaBlock::new(&mut store, &mut rng, &format!("spec{l}"), cfg.d_model, cfg.heads, l, options))
        .collect::<sft_core::Result<Vec<_>>>()?;
    let x0 = Tensor::from_fn(&[cfg.tokens, cfg.d_model], |_| rng.gen_range(-1.0..1.0));
    let grid = grid_for(cfg.tokens);

    let mut out = Vec::with_capacity(variants.len());
    for v in variants {
        let mut blocks = blocks.clone();
        for b in &mut blocks {
            b.options.gaussian_prior = v.alpha.is_some();
            b.options.alpha = v.alpha.unwrap_or(1.0);
            store.set_value(b.beta, Tensor::full(&[cfg.heads], v.beta))?;
        }
        let tape = Tape::new();
        let g = Graph::eval(&tape, &store);
        let mut x = g.input(x0.clone());
        let base = match v.alpha {
            Some(_) => Some(ggn_base_center(&g, x, &blocks[0].ggn)?),
            None => None,
        };
        let mut ratios = vec![split(&x0)?];
        for b in &blocks {
            x = gpha_block(&g, AttnInputs::self_attention(x, grid, None), b, base, None)?;
            ratios.push(split(&x.value())?);
        }
        out.push(ratios);
    }
    Ok(out)
}

/// Runs every seed (in parallel) and averages per layer in seed order.
pub fn spectrum_experiment(cfg: &SpectrumConfig, base_seed: u64) -> Result<SpectrumReport> {
    if cfg.seeds == 0 || cfg.layers == 0 || cfg.tokens == 0 {
        return Err(HarnessError::Config("spectrum needs seeds, layers and tokens".into()));
    }
    let variants = variants(cfg);
    let per_seed: Vec<Vec<Vec<Split>>> = (0..cfg.seeds)
        .into_par_iter()
        .map(|s| run_seed(cfg, &variants, derive_seed(base_seed, streams::SPECTRUM, s as u64)))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for layer in 0..=cfg.layers {
        for (k, v) in variants.iter().enumerate() {
            let (mut dc, mut hf) = (0.0, 0.0);
            for seed in &per_seed {
                dc += seed[k][layer].dc_ratio;
                hf += seed[k][layer].hf_share;
            }
            let n = cfg.seeds as f64;
            rows.push(SpectrumRow { layer, config: v.name.clone(), dc_ratio: dc / n, hf_share: hf / n });
        }
    }
    Ok(SpectrumReport { rows, seeds: cfg.seeds, betas: cfg.betas.clone(), alphas: cfg.alphas.clone() })
}
