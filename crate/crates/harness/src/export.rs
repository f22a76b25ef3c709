//! Attention and Gaussian-prior dumps for one template/search pair.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sft_core::gaussian_prior::write_pgm;
use sft_core::gpha::GphaTrace;
use sft_core::model::SfTransT;
use sft_core::numerics::{ParamStore, Tensor};
use sft_core::tracker::{crop_resize, local_search_region, template_region};

use crate::synth::SynthSequence;
use crate::{HarnessError, Result};

/// Runs the model on frame 0 (template) and frame 1 (local search around the
/// frame-0 box) and returns the recorded per-layer traces.
pub fn trace_pair(model: &SfTransT, store: &ParamStore, seq: &SynthSequence) -> Result<Vec<GphaTrace>> {
    let cfg = &model.config;
    let b = seq.gt_boxes[0];
    let template = crop_resize(&seq.frames[0], &template_region(&b), cfg.template_size, cfg.template_size)?;
    let search = crop_resize(&seq.frames[1], &local_search_region(&b), cfg.search_size, cfg.search_size)?;
    let cached = model.encode_template(store, &template)?;
    let mut traces = Vec::new();
    model.predict(store, &cached, &search, Some(&mut traces))?;
    Ok(traces)
}

fn matrix_csv(m: &Tensor) -> Result<String> {
    let (rows, _) = m.dims2()?;
    let mut s = String::new();
    for i in 0..rows {
        let line: Vec<String> = m.row(i).iter().map(f64::to_string).collect();
        let _ = writeln!(s, "{}", line.join(","));
    }
    Ok(s)
}

/// Query-averaged attention over the key grid, scaled so the maximum is 1.
pub fn mean_attention_map(weights: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
    let mean = weights.mean_rows()?;
    let peak = mean.data().iter().cloned().fold(0.0, f64::max);
    let scaled = if peak > 0.0 { mean.scale(1.0 / peak) } else { mean };
    Ok(scaled.reshape(&[grid.0, grid.1])?)
}

fn write(path: PathBuf, bytes: &[u8]) -> Result<PathBuf> {
    std::fs::write(&path, bytes).map_err(|e| HarnessError::io(&path, e))?;
    Ok(path)
}

/// Writes, per layer `l` and head `n`: `attn_l{l}_h{n}.csv` (emphasized
/// weights, one query per line), `attn_l{l}_h{n}.pgm` (query-averaged map)
/// and, when the prior is active, `gauss_l{l}_h{n}.pgm`. Returns the paths in
/// write order.
pub fn export_attention(traces: &[GphaTrace], key_grid: (usize, usize), out: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for t in traces {
        for (n, w) in t.emphasized.iter().enumerate() {
            let stem = format!("l{}_h{n}", t.layer);
            written.push(write(out.join(format!("attn_{stem}.csv")), matrix_csv(w)?.as_bytes())?);
            let mut pgm = Vec::new();
            write_pgm(&mut pgm, &mean_attention_map(w, key_grid)?)?;
            written.push(write(out.join(format!("attn_{stem}.pgm")), &pgm)?);
            if let Some(g) = &t.gaussian {
                let mut pgm = Vec::new();
                write_pgm(&mut pgm, &g.map(n, key_grid.0, key_grid.1)?)?;
                written.push(write(out.join(format!("gauss_{stem}.pgm")), &pgm)?);
            }
        }
    }
    Ok(written)
}
