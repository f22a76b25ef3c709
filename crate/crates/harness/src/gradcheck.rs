//! Finite-difference check of the former, the heads and the full loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sft_core::fusion::sinusoidal_pe;
use sft_core::gpha::{GphaOptions, SfFormer};
use sft_core::head_loss::{ellipse_labels, total_loss, BBox, LossOptions, TrackingHeads};
use sft_core::numerics::{gradient_check_with, GradCheckConfig, GradCheckReport, Graph, ParamId, ParamStore, Stencil, Tensor};

use crate::Result;

pub const GRID: (usize, usize) = (4, 4);
pub const WIDTH: usize = 8;
pub const HEADS: usize = 2;
pub const LAYERS: usize = 2;

/// Two-layer former with Gaussian prior, heads and the weighted loss, on
/// random tokens. Every parameter (including `β` and the Gaussian branches)
/// is perturbed away from its initialization and then checked with a
/// fourth-order central difference of step `step`.
pub fn check_former_and_loss(seed: u64, step: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let former = SfFormer::new(&mut store, &mut rng, LAYERS, WIDTH, HEADS, GphaOptions::default())?;
    let heads = TrackingHeads::new(&mut store, &mut rng, WIDTH);
    let ids: Vec<ParamId> = store.ids().collect();
    for &id in &ids {
        let v = store.value(id);
        let noisy = Tensor::from_fn(v.shape(), |_| rng.gen_range(-0.2..0.2)).add(v)?;
        store.set_value(id, noisy)?;
    }
    let s = GRID.0 * GRID.1;
    let x = Tensor::from_fn(&[s, WIDTH], |_| rng.gen_range(-1.0..1.0));
    let pos = sinusoidal_pe(GRID.0, GRID.1, WIDTH)?;
    let gt = BBox::new(
        rng.gen_range(0.35..0.65),
        rng.gen_range(0.35..0.65),
        rng.gen_range(0.4..0.7),
        rng.gen_range(0.4..0.7),
    )?;
    let labels = ellipse_labels(&gt, GRID.0, GRID.1);
    let opts = LossOptions::default();
    let config = GradCheckConfig { step, stencil: Stencil::Central4, kink_retries: 3 };
    Ok(gradient_check_with(&mut store, &ids, config, |tape, s| {
        let g = Graph::eval(tape, s);
        let seq = former.forward(&g, g.input(x.clone()), GRID, Some(g.input(pos.clone())), None, None)?;
        let out = heads.forward(&g, seq)?;
        Ok(total_loss(&out, &labels, &gt, &opts)?.total)
    })?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn passes_on_a_fixed_seed() {
        let r = check_former_and_loss(3, 1e-3).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        assert!(r.coordinates > 1000);
    }
}
