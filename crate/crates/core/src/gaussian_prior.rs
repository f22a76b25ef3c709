//! Gaussian generation network (GGN) and Gaussian maps.
//!
//! Grid coordinates are patch centers normalized to `[0, 1]`: column `j` of a
//! `grid_w`-wide grid sits at `(j + 0.5) / grid_w`. Each head gets its own
//! center `(x_c, y_c)` and deviations `(σ_w, σ_h)`; the map is
//! `G = exp(-α((x-x_c)²/2σ_w² + (y-y_c)²/2σ_h²))`.

use std::io::Write;

use log::warn;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Activation, Graph, Mlp, ParamStore, Tensor, Var};

/// Lower bound added to every predicted deviation.
pub const SIGMA_FLOOR: f64 = 1e-3;

/// Evaluated per-head Gaussian parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub centers: Vec<(f64, f64)>,
    pub sigmas: Vec<(f64, f64)>,
    pub alpha: f64,
}

impl GaussianParams {
    /// From `[1×2N]` center and sigma tensors laid out as `(x, y)` pairs.
    pub fn from_tensors(centers: &Tensor, sigmas: &Tensor, alpha: f64) -> Self {
        let pairs = |t: &Tensor| t.data().chunks(2).map(|p| (p[0], p[1])).collect();
        Self { centers: pairs(centers), sigmas: pairs(sigmas), alpha }
    }

    pub fn heads(&self) -> usize {
        self.centers.len()
    }

    pub fn map(&self, head: usize, grid_h: usize, grid_w: usize) -> Result<Tensor> {
        let (xc, yc) = self.centers[head];
        let (sw, sh) = self.sigmas[head];
        gaussian_map(xc, yc, sw, sh, self.alpha, grid_h, grid_w)
    }
}

/// The three GGN branches for one attention layer. The center branch exists
/// only on the first layer, the center-bias branch only on later layers.
#[derive(Clone, Debug)]
pub struct GgnHeads {
    pub heads: usize,
    /// `MLP_1`: base centers, squashed by a sigmoid.
    pub center: Option<Mlp>,
    /// `MLP_2`: unbounded center offsets.
    pub bias: Option<Mlp>,
    /// `MLP_3`: deviations, made positive by softplus plus [`SIGMA_FLOOR`].
    pub sigma: Mlp,
}

impl GgnHeads {
    /// Branches for attention layer `layer`; each is `D → D → 2N` with ReLU.
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d_model: usize, heads: usize, layer: usize) -> Self {
        let widths = [d_model, d_model, 2 * heads];
        let mut mlp = |branch: &str| Mlp::new(store, rng, &format!("{name}.{branch}"), &widths, Activation::Relu);
        let center = (layer == 0).then(|| mlp("center"));
        let bias = (layer > 0).then(|| mlp("center_bias"));
        let sigma = mlp("sigma");
        Self { heads, center, bias, sigma }
    }
}

/// Base centers `sigmoid(MLP_1(mean token))`, `[1×2N]` in `(0,1)`.
pub fn ggn_base_center<'t>(g: &Graph<'t, '_>, search_feat: Var<'t>, ggn: &GgnHeads) -> Result<Var<'t>> {
    let mlp = ggn
        .center
        .as_ref()
        .ok_or_else(|| Error::Contract("center branch only exists on the first layer".into()))?;
    Ok(mlp.forward(g, search_feat.mean_rows()?)?.sigmoid())
}

/// Center biases (`None` on layer 0, where the bias is zero) and deviations
/// `softplus(MLP_3(mean token)) + 1e-3`, both `[1×2N]`.
pub fn ggn_bias_and_sigma<'t>(
    g: &Graph<'t, '_>,
    search_feat: Var<'t>,
    ggn: &GgnHeads,
    layer: usize,
) -> Result<(Option<Var<'t>>, Var<'t>)> {
    let pooled = search_feat.mean_rows()?;
    let bias = match (&ggn.bias, layer) {
        (_, 0) => None,
        (Some(mlp), _) => Some(mlp.forward(g, pooled)?),
        (None, _) => {
            return Err(Error::Contract(format!("layer {layer} GGN has no center-bias branch")));
        }
    };
    let sigma = ggn.sigma.forward(g, pooled)?.softplus().offset(SIGMA_FLOOR);
    Ok((bias, sigma))
}

/// Evaluates one head's Gaussian over a `grid_h × grid_w` patch grid.
pub fn gaussian_map(xc: f64, yc: f64, sigma_w: f64, sigma_h: f64, alpha: f64, grid_h: usize, grid_w: usize) -> Result<Tensor> {
    if sigma_w <= 0.0 || sigma_h <= 0.0 {
        return Err(Error::Domain(format!("sigmas must be positive, got ({sigma_w}, {sigma_h})")));
    }
    if alpha <= 0.0 {
        return Err(Error::Domain(format!("alpha must be positive, got {alpha}")));
    }
    Ok(Tensor::from_fn(&[grid_h, grid_w], |ix| {
        let y = (ix[0] as f64 + 0.5) / grid_h as f64;
        let x = (ix[1] as f64 + 0.5) / grid_w as f64;
        let q = (x - xc).powi(2) / (2.0 * sigma_w * sigma_w) + (y - yc).powi(2) / (2.0 * sigma_h * sigma_h);
        (-alpha * q).exp()
    }))
}

/// Flattened `log G` as a `[1×S]` row to add to every query's logits.
pub fn log_gaussian_bias(map: &Tensor) -> Result<Tensor> {
    if let Some(v) = map.data().iter().find(|&&v| v <= 0.0) {
        return Err(Error::Domain(format!("log of non-positive map value {v}")));
    }
    Ok(map.map(f64::ln).reshape(&[1, map.numel()])?)
}

/// Binary 8-bit graymap (`P5`) with values scaled by 255.
pub fn write_pgm(w: &mut impl Write, map: &Tensor) -> Result<()> {
    let (h, wd) = map.dims2()?;
    write!(w, "P5\n{wd} {h}\n255\n")?;
    let mut clipped = 0usize;
    let bytes: Vec<u8> = map
        .data()
        .iter()
        .map(|&v| {
            if !(0.0..=1.0).contains(&v) {
                clipped += 1;
            }
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect();
    if clipped > 0 {
        warn!("{clipped} map values outside [0, 1] clipped in graymap export");
    }
    w.write_all(&bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_params(store: &mut ParamStore) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let shape = store.value(id).shape().to_vec();
            store.set_value(id, Tensor::zeros(&shape)).unwrap();
        }
    }

    #[test]
    fn zero_network_gives_centered_defaults() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let first = GgnHeads::new(&mut store, &mut rng, "g0", 8, 3, 0);
        let later = GgnHeads::new(&mut store, &mut rng, "g1", 8, 3, 1);
        zero_params(&mut store);
        let tape = Tape::new();
        let g = Graph::eval(&tape, &store);
        let feat = g.input(Tensor::zeros(&[4, 8]));
        let c = ggn_base_center(&g, feat, &first).unwrap();
        assert!(c.value().data().iter().all(|&v| v == 0.5));
        let (b, s) = ggn_bias_and_sigma(&g, feat, &later, 1).unwrap();
        assert!(b.unwrap().value().data().iter().all(|&v| v == 0.0));
        let expect = 2f64.ln() + 1e-3;
        assert!(s.value().data().iter().all(|&v| (v - expect).abs() < 1e-15));
        let (b0, _) = ggn_bias_and_sigma(&g, feat, &first, 0).unwrap();
        assert!(b0.is_none());
        assert!(ggn_base_center(&g, feat, &later).is_err());
    }

    #[test]
    fn sigmas_stay_above_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let ggn = GgnHeads::new(&mut store, &mut rng, "g", 8, 2, 0);
        let tape = Tape::new();
        let g = Graph::eval(&tape, &store);
        let feat = g.input(Tensor::from_fn(&[6, 8], |_| rng.gen_range(-50.0..50.0)));
        let (_, s) = ggn_bias_and_sigma(&g, feat, &ggn, 0).unwrap();
        assert!(s.value().data().iter().all(|&v| v > SIGMA_FLOOR));
    }

    #[test]
    fn map_values() {
        let m = gaussian_map(0.5, 0.5, 0.2, 0.3, 1.0, 1, 1).unwrap();
        assert_eq!(m.data(), &[1.0]);
        // grid 4 wide: column 3 center at 0.875 = 0.625 + 0.25
        let m = gaussian_map(0.625, 0.5, 0.25, 0.1, 1.0, 1, 4).unwrap();
        assert!((m.at2(0, 3) - (-0.5f64).exp()).abs() < 1e-15);
        assert!(gaussian_map(0.5, 0.5, 0.0, 0.1, 1.0, 2, 2).is_err());
        assert!(gaussian_map(0.5, 0.5, 0.1, 0.1, -1.0, 2, 2).is_err());
    }

    #[test]
    fn log_bias_is_nonpositive_and_zero_at_peak() {
        let m = gaussian_map(0.5, 0.5, 0.2, 0.2, 2.0, 5, 5).unwrap();
        let lb = log_gaussian_bias(&m).unwrap();
        assert_eq!(lb.shape(), &[1, 25]);
        assert_eq!(lb.data()[12], 0.0);
        assert!(lb.data().iter().all(|&v| v <= 0.0));
        assert!(log_gaussian_bias(&Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn pgm_header_and_size() {
        let m = gaussian_map(0.5, 0.5, 0.2, 0.2, 1.0, 3, 4).unwrap();
        let mut buf = Vec::new();
        write_pgm(&mut buf, &m).unwrap();
        assert!(buf.starts_with(b"P5\n4 3\n255\n"));
        assert_eq!(buf.len(), 11 + 12);
    }
}
