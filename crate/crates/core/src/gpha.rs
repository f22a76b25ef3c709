//! Gaussian-prior aware high-frequency emphasis attention (GPHA).
//!
//! For head `n`: `W = softmax(Q_n K_nᵀ/√c + log G_n)`. The weights split into
//! a DC part (every entry `1/S_k`) and a high-frequency residual whose rows
//! sum to zero; the residual is scaled by `1 + β_n` and recombined into `Ŵ`,
//! which stays row-stochastic for any `β`. `Ŵ` aggregates the values, heads
//! are concatenated and passed through a three-layer FFN.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::gaussian_prior::{ggn_base_center, ggn_bias_and_sigma, GaussianParams, GgnHeads};
use crate::numerics::{Activation, Graph, LayerNormParams, Linear, Mlp, ParamId, ParamStore, Tensor, Var};

/// Row-sum tolerance accepted by [`decompose_dc_hf`].
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// Row-stochastic attention weights with the scale `1/√d_k` and a per-key
/// log bias broadcast over queries.
pub fn gaussian_biased_softmax(q: &Tensor, k: &Tensor, log_bias: &Tensor) -> Result<Tensor> {
    let (_, dq) = q.dims2()?;
    let (sk, dk) = k.dims2()?;
    if dq != dk {
        return dim_err(format!("query width {dq} vs key width {dk}"));
    }
    if log_bias.numel() != sk {
        return dim_err(format!("log bias of {} entries for {sk} keys", log_bias.numel()));
    }
    q.matmul(&k.transpose()?)?
        .scale(1.0 / (dk as f64).sqrt())
        .add_row(log_bias)?
        .softmax_rows()
}

/// DC / high-frequency split of `[N × S_q × S_k]` attention weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnDecomposition {
    pub w: Tensor,
    pub w_dc: Tensor,
    pub w_hf: Tensor,
    /// Recombined weights; set by [`emphasize`].
    pub w_hat: Option<Tensor>,
}

impl AttnDecomposition {
    pub fn heads(&self) -> usize {
        self.w.shape()[0]
    }
}

fn as_heads(w: &Tensor) -> Result<Tensor> {
    match *w.shape() {
        [_, _, _] => Ok(w.clone()),
        [m, n] => w.reshape(&[1, m, n]),
        ref s => dim_err(format!("attention weights need rank 2 or 3, got {s:?}")),
    }
}

/// Splits row-stochastic weights into `w_dc = 1/S_k` and `w_hf = w - w_dc`.
pub fn decompose_dc_hf(w: &Tensor) -> Result<AttnDecomposition> {
    let w = as_heads(w)?;
    let sk = w.shape()[2];
    for (r, row) in w.data().chunks(sk).enumerate() {
        let dev = (row.iter().sum::<f64>() - 1.0).abs();
        if dev > ROW_SUM_TOLERANCE {
            return Err(Error::Contract(format!("row {r} sums to 1 {dev:+e}")));
        }
    }
    let dc = 1.0 / sk as f64;
    Ok(AttnDecomposition {
        w_dc: Tensor::full(w.shape(), dc),
        w_hf: w.map(|x| x - dc),
        w,
        w_hat: None,
    })
}

/// Scales head `n`'s high-frequency part by `1 + beta[n]` and recombines.
pub fn emphasize(d: &AttnDecomposition, beta: &[f64]) -> Result<AttnDecomposition> {
    let [heads, sq, sk] = *d.w.shape() else {
        return dim_err("decomposition is not rank 3");
    };
    if beta.len() != heads {
        return dim_err(format!("{} β values for {heads} heads", beta.len()));
    }
    let per_head = sq * sk;
    let mut hf = d.w_hf.data().to_vec();
    for (n, chunk) in hf.chunks_mut(per_head).enumerate() {
        chunk.iter_mut().for_each(|v| *v *= 1.0 + beta[n]);
    }
    let w_hf = Tensor::new(d.w.shape().to_vec(), hf)?;
    let w_hat = d.w_dc.add(&w_hf)?;
    Ok(AttnDecomposition {
        w: d.w.clone(),
        w_dc: d.w_dc.clone(),
        w_hf,
        w_hat: Some(w_hat),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GphaOptions {
    /// Gaussian scale `α`.
    pub alpha: f64,
    /// Add `log G` to the logits; off gives plain attention.
    pub gaussian_prior: bool,
    /// Post-norm residual layout (`LN(x + attn)`, `LN(x + FFN)`); off drops
    /// both skip connections, giving `LN(FFN(LN(attn)))`.
    pub residual: bool,
}

impl Default for GphaOptions {
    fn default() -> Self {
        Self { alpha: 1.0, gaussian_prior: true, residual: true }
    }
}

#[derive(Clone, Debug)]
pub struct GphaBlock {
    pub heads: usize,
    pub d_model: usize,
    pub layer: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub ggn: GgnHeads,
    /// Per-head emphasis `β`, zero-initialized.
    pub beta: ParamId,
    pub norm1: LayerNormParams,
    pub ffn: Mlp,
    pub norm2: LayerNormParams,
    pub options: GphaOptions,
}

impl GphaBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d_model: usize,
        heads: usize,
        layer: usize,
        options: GphaOptions,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return dim_err(format!("width {d_model} not divisible by {heads} heads"));
        }
        if options.alpha <= 0.0 {
            return Err(Error::Config(format!("alpha must be positive, got {}", options.alpha)));
        }
        Ok(Self {
            heads,
            d_model,
            layer,
            query: Linear::new(store, rng, &format!("{name}.q"), d_model, d_model),
            key: Linear::without_bias(store, rng, &format!("{name}.k"), d_model, d_model),
            value: Linear::new(store, rng, &format!("{name}.v"), d_model, d_model),
            ggn: GgnHeads::new(store, rng, &format!("{name}.ggn"), d_model, heads, layer),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[heads])),
            norm1: LayerNormParams::new(store, &format!("{name}.norm1"), d_model),
            ffn: Mlp::new(
                store,
                rng,
                &format!("{name}.ffn"),
                &[d_model, 4 * d_model, 4 * d_model, d_model],
                Activation::Relu,
            ),
            norm2: LayerNormParams::new(store, &format!("{name}.norm2"), d_model),
            options,
        })
    }

    pub fn head_width(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Operands of one attention layer. For self-attention `queries` and `keys`
/// are the same node.
#[derive(Clone, Copy, Debug)]
pub struct AttnInputs<'t> {
    pub queries: Var<'t>,
    /// Key/value tokens.
    pub keys: Var<'t>,
    /// Grid the Gaussian is laid over (the key grid).
    pub key_grid: (usize, usize),
    pub query_pos: Option<Var<'t>>,
    pub key_pos: Option<Var<'t>>,
}

impl<'t> AttnInputs<'t> {
    pub fn self_attention(seq: Var<'t>, grid: (usize, usize), pos: Option<Var<'t>>) -> Self {
        Self { queries: seq, keys: seq, key_grid: grid, query_pos: pos, key_pos: pos }
    }
}

/// Values recorded from one GPHA layer.
#[derive(Clone, Debug)]
pub struct GphaTrace {
    pub layer: usize,
    pub gaussian: Option<GaussianParams>,
    /// Per head `[S_q × S_k]` softmax weights.
    pub weights: Vec<Tensor>,
    /// Per head emphasized weights `Ŵ`.
    pub emphasized: Vec<Tensor>,
}

fn with_pos<'t>(x: Var<'t>, pos: Option<Var<'t>>) -> Result<Var<'t>> {
    match pos {
        Some(p) => x.add(p),
        None => Ok(x),
    }
}

/// One GPHA layer. `base_centers` (`[1×2N]`, from the first layer's center
/// branch) is required when the Gaussian prior is on; layers after the first
/// add their own predicted center bias to it.
pub fn gpha_block<'t>(
    g: &Graph<'t, '_>,
    inputs: AttnInputs<'t>,
    block: &GphaBlock,
    base_centers: Option<Var<'t>>,
    trace: Option<&mut Vec<GphaTrace>>,
) -> Result<Var<'t>> {
    let AttnInputs { queries, keys, key_grid: (gh, gw), query_pos, key_pos } = inputs;
    let (_, dq) = queries.dims2()?;
    let (sk, dk) = keys.dims2()?;
    if dq != block.d_model || dk != block.d_model {
        return dim_err(format!("token widths {dq} / {dk} for a block of width {}", block.d_model));
    }
    if sk != gh * gw {
        return dim_err(format!("{sk} key tokens for a {gh}×{gw} grid"));
    }
    let c = block.head_width();
    let q = block.query.forward(g, with_pos(queries, query_pos)?)?;
    let k = block.key.forward(g, with_pos(keys, key_pos)?)?;
    let v = block.value.forward(g, keys)?;

    let mut gaussian = None;
    let log_bias = if block.options.gaussian_prior {
        let base = base_centers
            .ok_or_else(|| Error::Contract("Gaussian prior needs base centers".into()))?;
        let (bias, sigma) = ggn_bias_and_sigma(g, queries, &block.ggn, block.layer)?;
        let centers = match bias {
            Some(b) => base.add(b)?,
            None => base,
        };
        gaussian = Some(GaussianParams::from_tensors(&centers.value(), &sigma.value(), block.options.alpha));
        Some(g.tape.log_gaussian(centers, sigma, gh, gw, block.options.alpha)?)
    } else {
        None
    };

    let beta = g.param(block.beta);
    let scale = 1.0 / (c as f64).sqrt();
    let mut heads = Vec::with_capacity(block.heads);
    let mut weights = Vec::new();
    let mut emphasized = Vec::new();
    for n in 0..block.heads {
        let (lo, hi) = (n * c, (n + 1) * c);
        let mut logits = q.slice_cols(lo, hi)?.matmul(k.slice_cols(lo, hi)?.transpose()?)?.scale(scale);
        if let Some(lb) = log_bias {
            logits = logits.add_row(lb.slice_rows(n, n + 1)?)?;
        }
        let w = logits.softmax_rows()?;
        let w_hat = w.hf_emphasis(beta, n)?;
        if trace.is_some() {
            weights.push(w.value().as_ref().clone());
            emphasized.push(w_hat.value().as_ref().clone());
        }
        heads.push(w_hat.matmul(v.slice_cols(lo, hi)?)?);
    }
    if let Some(t) = trace {
        t.push(GphaTrace { layer: block.layer, gaussian, weights, emphasized });
    }
    let attended = Var::concat_cols(&heads)?;
    if block.options.residual {
        let x = block.norm1.forward(g, queries.add(g.dropout(attended)?)?)?;
        let f = g.dropout(block.ffn.forward(g, x)?)?;
        block.norm2.forward(g, x.add(f)?)
    } else {
        let x = block.norm1.forward(g, attended)?;
        block.norm2.forward(g, block.ffn.forward(g, x)?)
    }
}

/// Where the stacked layers take their keys from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum KeySource {
    /// Self-attention over the running search sequence.
    #[default]
    Search,
    /// Search queries over the (fixed) template tokens.
    Template,
}

/// `L` stacked GPHA layers.
#[derive(Clone, Debug)]
pub struct SfFormer {
    pub blocks: Vec<GphaBlock>,
    pub key_source: KeySource,
}

/// Template tokens for [`KeySource::Template`].
#[derive(Clone, Copy, Debug)]
pub struct TemplateKeys<'t> {
    pub tokens: Var<'t>,
    pub grid: (usize, usize),
    pub pos: Option<Var<'t>>,
}

impl SfFormer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        layers: usize,
        d_model: usize,
        heads: usize,
        options: GphaOptions,
    ) -> Result<Self> {
        if layers < 1 {
            return Err(Error::Config("the former needs at least one layer".into()));
        }
        let blocks = (0..layers)
            .map(|l| GphaBlock::new(store, rng, &format!("gpha{l}"), d_model, heads, l, options))
            .collect::<Result<_>>()?;
        Ok(Self { blocks, key_source: KeySource::Search })
    }

    pub fn beta_ids(&self) -> Vec<ParamId> {
        self.blocks.iter().map(|b| b.beta).collect()
    }

    /// Runs every layer over `search` (grid `grid`), returning the final
    /// sequence. Layer 0 derives base centers from `search` itself.
    pub fn forward<'t>(
        &self,
        g: &Graph<'t, '_>,
        search: Var<'t>,
        grid: (usize, usize),
        pos: Option<Var<'t>>,
        template: Option<TemplateKeys<'t>>,
        mut trace: Option<&mut Vec<GphaTrace>>,
    ) -> Result<Var<'t>> {
        let first = &self.blocks[0];
        let base = if first.options.gaussian_prior {
            Some(ggn_base_center(g, search, &first.ggn)?)
        } else {
            None
        };
        let mut x = search;
        for block in &self.blocks {
            let inputs = match (self.key_source, template) {
                (KeySource::Search, _) => AttnInputs::self_attention(x, grid, pos),
                (KeySource::Template, Some(t)) => AttnInputs {
                    queries: x,
                    keys: t.tokens,
                    key_grid: t.grid,
                    query_pos: pos,
                    key_pos: t.pos,
                },
                (KeySource::Template, None) => {
                    return Err(Error::Contract("template keys requested but not supplied".into()));
                }
            };
            x = gpha_block(g, inputs, block, base, trace.as_deref_mut())?;
        }
        Ok(x)
    }
}
