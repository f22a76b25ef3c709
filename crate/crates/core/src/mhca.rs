//! Multi-head cross-attention between template and search tokens.
//!
//! Per head `n` with width `c = D/N`:
//! `H_n = LN_n(softmax(Q_n K_nᵀ / √c) V_n)`; the heads are concatenated, added
//! to the query tokens and normalized, then passed through a post-norm
//! residual FFN (`D → 4D → D`).

use rand::Rng;

use crate::error::{dim_err, Result};
use crate::fusion::PatchSequence;
use crate::numerics::{Activation, Graph, LayerNormParams, Linear, Mlp, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct MhcaBlock {
    pub heads: usize,
    pub d_model: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub head_norms: Vec<LayerNormParams>,
    pub attn_norm: LayerNormParams,
    pub ffn: Mlp,
    pub ffn_norm: LayerNormParams,
}

/// Intermediate values recorded by [`cross_attention`] for inspection.
#[derive(Clone, Debug, Default)]
pub struct AttnTrace {
    /// Per head `[S_q × S_kv]` attention probabilities.
    pub probs: Vec<Tensor>,
    /// Per head `[S_q × c]` aggregated values before the head norm.
    pub pre_norm_heads: Vec<Tensor>,
}

impl MhcaBlock {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return dim_err(format!("width {d_model} not divisible by {heads} heads"));
        }
        let c = d_model / heads;
        Ok(Self {
            heads,
            d_model,
            query: Linear::new(store, rng, &format!("{name}.q"), d_model, d_model),
            key: Linear::without_bias(store, rng, &format!("{name}.k"), d_model, d_model),
            value: Linear::new(store, rng, &format!("{name}.v"), d_model, d_model),
            head_norms: (0..heads)
                .map(|n| LayerNormParams::new(store, &format!("{name}.head_norm{n}"), c))
                .collect(),
            attn_norm: LayerNormParams::new(store, &format!("{name}.attn_norm"), d_model),
            ffn: Mlp::new(store, rng, &format!("{name}.ffn"), &[d_model, 4 * d_model, d_model], Activation::Relu),
            ffn_norm: LayerNormParams::new(store, &format!("{name}.ffn_norm"), d_model),
        })
    }

    pub fn head_width(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Cross-attention of `q_seq` tokens over `kv_seq` tokens; output has the
/// length of `q_seq`. Position codes must already be added.
pub fn cross_attention<'t>(
    g: &Graph<'t, '_>,
    q_seq: Var<'t>,
    kv_seq: Var<'t>,
    block: &MhcaBlock,
    mut trace: Option<&mut AttnTrace>,
) -> Result<Var<'t>> {
    let (_, dq) = q_seq.dims2()?;
    let (_, dk) = kv_seq.dims2()?;
    if dq != block.d_model || dk != block.d_model {
        return dim_err(format!(
            "token widths {dq} / {dk} for a block of width {}",
            block.d_model
        ));
    }
    let c = block.head_width();
    let q = block.query.forward(g, q_seq)?;
    let k = block.key.forward(g, kv_seq)?;
    let v = block.value.forward(g, kv_seq)?;
    let scale = 1.0 / (c as f64).sqrt();
    let mut heads = Vec::with_capacity(block.heads);
    for n in 0..block.heads {
        let (lo, hi) = (n * c, (n + 1) * c);
        let qn = q.slice_cols(lo, hi)?;
        let kn = k.slice_cols(lo, hi)?;
        let vn = v.slice_cols(lo, hi)?;
        let probs = qn.matmul(kn.transpose()?)?.scale(scale).softmax_rows()?;
        let agg = probs.matmul(vn)?;
        if let Some(t) = trace.as_deref_mut() {
            t.probs.push(probs.value().as_ref().clone());
            t.pre_norm_heads.push(agg.value().as_ref().clone());
        }
        heads.push(block.head_norms[n].forward(g, agg)?);
    }
    let attended = g.dropout(Var::concat_cols(&heads)?)?;
    let x = block.attn_norm.forward(g, q_seq.add(attended)?)?;
    let f = g.dropout(block.ffn.forward(g, x)?)?;
    block.ffn_norm.forward(g, x.add(f)?)
}

/// One bidirectional round: search tokens attend to the template and template
/// tokens attend to the search region, each with its own block. Returns
/// `(search', template')`.
pub fn mhca_bidirectional<'t>(
    g: &Graph<'t, '_>,
    search: Var<'t>,
    template: Var<'t>,
    search_block: &MhcaBlock,
    template_block: &MhcaBlock,
) -> Result<(Var<'t>, Var<'t>)> {
    let s = cross_attention(g, search, template, search_block, None)?;
    let t = cross_attention(g, template, search, template_block, None)?;
    Ok((s, t))
}

/// Non-shared block pair for one MHCA round.
#[derive(Clone, Debug)]
pub struct MhcaRound {
    pub search: MhcaBlock,
    pub template: MhcaBlock,
}

/// Stacked MHCA rounds.
#[derive(Clone, Debug)]
pub struct MhcaStack {
    pub rounds: Vec<MhcaRound>,
}

impl MhcaStack {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, rounds: usize, d_model: usize, heads: usize) -> Result<Self> {
        let rounds = (0..rounds)
            .map(|r| {
                Ok(MhcaRound {
                    search: MhcaBlock::new(store, rng, &format!("mhca{r}.search"), d_model, heads)?,
                    template: MhcaBlock::new(store, rng, &format!("mhca{r}.template"), d_model, heads)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { rounds })
    }

    pub fn forward<'t>(&self, g: &Graph<'t, '_>, search: Var<'t>, template: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let (mut s, mut t) = (search, template);
        for r in &self.rounds {
            (s, t) = mhca_bidirectional(g, s, t, &r.search, &r.template)?;
        }
        Ok((s, t))
    }
}

/// Evaluated [`cross_attention`] over patch sequences.
pub fn cross_attention_seq(
    store: &ParamStore,
    q_seq: &PatchSequence,
    kv_seq: &PatchSequence,
    block: &MhcaBlock,
) -> Result<PatchSequence> {
    let tape = Tape::new();
    let g = Graph::eval(&tape, store);
    let out = cross_attention(&g, g.input(q_seq.tokens.clone()), g.input(kv_seq.tokens.clone()), block, None)?;
    PatchSequence::new(out.value().as_ref().clone(), q_seq.grid_h, q_seq.grid_w)
}
