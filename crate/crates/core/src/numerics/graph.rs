use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{xavier, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// Training-only Bernoulli mask with inverted scaling.
#[derive(Debug)]
pub struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        Self { rate, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn mask(&mut self, shape: &[usize]) -> Tensor {
        let keep = 1.0 - self.rate;
        Tensor::from_fn(shape, |_| {
            if self.rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
    }
}

/// Forward-pass context: the tape being recorded, the parameter values, and
/// whether dropout is active.
pub struct Graph<'t, 'p> {
    pub tape: &'t Tape,
    pub params: &'p ParamStore,
    dropout: Option<RefCell<Dropout>>,
}

impl<'t, 'p> Graph<'t, 'p> {
    /// Evaluation mode: dropout is the identity.
    pub fn eval(tape: &'t Tape, params: &'p ParamStore) -> Self {
        Self { tape, params, dropout: None }
    }

    pub fn training(tape: &'t Tape, params: &'p ParamStore, dropout: Dropout) -> Self {
        Self { tape, params, dropout: Some(RefCell::new(dropout)) }
    }

    pub fn is_training(&self) -> bool {
        self.dropout.is_some()
    }

    pub fn param(&self, id: ParamId) -> Var<'t> {
        self.tape.param(self.params, id)
    }

    pub fn input(&self, t: Tensor) -> Var<'t> {
        self.tape.leaf(t)
    }

    pub fn dropout(&self, x: Var<'t>) -> Result<Var<'t>> {
        match &self.dropout {
            Some(d) if d.borrow().rate > 0.0 => {
                let mask = d.borrow_mut().mask(&x.shape());
                x.mul(self.tape.constant(mask))
            }
            _ => Ok(x),
        }
    }
}

/// Fully connected layer `x·W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d_in: usize, d_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier(rng, d_in, d_out));
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[d_out])));
        Self { weight, bias, d_in, d_out }
    }

    /// `x·W` only. Used for key projections, where a bias shifts every logit
    /// of a query row equally and so never reaches the output.
    pub fn without_bias(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d_in: usize, d_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier(rng, d_in, d_out));
        Self { weight, bias: None, d_in, d_out }
    }

    pub fn forward<'t>(&self, g: &Graph<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(g.param(self.weight))?;
        match self.bias {
            Some(b) => y.add_row(g.param(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Activation::Relu => x.relu(),
            Activation::Gelu => x.gelu(),
        }
    }
}

/// Stack of [`Linear`] layers with an activation between consecutive layers
/// (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `widths = [d_in, h1, ..., d_out]`.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        widths: &[usize],
        activation: Activation,
    ) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Self { layers, activation }
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().map_or(0, |l| l.d_out)
    }

    pub fn forward<'t>(&self, g: &Graph<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h)?;
            if i + 1 < self.layers.len() {
                h = self.activation.apply(h);
            }
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[d], 1.0)),
            shift: store.add(format!("{name}.shift"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward<'t>(&self, g: &Graph<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(g.param(self.gain), g.param(self.shift))
    }
}
