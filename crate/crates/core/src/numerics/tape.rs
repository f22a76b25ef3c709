//! Reverse-mode differentiation over a linear operation tape.
//!
//! Every forward operation appends a node holding its output value and the
//! indices of its inputs. [`Tape::backward`] walks the nodes in reverse and
//! accumulates adjoints; parameter leaves flush their adjoint into the
//! [`ParamStore`]. A tape records one forward pass and is then discarded.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::tensor::{matmul_at_into, matmul_bt_into};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{dim_err, Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Pointwise nonlinearities with known derivatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Gelu,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Abs,
    Square,
    Atan,
    Sqrt,
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Unary {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::Gelu => 0.5 * x * (1.0 + (GELU_K * (x + 0.044715 * x * x * x)).tanh()),
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Abs => x.abs(),
            Unary::Square => x * x,
            Unary::Atan => x.atan(),
            Unary::Sqrt => x.sqrt(),
        }
    }

    /// Derivative at input `x` with output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Gelu => {
                let u = GELU_K * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let du = GELU_K * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Softplus => sigmoid(x),
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Abs => x.signum() * (x != 0.0) as u8 as f64,
            Unary::Square => 2.0 * x,
            Unary::Atan => 1.0 / (1.0 + x * x),
            Unary::Sqrt => 0.5 / y,
        }
    }

    fn check_domain(self, t: &Tensor) -> Result<()> {
        let bad = match self {
            Unary::Log => t.data().iter().position(|&v| v <= 0.0),
            Unary::Sqrt => t.data().iter().position(|&v| v < 0.0),
            _ => None,
        };
        match bad {
            Some(i) => Err(Error::Domain(format!(
                "{self:?} of {} at entry {i}",
                t.data()[i]
            ))),
            None => Ok(()),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Min(usize, usize),
    Max(usize, usize),
    AddRow(usize, usize),
    MulScalar(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Unary(usize, Unary),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        shift: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum(usize),
    MeanRows(usize),
    SliceCols { src: usize, start: usize },
    SliceRows { src: usize, start: usize },
    ConcatCols(Vec<usize>),
    Gather { src: usize, index: Rc<[usize]> },
    Reshape(usize),
    LogGaussian {
        centers: usize,
        sigmas: usize,
        grid_h: usize,
        grid_w: usize,
        alpha: f64,
    },
    HfEmphasis { w: usize, beta: usize, head: usize },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

/// Records one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    backward_done: Cell<bool>,
}

/// A node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.idx, self.value())
    }
}

/// Adjoints of every node after [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads[v.idx].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Which side of its kink every entry of every non-smooth op (relu,
    /// abs, min, max) fell on. Two evaluations with equal patterns lie in the
    /// same smooth piece of the recorded function.
    pub fn kink_pattern(&self) -> Vec<i8> {
        let nodes = self.nodes.borrow();
        let side = |a: f64, b: f64| (a > b) as i8 - (a < b) as i8;
        let mut out = Vec::new();
        for node in nodes.iter() {
            match node.op {
                Op::Unary(x, Unary::Relu | Unary::Abs) => {
                    out.extend(nodes[x].value.data().iter().map(|&v| side(v, 0.0)));
                }
                Op::Min(a, b) | Op::Max(a, b) => {
                    let (va, vb) = (nodes[a].value.data(), nodes[b].value.data());
                    out.extend(va.iter().zip(vb).map(|(&p, &q)| side(p, q)));
                }
                _ => {}
            }
        }
        out
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op });
        Var { tape: self, idx: nodes.len() - 1 }
    }

    fn value_of(&self, idx: usize) -> Rc<Tensor> {
        self.nodes.borrow()[idx].value.clone()
    }

    /// Input or constant; receives an adjoint but writes nowhere.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value)
    }

    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    /// Multi-head log-Gaussian bias over a `grid_h × grid_w` grid of patch
    /// centers `((j+0.5)/grid_w, (i+0.5)/grid_h)`.
    ///
    /// `centers` and `sigmas` are `[1×2N]` with `(x, y)` / `(σ_w, σ_h)` pairs per
    /// head; the result is `[N × grid_h·grid_w]` with entry
    /// `-α((x-x_c)²/2σ_w² + (y-y_c)²/2σ_h²)`.
    pub fn log_gaussian<'t>(
        &'t self,
        centers: Var<'t>,
        sigmas: Var<'t>,
        grid_h: usize,
        grid_w: usize,
        alpha: f64,
    ) -> Result<Var<'t>> {
        let c = centers.value();
        let s = sigmas.value();
        if c.numel() != s.numel() || c.numel() % 2 != 0 {
            return dim_err(format!(
                "gaussian centers {:?} vs sigmas {:?}",
                c.shape(),
                s.shape()
            ));
        }
        if alpha <= 0.0 {
            return Err(Error::Domain(format!("alpha must be positive, got {alpha}")));
        }
        if let Some(v) = s.data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain(format!("sigma must be positive, got {v}")));
        }
        let heads = c.numel() / 2;
        let n = grid_h * grid_w;
        let mut out = vec![0.0; heads * n];
        for h in 0..heads {
            let (xc, yc) = (c.data()[2 * h], c.data()[2 * h + 1]);
            let (sw, sh) = (s.data()[2 * h], s.data()[2 * h + 1]);
            for i in 0..grid_h {
                let py = (i as f64 + 0.5) / grid_h as f64;
                for j in 0..grid_w {
                    let px = (j as f64 + 0.5) / grid_w as f64;
                    let q = (px - xc).powi(2) / (2.0 * sw * sw) + (py - yc).powi(2) / (2.0 * sh * sh);
                    out[h * n + i * grid_w + j] = -alpha * q;
                }
            }
        }
        Ok(self.push(
            Tensor::from_raw(vec![heads, n], out),
            Op::LogGaussian {
                centers: centers.idx,
                sigmas: sigmas.idx,
                grid_h,
                grid_w,
                alpha,
            },
        ))
    }

    /// Reverse pass from a scalar `loss`. Parameter adjoints are added to
    /// `store` gradients.
    pub fn backward(&self, loss: Var<'_>, store: &mut ParamStore) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss belongs to another tape".into()));
        }
        if self.backward_done.replace(true) {
            return Err(Error::Contract("tape already differentiated".into()));
        }
        let nodes = self.nodes.borrow();
        let root = nodes[loss.idx].value.clone();
        if root.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.idx] = Some(vec![1.0]);

        for idx in (0..=loss.idx).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            let val = |i: usize| -> &Tensor { &nodes[i].value };
            backprop(&node.op, &node.value, &g, &val, &mut grads, store)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads: grads
                .into_iter()
                .zip(nodes.iter())
                .map(|(g, n)| g.map(|g| Tensor::from_raw(n.value.shape().to_vec(), g)))
                .collect(),
        })
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], idx: usize, len: usize) -> &mut Vec<f64> {
    grads[idx].get_or_insert_with(|| vec![0.0; len])
}

fn acc_add(grads: &mut [Option<Vec<f64>>], idx: usize, g: &[f64]) {
    let slot = acc(grads, idx, g.len());
    for (s, v) in slot.iter_mut().zip(g) {
        *s += v;
    }
}

fn backprop<'a>(
    op: &Op,
    out: &Tensor,
    g: &[f64],
    val: &dyn Fn(usize) -> &'a Tensor,
    grads: &mut [Option<Vec<f64>>],
    store: &mut ParamStore,
) -> Result<()> {
    match op {
        Op::Leaf => {}
        Op::Param(id) => store.accumulate(*id, g),
        Op::MatMul(a, b) => {
            let (m, k) = val(*a).dims2()?;
            let (_, n) = val(*b).dims2()?;
            let bv = val(*b).data();
            let av = val(*a).data();
            matmul_bt_into(g, bv, acc(grads, *a, m * k), m, n, k);
            matmul_at_into(av, g, acc(grads, *b, k * n), m, k, n);
        }
        Op::Transpose(a) => {
            let (m, n) = val(*a).dims2()?;
            let slot = acc(grads, *a, m * n);
            for i in 0..m {
                for j in 0..n {
                    slot[i * n + j] += g[j * m + i];
                }
            }
        }
        Op::Add(a, b) => {
            acc_add(grads, *a, g);
            acc_add(grads, *b, g);
        }
        Op::Sub(a, b) => {
            acc_add(grads, *a, g);
            let slot = acc(grads, *b, g.len());
            slot.iter_mut().zip(g).for_each(|(s, v)| *s -= v);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let ga: Vec<f64> = g.iter().zip(bv).map(|(g, b)| g * b).collect();
            let gb: Vec<f64> = g.iter().zip(av).map(|(g, a)| g * a).collect();
            acc_add(grads, *a, &ga);
            acc_add(grads, *b, &gb);
        }
        Op::Div(a, b) => {
            let bv = val(*b).data();
            let ov = out.data();
            let ga: Vec<f64> = g.iter().zip(bv).map(|(g, b)| g / b).collect();
            let gb: Vec<f64> = g
                .iter()
                .zip(bv.iter().zip(ov))
                .map(|(g, (b, o))| -g * o / b)
                .collect();
            acc_add(grads, *a, &ga);
            acc_add(grads, *b, &gb);
        }
        Op::Min(a, b) | Op::Max(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let pick_a: Vec<bool> = match op {
                Op::Min(..) => av.iter().zip(bv).map(|(x, y)| x <= y).collect(),
                _ => av.iter().zip(bv).map(|(x, y)| x >= y).collect(),
            };
            let ga: Vec<f64> = g.iter().zip(&pick_a).map(|(g, &p)| if p { *g } else { 0.0 }).collect();
            let gb: Vec<f64> = g.iter().zip(&pick_a).map(|(g, &p)| if p { 0.0 } else { *g }).collect();
            acc_add(grads, *a, &ga);
            acc_add(grads, *b, &gb);
        }
        Op::AddRow(a, row) => {
            acc_add(grads, *a, g);
            let n = val(*row).numel();
            let slot = acc(grads, *row, n);
            for r in g.chunks(n) {
                slot.iter_mut().zip(r).for_each(|(s, v)| *s += v);
            }
        }
        Op::MulScalar(a, s) => {
            let sv = val(*s).data()[0];
            let av = val(*a).data();
            let ga: Vec<f64> = g.iter().map(|g| g * sv).collect();
            acc_add(grads, *a, &ga);
            let gs: f64 = g.iter().zip(av).map(|(g, a)| g * a).sum();
            acc(grads, *s, 1)[0] += gs;
        }
        Op::Scale(a, s) => {
            let ga: Vec<f64> = g.iter().map(|g| g * s).collect();
            acc_add(grads, *a, &ga);
        }
        Op::Offset(a) => acc_add(grads, *a, g),
        Op::Unary(a, f) => {
            let xv = val(*a).data();
            let ga: Vec<f64> = g
                .iter()
                .zip(xv.iter().zip(out.data()))
                .map(|(g, (&x, &y))| g * f.derivative(x, y))
                .collect();
            acc_add(grads, *a, &ga);
        }
        Op::Softmax(a) => {
            let (_, n) = out.dims2()?;
            let y = out.data();
            let mut ga = vec![0.0; y.len()];
            for ((gr, yr), dr) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                for ((d, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                    *d = y * (g - dot);
                }
            }
            acc_add(grads, *a, &ga);
        }
        Op::LayerNorm { x, gain, shift, xhat, inv_std } => {
            let (_, d) = out.dims2()?;
            let gv = val(*gain).data();
            let mut dgain = vec![0.0; d];
            let mut dshift = vec![0.0; d];
            let mut dx = vec![0.0; g.len()];
            let df = d as f64;
            for (r, ((gr, xr), dr)) in g
                .chunks(d)
                .zip(xhat.chunks(d))
                .zip(dx.chunks_mut(d))
                .enumerate()
            {
                let mut sum_dxh = 0.0;
                let mut sum_dxh_xh = 0.0;
                for j in 0..d {
                    dgain[j] += gr[j] * xr[j];
                    dshift[j] += gr[j];
                    let dxh = gr[j] * gv[j];
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xr[j];
                }
                for j in 0..d {
                    let dxh = gr[j] * gv[j];
                    dr[j] = inv_std[r] / df * (df * dxh - sum_dxh - xr[j] * sum_dxh_xh);
                }
            }
            acc_add(grads, *x, &dx);
            acc_add(grads, *gain, &dgain);
            acc_add(grads, *shift, &dshift);
        }
        Op::Sum(a) => {
            let n = val(*a).numel();
            let slot = acc(grads, *a, n);
            slot.iter_mut().for_each(|s| *s += g[0]);
        }
        Op::MeanRows(a) => {
            let (m, n) = val(*a).dims2()?;
            let slot = acc(grads, *a, m * n);
            for r in slot.chunks_mut(n) {
                for (s, v) in r.iter_mut().zip(g) {
                    *s += v / m as f64;
                }
            }
        }
        Op::SliceCols { src, start } => {
            let (m, n) = val(*src).dims2()?;
            let w = g.len() / m;
            let slot = acc(grads, *src, m * n);
            for i in 0..m {
                for j in 0..w {
                    slot[i * n + start + j] += g[i * w + j];
                }
            }
        }
        Op::SliceRows { src, start } => {
            let (m, n) = val(*src).dims2()?;
            let slot = acc(grads, *src, m * n);
            for (s, v) in slot[start * n..].iter_mut().zip(g) {
                *s += v;
            }
        }
        Op::ConcatCols(parts) => {
            let (m, total) = out.dims2()?;
            let mut offset = 0;
            for &p in parts {
                let (_, w) = val(p).dims2()?;
                let slot = acc(grads, p, m * w);
                for i in 0..m {
                    for j in 0..w {
                        slot[i * w + j] += g[i * total + offset + j];
                    }
                }
                offset += w;
            }
        }
        Op::Gather { src, index } => {
            let n = val(*src).numel();
            let slot = acc(grads, *src, n);
            for (&i, v) in index.iter().zip(g) {
                slot[i] += v;
            }
        }
        Op::Reshape(a) => acc_add(grads, *a, g),
        Op::LogGaussian { centers, sigmas, grid_h, grid_w, alpha } => {
            let c = val(*centers).data();
            let s = val(*sigmas).data();
            let heads = c.len() / 2;
            let n = grid_h * grid_w;
            let mut dc = vec![0.0; c.len()];
            let mut ds = vec![0.0; s.len()];
            for h in 0..heads {
                let (xc, yc) = (c[2 * h], c[2 * h + 1]);
                let (sw, sh) = (s[2 * h], s[2 * h + 1]);
                for i in 0..*grid_h {
                    let py = (i as f64 + 0.5) / *grid_h as f64;
                    for j in 0..*grid_w {
                        let px = (j as f64 + 0.5) / *grid_w as f64;
                        let gv = g[h * n + i * grid_w + j];
                        let (dx, dy) = (px - xc, py - yc);
                        dc[2 * h] += gv * alpha * dx / (sw * sw);
                        dc[2 * h + 1] += gv * alpha * dy / (sh * sh);
                        ds[2 * h] += gv * alpha * dx * dx / (sw * sw * sw);
                        ds[2 * h + 1] += gv * alpha * dy * dy / (sh * sh * sh);
                    }
                }
            }
            acc_add(grads, *centers, &dc);
            acc_add(grads, *sigmas, &ds);
        }
        Op::HfEmphasis { w, beta, head } => {
            let wv = val(*w).data();
            let (_, sk) = val(*w).dims2()?;
            let b = val(*beta).data()[*head];
            let ga: Vec<f64> = g.iter().map(|g| g * (1.0 + b)).collect();
            acc_add(grads, *w, &ga);
            let dc = 1.0 / sk as f64;
            let gb: f64 = g.iter().zip(wv).map(|(g, w)| g * (w - dc)).sum();
            let nb = val(*beta).numel();
            acc(grads, *beta, nb)[*head] += gb;
        }
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.idx)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        self.value().dims2()
    }

    /// Scalar value; errors if this node is not a single value.
    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Contract("operands recorded on different tapes".into()))
        }
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, op)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let v = self.value().matmul(&other.value())?;
        Ok(self.push(v, Op::MatMul(self.idx, other.idx)))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let v = self.value().transpose()?;
        Ok(self.push(v, Op::Transpose(self.idx)))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let v = self.value().add(&other.value())?;
        Ok(self.push(v, Op::Add(self.idx, other.idx)))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let v = self.value().sub(&other.value())?;
        Ok(self.push(v, Op::Sub(self.idx, other.idx)))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let v = self.value().zip_map(&other.value(), |a, b| a * b)?;
        Ok(self.push(v, Op::Mul(self.idx, other.idx)))
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let ov = other.value();
        if ov.data().iter().any(|&v| v == 0.0) {
            return Err(Error::Domain("division by zero".into()));
        }
        let v = self.value().zip_map(&ov, |a, b| a / b)?;
        Ok(self.push(v, Op::Div(self.idx, other.idx)))
    }

    pub fn minimum(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let v = self.value().zip_map(&other.value(), f64::min)?;
        Ok(self.push(v, Op::Min(self.idx, other.idx)))
    }

    pub fn maximum(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let v = self.value().zip_map(&other.value(), f64::max)?;
        Ok(self.push(v, Op::Max(self.idx, other.idx)))
    }

    /// Broadcasts `row` (n values) over every row of this `[m×n]` matrix.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&row)?;
        let v = self.value().add_row(&row.value())?;
        Ok(self.push(v, Op::AddRow(self.idx, row.idx)))
    }

    /// Multiplies every entry by a single-valued node.
    pub fn mul_scalar(self, s: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&s)?;
        let sv = s.item()?;
        let v = self.value().scale(sv);
        Ok(self.push(v, Op::MulScalar(self.idx, s.idx)))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let v = self.value().scale(s);
        self.push(v, Op::Scale(self.idx, s))
    }

    pub fn offset(self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x + c);
        self.push(v, Op::Offset(self.idx))
    }

    pub fn unary(self, f: Unary) -> Result<Var<'t>> {
        let x = self.value();
        f.check_domain(&x)?;
        Ok(self.push(x.map(|v| f.apply(v)), Op::Unary(self.idx, f)))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Unary::Relu).expect("total function")
    }

    pub fn gelu(self) -> Var<'t> {
        self.unary(Unary::Gelu).expect("total function")
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Unary::Sigmoid).expect("total function")
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(Unary::Softplus).expect("total function")
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Unary::Exp).expect("total function")
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.unary(Unary::Log)
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(Unary::Abs).expect("total function")
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Unary::Square).expect("total function")
    }

    pub fn atan(self) -> Var<'t> {
        self.unary(Unary::Atan).expect("total function")
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        self.unary(Unary::Sqrt)
    }

    pub fn softmax_rows(self) -> Result<Var<'t>> {
        let v = self.value().softmax_rows()?;
        Ok(self.push(v, Op::Softmax(self.idx)))
    }

    /// Per-row normalization to zero mean / unit variance (variance floor
    /// [`LAYER_NORM_EPS`]) followed by `gain ⊙ x̂ + shift`.
    pub fn layer_norm(self, gain: Var<'t>, shift: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&gain)?;
        self.same_tape(&shift)?;
        let x = self.value();
        let (_, d) = x.dims2()?;
        if d < 2 {
            return dim_err("layer norm needs at least two features");
        }
        let (gv, sv) = (gain.value(), shift.value());
        if gv.numel() != d || sv.numel() != d {
            return dim_err(format!(
                "layer norm width {d} with gain {:?} / shift {:?}",
                gv.shape(),
                sv.shape()
            ));
        }
        let mut xhat = Vec::with_capacity(x.numel());
        let mut inv_std = Vec::new();
        let mut out = Vec::with_capacity(x.numel());
        for r in x.data().chunks(d) {
            let mean = r.iter().sum::<f64>() / d as f64;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for (j, v) in r.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * gv.data()[j] + sv.data()[j]);
            }
        }
        Ok(self.push(
            Tensor::from_raw(x.shape().to_vec(), out),
            Op::LayerNorm {
                x: self.idx,
                gain: gain.idx,
                shift: shift.idx,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn sum(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.push(v, Op::Sum(self.idx))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// `[m×n] -> [1×n]` token average.
    pub fn mean_rows(self) -> Result<Var<'t>> {
        let v = self.value().mean_rows()?;
        Ok(self.push(v, Op::MeanRows(self.idx)))
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t>> {
        let v = self.value().slice_cols(start, end)?;
        Ok(self.push(v, Op::SliceCols { src: self.idx, start }))
    }

    pub fn slice_rows(self, start: usize, end: usize) -> Result<Var<'t>> {
        let v = self.value().slice_rows(start, end)?;
        Ok(self.push(v, Op::SliceRows { src: self.idx, start }))
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let Some(first) = parts.first() else {
            return dim_err("concat of nothing");
        };
        for p in parts {
            first.same_tape(p)?;
        }
        let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let v = Tensor::concat_cols(&refs)?;
        Ok(first.push(v, Op::ConcatCols(parts.iter().map(|p| p.idx).collect())))
    }

    /// `out.flat[i] = self.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(self, shape: &[usize], index: Rc<[usize]>) -> Result<Var<'t>> {
        let src = self.value();
        if shape.iter().product::<usize>() != index.len() {
            return dim_err(format!("gather of {} indices into {shape:?}", index.len()));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= src.numel()) {
            return dim_err(format!("gather index {bad} out of {}", src.numel()));
        }
        let data = index.iter().map(|&i| src.data()[i]).collect();
        Ok(self.push(
            Tensor::from_raw(shape.to_vec(), data),
            Op::Gather { src: self.idx, index },
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(self.idx)))
    }

    /// High-frequency emphasis of one head's attention weights:
    /// `(1 + β[head])·w − β[head]/S_k`, i.e. DC kept, HF scaled by `1 + β`.
    pub fn hf_emphasis(self, beta: Var<'t>, head: usize) -> Result<Var<'t>> {
        self.same_tape(&beta)?;
        let w = self.value();
        let (_, sk) = w.dims2()?;
        let bv = beta.value();
        if head >= bv.numel() {
            return dim_err(format!("head {head} of {} β entries", bv.numel()));
        }
        let b = bv.data()[head];
        let dc = 1.0 / sk as f64;
        let v = w.map(|x| dc + (1.0 + b) * (x - dc));
        Ok(self.push(
            v,
            Op::HfEmphasis { w: self.idx, beta: beta.idx, head },
        ))
    }
}
