//! Tracking heads, ellipse labels and the BCE + CIoU + L1 objective.
//!
//! Boxes predicted by the heads are `(cx, cy, w, h)` in normalized search-crop
//! coordinates. Grid point `(i, j)` of an `h×w` label map sits at
//! `((j+0.5)/w, (i+0.5)/h)`.

use std::f64::consts::PI;
use std::rc::Rc;

use log::warn;
use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::numerics::{Activation, Graph, Mlp, ParamStore, Tape, Tensor, Var};

/// Center-format box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn from_corner(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x + w / 2.0, y + h / 2.0, w, h)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::Domain(format!("degenerate box {self:?}")));
        }
        Ok(())
    }

    /// `(x1, y1, x2, y2)`
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        let (x1, y1, x2, y2) = self.corners();
        (x2 - x1) * (y2 - y1)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let (ax1, ay1, ax2, ay2) = self.corners();
        let (bx1, by1, bx2, by2) = other.corners();
        let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
        let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn center_distance(&self, other: &BBox) -> f64 {
        ((self.cx - other.cx).powi(2) + (self.cy - other.cy).powi(2)).sqrt()
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }
}

/// Binary foreground map over the search grid.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    /// `[S]` of 0/1
    pub values: Tensor,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl LabelMap {
    pub fn positives(&self) -> Vec<usize> {
        self.values
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1.0)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn positive_count(&self) -> usize {
        self.values.data().iter().filter(|&&v| v == 1.0).count()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LabelShape {
    #[default]
    Ellipse,
    Rectangle,
}

fn grid_point(i: usize, j: usize, grid_h: usize, grid_w: usize) -> (f64, f64) {
    ((j as f64 + 0.5) / grid_w as f64, (i as f64 + 0.5) / grid_h as f64)
}

/// Grid point is foreground iff it lies in the ellipse inscribed in `gt`.
pub fn ellipse_labels(gt: &BBox, grid_h: usize, grid_w: usize) -> LabelMap {
    let (a, b) = (gt.w / 2.0, gt.h / 2.0);
    let values = Tensor::from_fn(&[grid_h * grid_w], |ix| {
        let (px, py) = grid_point(ix[0] / grid_w, ix[0] % grid_w, grid_h, grid_w);
        let lhs = (px - gt.cx).powi(2) / (a * a) + (py - gt.cy).powi(2) / (b * b);
        if lhs > 1.0 {
            0.0
        } else {
            1.0
        }
    });
    LabelMap { values, grid_h, grid_w }
}

/// Grid point is foreground iff it lies inside `gt`.
pub fn rectangle_labels(gt: &BBox, grid_h: usize, grid_w: usize) -> LabelMap {
    let (x1, y1, x2, y2) = gt.corners();
    let values = Tensor::from_fn(&[grid_h * grid_w], |ix| {
        let (px, py) = grid_point(ix[0] / grid_w, ix[0] % grid_w, grid_h, grid_w);
        if (x1..=x2).contains(&px) && (y1..=y2).contains(&py) {
            1.0
        } else {
            0.0
        }
    });
    LabelMap { values, grid_h, grid_w }
}

pub fn labels(shape: LabelShape, gt: &BBox, grid_h: usize, grid_w: usize) -> LabelMap {
    match shape {
        LabelShape::Ellipse => ellipse_labels(gt, grid_h, grid_w),
        LabelShape::Rectangle => rectangle_labels(gt, grid_h, grid_w),
    }
}

/// Classification and regression heads: three FC layers each.
#[derive(Clone, Debug)]
pub struct TrackingHeads {
    pub cls: Mlp,
    pub reg: Mlp,
}

/// Head outputs for one search sequence.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput<'t> {
    /// `[S×1]` pre-sigmoid scores
    pub logits: Var<'t>,
    /// `[S×1]` foreground probabilities
    pub scores: Var<'t>,
    /// `[S×4]` `(cx, cy, w, h)` in `(0,1)`
    pub boxes: Var<'t>,
}

impl TrackingHeads {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, d_model: usize) -> Self {
        Self {
            cls: Mlp::new(store, rng, "head.cls", &[d_model, d_model, d_model, 1], Activation::Relu),
            reg: Mlp::new(store, rng, "head.reg", &[d_model, d_model, d_model, 4], Activation::Relu),
        }
    }

    pub fn forward<'t>(&self, g: &Graph<'t, '_>, seq: Var<'t>) -> Result<HeadOutput<'t>> {
        let logits = self.cls.forward(g, seq)?;
        Ok(HeadOutput {
            logits,
            scores: logits.sigmoid(),
            boxes: self.reg.forward(g, seq)?.sigmoid(),
        })
    }
}

/// Index, score and box of the highest-scoring token (first on ties).
pub fn select_best(scores: &Tensor, boxes: &Tensor) -> Result<(usize, f64, BBox)> {
    let (s, four) = boxes.dims2()?;
    if four != 4 || scores.numel() != s {
        return dim_err(format!("scores {:?} / boxes {:?}", scores.shape(), boxes.shape()));
    }
    let mut best = 0;
    for (i, &v) in scores.data().iter().enumerate() {
        if v > scores.data()[best] {
            best = i;
        }
    }
    let r = boxes.row(best);
    Ok((best, scores.data()[best], BBox::new(r[0], r[1], r[2], r[3])?))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BceMode {
    /// `Σ −y log p` only.
    PositiveOnly,
    /// `Σ −y log p − (1−y) log(1−p)`.
    #[default]
    Full,
}

fn positive_count_or_warn(labels: &LabelMap) -> Option<f64> {
    match labels.positive_count() {
        0 => {
            warn!("label map has no positives; classification loss is 0");
            None
        }
        n => Some(n as f64),
    }
}

/// Binary cross-entropy on probabilities, divided by the positive count.
pub fn bce_loss<'t>(scores: Var<'t>, labels: &LabelMap, mode: BceMode) -> Result<Var<'t>> {
    let tape = scores.tape();
    if scores.value().numel() != labels.values.numel() {
        return dim_err("scores and labels differ in length");
    }
    let Some(npos) = positive_count_or_warn(labels) else {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    };
    let s = scores.reshape(&[labels.values.numel()])?;
    let y = tape.constant(labels.values.clone());
    let pos = y.mul(s.log()?)?.sum();
    let total = match mode {
        BceMode::PositiveOnly => pos,
        BceMode::Full => {
            let not_y = tape.constant(labels.values.map(|v| 1.0 - v));
            let neg = not_y.mul(s.scale(-1.0).offset(1.0).log()?)?.sum();
            pos.add(neg)?
        }
    };
    Ok(total.scale(-1.0 / npos))
}

/// Same as [`bce_loss`] but from pre-sigmoid logits, using
/// `−log σ(z) = softplus(−z)` and `−log(1−σ(z)) = softplus(z)`.
pub fn bce_with_logits<'t>(logits: Var<'t>, labels: &LabelMap, mode: BceMode) -> Result<Var<'t>> {
    let tape = logits.tape();
    if logits.value().numel() != labels.values.numel() {
        return dim_err("logits and labels differ in length");
    }
    let Some(npos) = positive_count_or_warn(labels) else {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    };
    let z = logits.reshape(&[labels.values.numel()])?;
    let y = tape.constant(labels.values.clone());
    let pos = y.mul(z.scale(-1.0).softplus())?.sum();
    let total = match mode {
        BceMode::PositiveOnly => pos,
        BceMode::Full => {
            let not_y = tape.constant(labels.values.map(|v| 1.0 - v));
            pos.add(not_y.mul(z.softplus())?.sum())?
        }
    };
    Ok(total.scale(1.0 / npos))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RegressionIou {
    #[default]
    Ciou,
    /// Ablation only.
    Giou,
}

struct BoxCols<'t> {
    x1: Var<'t>,
    y1: Var<'t>,
    x2: Var<'t>,
    y2: Var<'t>,
    cx: Var<'t>,
    cy: Var<'t>,
    w: Var<'t>,
    h: Var<'t>,
}

fn box_cols(b: Var<'_>) -> Result<BoxCols<'_>> {
    let cx = b.slice_cols(0, 1)?;
    let cy = b.slice_cols(1, 2)?;
    let w = b.slice_cols(2, 3)?;
    let h = b.slice_cols(3, 4)?;
    let hw = w.scale(0.5);
    let hh = h.scale(0.5);
    Ok(BoxCols {
        x1: cx.sub(hw)?,
        y1: cy.sub(hh)?,
        x2: cx.add(hw)?,
        y2: cy.add(hh)?,
        cx,
        cy,
        w,
        h,
    })
}

fn check_boxes(b: &Tensor) -> Result<usize> {
    let (n, four) = b.dims2()?;
    if four != 4 {
        return dim_err(format!("boxes need 4 columns, got {four}"));
    }
    for r in 0..n {
        let row = b.row(r);
        if row[2] <= 0.0 || row[3] <= 0.0 {
            return Err(Error::Domain(format!("degenerate box {row:?}")));
        }
    }
    Ok(n)
}

/// Per-row IoU-family loss between `[P×4]` boxes, `[P×1]`.
///
/// CIoU: `1 − IoU + ρ²/c² + αv` with `v = 4/π²(atan(w_g/h_g) − atan(w_p/h_p))²`
/// and `α = v/((1 − IoU) + v)`; `α` is differentiated through.
pub fn iou_loss_rows<'t>(pred: Var<'t>, gt: Var<'t>, kind: RegressionIou) -> Result<Var<'t>> {
    let n = check_boxes(&pred.value())?;
    if check_boxes(&gt.value())? != n {
        return dim_err("prediction and ground truth box counts differ");
    }
    let p = box_cols(pred)?;
    let t = box_cols(gt)?;
    let iw = p.x2.minimum(t.x2)?.sub(p.x1.maximum(t.x1)?)?.relu();
    let ih = p.y2.minimum(t.y2)?.sub(p.y1.maximum(t.y1)?)?.relu();
    let inter = iw.mul(ih)?;
    let area_p = p.x2.sub(p.x1)?.mul(p.y2.sub(p.y1)?)?;
    let area_t = t.x2.sub(t.x1)?.mul(t.y2.sub(t.y1)?)?;
    let union = area_p.add(area_t)?.sub(inter)?;
    let iou = inter.div(union)?;
    let one_minus_iou = iou.scale(-1.0).offset(1.0);
    let enc_w = p.x2.maximum(t.x2)?.sub(p.x1.minimum(t.x1)?)?;
    let enc_h = p.y2.maximum(t.y2)?.sub(p.y1.minimum(t.y1)?)?;
    match kind {
        RegressionIou::Giou => {
            let enc = enc_w.mul(enc_h)?;
            one_minus_iou.add(enc.sub(union)?.div(enc)?)
        }
        RegressionIou::Ciou => {
            let c2 = enc_w.square().add(enc_h.square())?;
            let rho2 = p.cx.sub(t.cx)?.square().add(p.cy.sub(t.cy)?.square())?;
            let v = t.w.div(t.h)?.atan().sub(p.w.div(p.h)?.atan())?.square().scale(4.0 / (PI * PI));
            // the tiny offset only matters when IoU = 1 and v = 0, where α·v = 0 anyway
            let alpha = v.div(one_minus_iou.add(v)?.offset(1e-16))?;
            one_minus_iou.add(rho2.div(c2)?)?.add(alpha.mul(v)?)
        }
    }
}

/// Scalar CIoU loss between two boxes.
pub fn ciou_loss(pred: &BBox, gt: &BBox) -> Result<f64> {
    pred.validate()?;
    gt.validate()?;
    let tape = Tape::new();
    let p = tape.leaf(Tensor::new(vec![1, 4], pred.to_array().to_vec())?);
    let t = tape.leaf(Tensor::new(vec![1, 4], gt.to_array().to_vec())?);
    iou_loss_rows(p, t, RegressionIou::Ciou)?.item()
}

/// Trade-off weights `λ1·CIoU + λ2·L1 + λ3·BCE`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub ciou: f64,
    pub l1: f64,
    pub bce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { ciou: 5.0, l1: 2.0, bce: 10.0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossOptions {
    pub weights: LossWeights,
    pub bce: BceMode,
    pub regression: RegressionIou,
}

#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown<'t> {
    pub total: Var<'t>,
    pub iou: Var<'t>,
    pub l1: Var<'t>,
    pub bce: Var<'t>,
}

/// Full objective. Regression terms average over positive-label tokens (the
/// L1 term sums the four coordinate errors per token); BCE uses the logits.
pub fn total_loss<'t>(out: &HeadOutput<'t>, labels: &LabelMap, gt: &BBox, opts: &LossOptions) -> Result<LossBreakdown<'t>> {
    gt.validate()?;
    let tape = out.boxes.tape();
    let bce = bce_with_logits(out.logits, labels, opts.bce)?;
    let pos = labels.positives();
    let (iou, l1) = if pos.is_empty() {
        let zero = tape.constant(Tensor::scalar(0.0));
        (zero, zero)
    } else {
        let np = pos.len();
        let index: Rc<[usize]> = pos.iter().flat_map(|&r| (0..4).map(move |c| r * 4 + c)).collect();
        let picked = out.boxes.gather(&[np, 4], index)?;
        let target = tape.constant(Tensor::from_fn(&[np, 4], |ix| gt.to_array()[ix[1]]));
        let iou = iou_loss_rows(picked, target, opts.regression)?.mean();
        let l1 = picked.sub(target)?.abs().sum().scale(1.0 / np as f64);
        (iou, l1)
    };
    let w = opts.weights;
    let total = iou.scale(w.ciou).add(l1.scale(w.l1))?.add(bce.scale(w.bce))?;
    Ok(LossBreakdown { total, iou, l1, bce })
}
