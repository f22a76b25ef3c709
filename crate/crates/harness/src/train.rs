//! Toy training on synthetic sequences with plain gradient descent, and
//! held-out evaluation through the tracker.

use std::fmt::Write as _;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sft_core::head_loss::{labels, total_loss, BBox, LabelMap, LabelShape, LossOptions};
use sft_core::model::{ModelConfig, SfTransT};
use sft_core::numerics::{Dropout, Graph, ParamStore, Tape, Tensor};
use sft_core::tracker::{crop_resize, global_search_region, square_around, template_region, track_sequence, StepResult};

use crate::config::{HarnessConfig, TrainConfig};
use crate::metrics::{evaluate_sequences, Metrics};
use crate::synth::SequencePlan;
use crate::{derive_seed, streams, HarnessError, Result};

/// One (template, search) training pair.
#[derive(Clone, Debug)]
pub struct Sample {
    pub template: Tensor,
    pub search: Tensor,
    /// Target box in normalized search-crop coordinates.
    pub gt: BBox,
    pub labels: LabelMap,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub total: f64,
    pub iou: f64,
    pub l1: f64,
    pub bce: f64,
}

pub const LOSS_HEADER: &str = "step,total,iou,l1,bce";

impl LossRow {
    pub fn csv_line(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.total, self.iou, self.l1, self.bce)
    }
}

pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut s = format!("{LOSS_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_line());
    }
    s
}

pub struct TrainOutcome {
    pub model: SfTransT,
    pub store: ParamStore,
    pub losses: Vec<LossRow>,
}

/// Freshly initialized model from the configuration seed.
pub fn build_model(model: &ModelConfig, seed: u64) -> Result<(SfTransT, ParamStore)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, streams::INIT, 0));
    let model = SfTransT::new(&mut store, &mut rng, model.clone())?;
    Ok((model, store))
}

pub fn train_plans(cfg: &HarnessConfig) -> Result<Vec<SequencePlan>> {
    plans(cfg, streams::TRAIN_SEQ, cfg.data.train_sequences)
}

pub fn test_plans(cfg: &HarnessConfig) -> Result<Vec<SequencePlan>> {
    plans(cfg, streams::TEST_SEQ, cfg.data.test_sequences)
}

fn plans(cfg: &HarnessConfig, stream: u64, count: usize) -> Result<Vec<SequencePlan>> {
    let d = &cfg.data;
    (0..count)
        .into_par_iter()
        .map(|k| SequencePlan::new(derive_seed(cfg.seed, stream, k as u64), d.sequence_length, d.difficulty, d.frame_size))
        .collect()
}

/// Draws a pair from a random sequence: template from frame `i`, search
/// from frame `j`. The search region is either the whole frame or a local
/// region (side `4√(wh)`) around a jittered, rescaled version of the target
/// box, imitating an imperfect previous-frame estimate.
pub fn sample_pair(
    plans: &[SequencePlan],
    rng: &mut impl Rng,
    model: &ModelConfig,
    train: &TrainConfig,
    shape: LabelShape,
) -> Result<Sample> {
    let plan = &plans[rng.gen_range(0..plans.len())];
    let i = rng.gen_range(0..plan.len());
    let j = rng.gen_range(0..plan.len());
    let t_box = plan.gt_box(i);
    let s_box = plan.gt_box(j);
    let template = crop_resize(&plan.render(i), &template_region(&t_box), model.template_size, model.template_size)?;
    let n = plan.frame_size;
    let region = if rng.gen_bool(train.global_fraction) {
        global_search_region(n, n)
    } else {
        let r = (s_box.w * s_box.h).sqrt();
        let dx = rng.gen_range(-train.jitter..=train.jitter) * r;
        let dy = rng.gen_range(-train.jitter..=train.jitter) * r;
        let scale = rng.gen_range(-0.2f64..=0.2).exp();
        square_around((s_box.cx + dx, s_box.cy + dy), 4.0 * r * scale)
    };
    let search = crop_resize(&plan.render(j), &region, model.search_size, model.search_size)?;
    let gt = region.to_crop(&s_box);
    let (gh, gw) = model.search_grid();
    Ok(Sample { template, search, labels: labels(shape, &gt, gh, gw), gt })
}

fn non_finite_report(store: &ParamStore) -> String {
    let mut names = Vec::new();
    for (_, p) in store.iter() {
        if !p.value.is_finite() {
            names.push(format!("{} (value)", p.name));
        }
        if !p.grad.is_finite() {
            names.push(format!("{} (grad)", p.name));
        }
    }
    if names.is_empty() {
        "all parameters and gradients finite".into()
    } else {
        format!("non-finite: {}", names.join(", "))
    }
}

/// Forward and backward for one sample, accumulating gradients into `store`.
fn accumulate(
    model: &SfTransT,
    store: &mut ParamStore,
    sample: &Sample,
    opts: &LossOptions,
    dropout: Option<Dropout>,
) -> Result<[f64; 4]> {
    let tape = Tape::new();
    let (loss, parts) = {
        let g = match dropout {
            Some(d) => Graph::training(&tape, store, d),
            None => Graph::eval(&tape, store),
        };
        let out = model.forward(&g, &sample.template, &sample.search)?;
        if !out.logits.value().is_finite() || !out.boxes.value().is_finite() {
            return Ok([f64::NAN; 4]);
        }
        let l = total_loss(&out, &sample.labels, &sample.gt, opts)?;
        (l.total, [l.total.item()?, l.iou.item()?, l.l1.item()?, l.bce.item()?])
    };
    if parts.iter().any(|v| !v.is_finite()) {
        return Ok(parts);
    }
    tape.backward(loss, store)?;
    Ok(parts)
}

/// Plain gradient descent on freshly sampled batches.
pub fn train_toy(cfg: &HarnessConfig) -> Result<TrainOutcome> {
    let (model, mut store) = build_model(&cfg.model, cfg.seed)?;
    let plans = train_plans(cfg)?;
    let t = &cfg.train;
    let frozen = if t.freeze_beta { model.beta_ids() } else { Vec::new() };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, streams::SAMPLER, 0));
    let mut losses = Vec::with_capacity(t.steps);
    for step in 0..t.steps {
        store.zero_grad();
        let mut sum = [0.0; 4];
        for b in 0..t.batch {
            let sample = sample_pair(&plans, &mut rng, &cfg.model, t, cfg.labels)?;
            let dropout = Dropout::new(cfg.model.dropout, derive_seed(cfg.seed, streams::DROPOUT, (step * t.batch + b) as u64));
            let parts = accumulate(&model, &mut store, &sample, &cfg.loss, Some(dropout))?;
            if parts.iter().any(|v| !v.is_finite()) {
                return Err(HarnessError::Diverged(format!(
                    "step {step}, sample {b}: loss components (total, iou, l1, bce) = {parts:?}; {}",
                    non_finite_report(&store)
                )));
            }
            for (s, p) in sum.iter_mut().zip(parts) {
                *s += p;
            }
        }
        store.scale_grads(1.0 / t.batch as f64);
        let norm = store.grad_norm();
        if !norm.is_finite() {
            return Err(HarnessError::Diverged(format!("step {step}: gradient norm {norm}; {}", non_finite_report(&store))));
        }
        store.descend(t.step_size, &frozen);
        if store.iter().any(|(_, p)| !p.value.is_finite()) {
            return Err(HarnessError::Diverged(format!("step {step}: update left {}", non_finite_report(&store))));
        }
        let k = t.batch as f64;
        let row = LossRow { step, total: sum[0] / k, iou: sum[1] / k, l1: sum[2] / k, bce: sum[3] / k };
        if t.log_every > 0 && step % t.log_every == 0 {
            info!("step {step}: loss {:.4} (iou {:.4}, l1 {:.4}, bce {:.4}), grad norm {norm:.3}", row.total, row.iou, row.l1, row.bce);
        }
        losses.push(row);
    }
    Ok(TrainOutcome { model, store, losses })
}

/// Full-batch descent without dropout on fixed samples; returns the batch
/// loss before each update.
pub fn fixed_batch_losses(
    model: &SfTransT,
    store: &mut ParamStore,
    samples: &[Sample],
    opts: &LossOptions,
    step_size: f64,
    steps: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        store.zero_grad();
        let mut total = 0.0;
        for s in samples {
            total += accumulate(model, store, s, opts, None)?[0];
        }
        if !total.is_finite() {
            return Err(HarnessError::Diverged(non_finite_report(store)));
        }
        store.scale_grads(1.0 / samples.len() as f64);
        store.descend(step_size, &[]);
        out.push(total / samples.len() as f64);
    }
    Ok(out)
}

/// Result of tracking one held-out sequence.
#[derive(Clone, Debug)]
pub struct SequenceRun {
    pub seed: u64,
    pub steps: Vec<StepResult>,
    pub gt: Vec<BBox>,
}

/// Tracks every plan from its first ground-truth box. Frame 0 (the given
/// initialization) is excluded from the returned metrics.
pub fn evaluate_plans(model: &SfTransT, store: &ParamStore, plans: &[SequencePlan]) -> Result<(Metrics, Vec<SequenceRun>)> {
    let runs: Vec<SequenceRun> = plans
        .par_iter()
        .map(|plan| {
            let seq = plan.to_sequence();
            let (steps, _) = track_sequence(model, store, &seq.frames, &seq.gt_boxes[0])?;
            Ok(SequenceRun { seed: plan.seed, steps, gt: seq.gt_boxes })
        })
        .collect::<Result<_>>()?;
    let pairs: Vec<_> = runs
        .iter()
        .map(|r| (r.steps[1..].iter().map(|s| s.bbox).collect(), r.gt[1..].to_vec()))
        .collect();
    Ok((evaluate_sequences(&pairs)?, runs))
}
