//! Success rate, precision and average overlap.

use sft_core::head_loss::BBox;

use crate::{HarnessError, Result};

/// Center-error threshold for the precision rate, in pixels.
pub const PRECISION_PIXELS: f64 = 20.0;
/// Number of steps in the IoU threshold grid `0, 0.05, …, 1`.
pub const THRESHOLD_STEPS: usize = 20;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    /// Mean success over IoU thresholds `0:0.05:1`.
    pub sr_auc: f64,
    pub sr50: f64,
    pub sr75: f64,
    /// Fraction of frames with center error below 20 px.
    pub pr: f64,
    /// Mean IoU.
    pub ao: f64,
    pub frames: usize,
}

impl Metrics {
    pub fn csv(&self) -> String {
        format!(
            "metric,value\nsr_auc,{}\nsr_0.5,{}\nsr_0.75,{}\npr_20px,{}\nao,{}\nframes,{}\n",
            self.sr_auc, self.sr50, self.sr75, self.pr, self.ao, self.frames
        )
    }
}

pub fn thresholds() -> impl Iterator<Item = f64> {
    (0..=THRESHOLD_STEPS).map(|i| i as f64 / THRESHOLD_STEPS as f64)
}

/// Per-frame metrics; a frame succeeds at threshold `t` when IoU ≥ `t`.
pub fn evaluate(results: &[BBox], gts: &[BBox]) -> Result<Metrics> {
    if results.len() != gts.len() {
        return Err(HarnessError::Evaluation(format!(
            "{} results for {} ground-truth boxes",
            results.len(),
            gts.len()
        )));
    }
    if results.is_empty() {
        return Err(HarnessError::Evaluation("nothing to evaluate".into()));
    }
    let n = results.len() as f64;
    let ious: Vec<f64> = results.iter().zip(gts).map(|(r, g)| r.iou(g)).collect();
    let success = |t: f64| ious.iter().filter(|&&v| v >= t).count() as f64 / n;
    let sr_auc = thresholds().map(success).sum::<f64>() / (THRESHOLD_STEPS + 1) as f64;
    let close = results
        .iter()
        .zip(gts)
        .filter(|(r, g)| r.center_distance(g) < PRECISION_PIXELS)
        .count();
    Ok(Metrics {
        sr_auc,
        sr50: success(0.5),
        sr75: success(0.75),
        pr: close as f64 / n,
        ao: ious.iter().sum::<f64>() / n,
        frames: results.len(),
    })
}

/// Metrics pooled over the frames of several sequences.
pub fn evaluate_sequences(runs: &[(Vec<BBox>, Vec<BBox>)]) -> Result<Metrics> {
    let mut results = Vec::new();
    let mut gts = Vec::new();
    for (r, g) in runs {
        if r.len() != g.len() {
            return Err(HarnessError::Evaluation(format!("{} results for {} ground-truth boxes", r.len(), g.len())));
        }
        results.extend_from_slice(r);
        gts.extend_from_slice(g);
    }
    evaluate(&results, &gts)
}
