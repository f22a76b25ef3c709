//! Online tracking: template caching, local/global search crops, per-frame
//! stepping and the confidence-driven search-mode switch.

use std::collections::VecDeque;
use std::fmt;

use log::warn;

use crate::error::{dim_err, Error, Result};
use crate::fusion::PatchSequence;
use crate::head_loss::{select_best, BBox};
use crate::model::SfTransT;
use crate::numerics::{ParamStore, Tensor};

/// Confidence below which a frame counts as a possible failure.
pub const CONF_THRESHOLD: f64 = 0.98;
/// Consecutive low-confidence frames that trigger global search.
pub const FAIL_FRAMES: usize = 5;

/// Smallest box side (pixels) kept after clamping.
const MIN_SIDE: f64 = 1.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum SearchMode {
    #[default]
    Local,
    Global,
}

impl SearchMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SearchMode::Local => "local",
            SearchMode::Global => "global",
        }
    }
}

impl fmt::Display for SearchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SwitchPolicy {
    pub conf_threshold: f64,
    pub fail_frames: usize,
}

impl Default for SwitchPolicy {
    fn default() -> Self {
        Self { conf_threshold: CONF_THRESHOLD, fail_frames: FAIL_FRAMES }
    }
}

impl SwitchPolicy {
    /// Next mode given the current one and the confidence history (oldest
    /// first). Local switches to global once the last `fail_frames` values are
    /// all below the threshold; global returns to local as soon as the latest
    /// value reaches it.
    pub fn next(&self, mode: SearchMode, history: &VecDeque<f64>) -> SearchMode {
        match mode {
            SearchMode::Local => {
                let n = self.fail_frames;
                let failing = history.len() >= n
                    && history.iter().rev().take(n).all(|&c| c < self.conf_threshold);
                if failing {
                    SearchMode::Global
                } else {
                    SearchMode::Local
                }
            }
            SearchMode::Global => match history.back() {
                Some(&c) if c >= self.conf_threshold => SearchMode::Local,
                _ => SearchMode::Global,
            },
        }
    }
}

/// Maps normalized crop coordinates to image pixels: a crop covering
/// `[x0, x0 + width) × [y0, y0 + height)` of the image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropTransform {
    pub x0: f64,
    pub y0: f64,
    pub width: f64,
    pub height: f64,
}

impl CropTransform {
    pub fn to_image(&self, b: &BBox) -> BBox {
        BBox {
            cx: self.x0 + b.cx * self.width,
            cy: self.y0 + b.cy * self.height,
            w: b.w * self.width,
            h: b.h * self.height,
        }
    }

    pub fn to_crop(&self, b: &BBox) -> BBox {
        BBox {
            cx: (b.cx - self.x0) / self.width,
            cy: (b.cy - self.y0) / self.height,
            w: b.w / self.width,
            h: b.h / self.height,
        }
    }
}

fn frame_dims(frame: &Tensor) -> Result<(usize, usize)> {
    match *frame.shape() {
        [3, h, w] => Ok((h, w)),
        ref s => dim_err(format!("frame must be 3×H×W, got {s:?}")),
    }
}

/// Bilinear resampling of the region described by `t` to `out_h × out_w`.
/// Samples falling outside the frame take the per-channel frame mean.
pub fn crop_resize(frame: &Tensor, t: &CropTransform, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w) = frame_dims(frame)?;
    if out_h == 0 || out_w == 0 || t.width <= 0.0 || t.height <= 0.0 {
        return dim_err("empty crop");
    }
    let src = frame.data();
    let plane = h * w;
    let means: Vec<f64> = (0..3)
        .map(|c| src[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64)
        .collect();
    let (sx, sy) = (t.width / out_w as f64, t.height / out_h as f64);
    let mut out = Vec::with_capacity(3 * out_h * out_w);
    for c in 0..3 {
        let px = |y: i64, x: i64| -> f64 {
            if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                means[c]
            } else {
                src[c * plane + y as usize * w + x as usize]
            }
        };
        for v in 0..out_h {
            let y = t.y0 + (v as f64 + 0.5) * sy - 0.5;
            let (y0, fy) = (y.floor(), y - y.floor());
            for u in 0..out_w {
                let x = t.x0 + (u as f64 + 0.5) * sx - 0.5;
                let (x0, fx) = (x.floor(), x - x.floor());
                let (yi, xi) = (y0 as i64, x0 as i64);
                let top = px(yi, xi) * (1.0 - fx) + px(yi, xi + 1) * fx;
                let bottom = px(yi + 1, xi) * (1.0 - fx) + px(yi + 1, xi + 1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(vec![3, out_h, out_w], out)
}

/// Square region of side `side` centered on `center`.
pub fn square_around(center: (f64, f64), side: f64) -> CropTransform {
    CropTransform { x0: center.0 - side / 2.0, y0: center.1 - side / 2.0, width: side, height: side }
}

/// Template region: side `2·√(w·h)`.
pub fn template_region(b: &BBox) -> CropTransform {
    square_around((b.cx, b.cy), 2.0 * (b.w * b.h).sqrt())
}

/// Local search region: four times the area of the box-equivalent square,
/// side `2·√(4·w·h) = 4·√(w·h)`.
pub fn local_search_region(b: &BBox) -> CropTransform {
    square_around((b.cx, b.cy), 2.0 * (4.0 * b.w * b.h).sqrt())
}

/// Whole frame (aspect ratio not preserved by the later resize).
pub fn global_search_region(frame_h: usize, frame_w: usize) -> CropTransform {
    CropTransform { x0: 0.0, y0: 0.0, width: frame_w as f64, height: frame_h as f64 }
}

/// Clamps `b` into a `frame_w × frame_h` image, keeping sides ≥ 1 pixel.
pub fn clamp_box(b: &BBox, frame_h: usize, frame_w: usize) -> BBox {
    let clamp_axis = |c: f64, s: f64, limit: f64| {
        let lo = (c - s / 2.0).clamp(0.0, limit - MIN_SIDE);
        let hi = (c + s / 2.0).clamp(lo + MIN_SIDE, limit);
        ((lo + hi) / 2.0, hi - lo)
    };
    let (cx, w) = clamp_axis(if b.cx.is_finite() { b.cx } else { frame_w as f64 / 2.0 }, b.w.max(0.0), frame_w as f64);
    let (cy, h) = clamp_axis(if b.cy.is_finite() { b.cy } else { frame_h as f64 / 2.0 }, b.h.max(0.0), frame_h as f64);
    BBox { cx, cy, w, h }
}

fn inside(b: &BBox, frame_h: usize, frame_w: usize) -> bool {
    let (x1, y1, x2, y2) = b.corners();
    x1 >= 0.0 && y1 >= 0.0 && x2 <= frame_w as f64 && y2 <= frame_h as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackState {
    pub template_seq: PatchSequence,
    pub prev_box: BBox,
    /// Most recent confidences, oldest first, at most `policy.fail_frames`.
    pub conf_history: VecDeque<f64>,
    pub mode: SearchMode,
    pub frame_index: usize,
    pub policy: SwitchPolicy,
    /// Number of times template features were computed.
    pub template_encodes: usize,
    /// Number of steps that reused the cached template.
    pub cache_hits: usize,
}

/// Outcome of one tracked frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepResult {
    pub frame_index: usize,
    pub bbox: BBox,
    pub confidence: f64,
    /// Mode used to search this frame.
    pub mode: SearchMode,
}

impl StepResult {
    /// `frame_idx,x,y,w,h,confidence,mode` with a top-left corner.
    pub fn csv_line(&self) -> String {
        let b = &self.bbox;
        format!(
            "{},{},{},{},{},{},{}",
            self.frame_index,
            b.cx - b.w / 2.0,
            b.cy - b.h / 2.0,
            b.w,
            b.h,
            self.confidence,
            self.mode
        )
    }
}

/// Crops and caches the template from the first frame.
pub fn init(model: &SfTransT, store: &ParamStore, first_frame: &Tensor, init_box: &BBox) -> Result<TrackState> {
    init_with_policy(model, store, first_frame, init_box, SwitchPolicy::default())
}

pub fn init_with_policy(
    model: &SfTransT,
    store: &ParamStore,
    first_frame: &Tensor,
    init_box: &BBox,
    policy: SwitchPolicy,
) -> Result<TrackState> {
    let (h, w) = frame_dims(first_frame)?;
    if policy.fail_frames == 0 {
        return Err(Error::Config("fail_frames must be at least 1".into()));
    }
    let mut b = *init_box;
    if !inside(&b, h, w) || b.validate().is_err() {
        warn!("initial box {b:?} outside the {w}×{h} frame; clamping");
        b = clamp_box(&b, h, w);
    }
    let side = model.config.template_size;
    let template = crop_resize(first_frame, &template_region(&b), side, side)?;
    let template_seq = model.encode_template(store, &template)?;
    Ok(TrackState {
        template_seq,
        prev_box: b,
        conf_history: VecDeque::with_capacity(policy.fail_frames),
        mode: SearchMode::Local,
        frame_index: 0,
        policy,
        template_encodes: 1,
        cache_hits: 0,
    })
}

/// Search crop for the current mode, resized to `search_size²`.
pub fn crop_search(frame: &Tensor, state: &TrackState, search_size: usize) -> Result<(Tensor, CropTransform)> {
    let (h, w) = frame_dims(frame)?;
    let region = match state.mode {
        SearchMode::Local => local_search_region(&state.prev_box),
        SearchMode::Global => global_search_region(h, w),
    };
    Ok((crop_resize(frame, &region, search_size, search_size)?, region))
}

/// Tracks one frame and updates `state`.
pub fn step(model: &SfTransT, store: &ParamStore, frame: &Tensor, state: &mut TrackState) -> Result<StepResult> {
    let (h, w) = frame_dims(frame)?;
    let (search, region) = crop_search(frame, state, model.config.search_size)?;
    let pred = model.predict(store, &state.template_seq, &search, None)?;
    state.cache_hits += 1;
    let (_, confidence, crop_box) = select_best(&pred.scores, &pred.boxes)?;
    let bbox = clamp_box(&region.to_image(&crop_box), h, w);
    let mode = state.mode;
    state.frame_index += 1;
    state.prev_box = bbox;
    if state.conf_history.len() == state.policy.fail_frames {
        state.conf_history.pop_front();
    }
    state.conf_history.push_back(confidence);
    state.mode = state.policy.next(state.mode, &state.conf_history);
    Ok(StepResult { frame_index: state.frame_index, bbox, confidence, mode })
}

/// Tracks a whole sequence; the first result is the initial box with
/// confidence 1.
pub fn track_sequence(model: &SfTransT, store: &ParamStore, frames: &[Tensor], init_box: &BBox) -> Result<(Vec<StepResult>, TrackState)> {
    let first = frames.first().ok_or_else(|| Error::Contract("empty sequence".into()))?;
    let mut state = init(model, store, first, init_box)?;
    let mut out = vec![StepResult { frame_index: 0, bbox: state.prev_box, confidence: 1.0, mode: SearchMode::Local }];
    for frame in &frames[1..] {
        out.push(step(model, store, frame, &mut state)?);
    }
    Ok((out, state))
}
