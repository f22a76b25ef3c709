//! Synthetic tracking sequences: a textured square moving over a static
//! textured background.

use std::fmt;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sft_core::head_loss::BBox;
use sft_core::numerics::Tensor;

use crate::{HarnessError, Result};

pub const DEFAULT_FRAME_SIZE: usize = 64;
pub const MIN_SIDE: usize = 12;
pub const MAX_SIDE: usize = 20;
const MAX_SPEED: f64 = 2.5;
const TEXTURE_BLOCKS: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Difficulty {
    #[default]
    Plain,
    /// A second square with the same texture wanders independently.
    Distractor,
    /// A flat occluder hides the target for a contiguous window of frames.
    Occlusion,
}

impl Difficulty {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Plain => "plain",
            Self::Distractor => "distractor",
            Self::Occlusion => "occlusion",
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSequence {
    pub frames: Vec<Tensor>,
    pub gt_boxes: Vec<BBox>,
    pub seed: u64,
    pub difficulty: Difficulty,
    /// Distractor box per frame (empty unless the difficulty is `Distractor`).
    pub distractor_boxes: Vec<BBox>,
    /// Frames where the target is hidden.
    pub occluded: Option<Range<usize>>,
}

/// Everything needed to render any frame of a sequence on demand.
#[derive(Clone, Debug, PartialEq)]
pub struct SequencePlan {
    pub seed: u64,
    pub difficulty: Difficulty,
    pub frame_size: usize,
    pub side: usize,
    background: Tensor,
    texture: Tensor,
    /// Top-left corners of the target per frame.
    target: Vec<(usize, usize)>,
    distractor: Vec<(usize, usize)>,
    occluded: Option<Range<usize>>,
}

/// Integer positions of a smoothed random walk bouncing inside `[0, limit]`.
fn random_walk(rng: &mut impl Rng, length: usize, limit: f64) -> Vec<(usize, usize)> {
    let mut p = [rng.gen_range(0.0..=limit), rng.gen_range(0.0..=limit)];
    let mut v = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
    let mut out = Vec::with_capacity(length);
    for _ in 0..length {
        out.push((p[0].round() as usize, p[1].round() as usize));
        for a in 0..2 {
            v[a] = (0.85 * v[a] + rng.gen_range(-1.2f64..1.2)).clamp(-MAX_SPEED, MAX_SPEED);
            p[a] += v[a];
            if p[a] < 0.0 {
                p[a] = -p[a];
                v[a] = -v[a];
            } else if p[a] > limit {
                p[a] = 2.0 * limit - p[a];
                v[a] = -v[a];
            }
            p[a] = p[a].clamp(0.0, limit);
        }
    }
    out
}

/// Smooth color field (bilinear over a coarse grid) plus fine pixel noise.
fn background(rng: &mut impl Rng, size: usize) -> Tensor {
    const G: usize = 5;
    let coarse: Vec<f64> = (0..3 * G * G).map(|_| rng.gen_range(0.25..0.75)).collect();
    let noise: Vec<f64> = (0..3 * size * size).map(|_| rng.gen_range(-0.06..0.06)).collect();
    let step = (size - 1) as f64 / (G - 1) as f64;
    Tensor::from_fn(&[3, size, size], |ix| {
        let (c, y, x) = (ix[0], ix[1] as f64 / step, ix[2] as f64 / step);
        let (y0, x0) = ((y as usize).min(G - 2), (x as usize).min(G - 2));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let at = |i: usize, j: usize| coarse[c * G * G + i * G + j];
        let v = (at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx) * (1.0 - fy)
            + (at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx) * fy;
        v + noise[(c * size + ix[1]) * size + ix[2]]
    })
}

/// Blocky high-contrast texture of side `side`.
fn texture(rng: &mut impl Rng, side: usize) -> Tensor {
    let blocks: Vec<f64> = (0..3 * TEXTURE_BLOCKS * TEXTURE_BLOCKS)
        .map(|_| if rng.gen_bool(0.5) { 0.95 } else { 0.05 })
        .collect();
    Tensor::from_fn(&[3, side, side], |ix| {
        let (by, bx) = (ix[1] * TEXTURE_BLOCKS / side, ix[2] * TEXTURE_BLOCKS / side);
        blocks[(ix[0] * TEXTURE_BLOCKS + by) * TEXTURE_BLOCKS + bx]
    })
}

impl SequencePlan {
    pub fn new(seed: u64, length: usize, difficulty: Difficulty, frame_size: usize) -> Result<Self> {
        if length < 2 {
            return Err(HarnessError::Config(format!("sequence length {length} below 2")));
        }
        if frame_size < MAX_SIDE + 8 {
            return Err(HarnessError::Config(format!("frame size {frame_size} too small")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let side = rng.gen_range(MIN_SIDE..=MAX_SIDE);
        let background = background(&mut rng, frame_size);
        let texture = texture(&mut rng, side);
        let limit = (frame_size - side) as f64;
        let target = random_walk(&mut rng, length, limit);
        let distractor = match difficulty {
            Difficulty::Distractor => random_walk(&mut rng, length, limit),
            _ => Vec::new(),
        };
        let occluded = match difficulty {
            Difficulty::Occlusion => {
                let span = (length / 5).max(1);
                let start = rng.gen_range(1..=length - span);
                Some(start..start + span)
            }
            _ => None,
        };
        Ok(Self { seed, difficulty, frame_size, side, background, texture, target, distractor, occluded })
    }

    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    fn square(&self, (x, y): (usize, usize)) -> BBox {
        let s = self.side as f64;
        BBox { cx: x as f64 + s / 2.0, cy: y as f64 + s / 2.0, w: s, h: s }
    }

    pub fn gt_box(&self, i: usize) -> BBox {
        self.square(self.target[i])
    }

    pub fn distractor_box(&self, i: usize) -> Option<BBox> {
        self.distractor.get(i).map(|&p| self.square(p))
    }

    pub fn occluded(&self) -> Option<Range<usize>> {
        self.occluded.clone()
    }

    pub fn render(&self, i: usize) -> Tensor {
        let n = self.frame_size;
        let s = self.side;
        let mut data = self.background.data().to_vec();
        let tex = self.texture.data();
        let mut paste = |(x0, y0): (usize, usize), fill: Option<f64>, pad: usize| {
            let (x0, y0) = (x0.saturating_sub(pad), y0.saturating_sub(pad));
            let side = s + 2 * pad;
            for c in 0..3 {
                for y in 0..side.min(n - y0) {
                    for x in 0..side.min(n - x0) {
                        data[(c * n + y0 + y) * n + x0 + x] = match fill {
                            Some(v) => v,
                            None => tex[(c * s + y) * s + x],
                        };
                    }
                }
            }
        };
        if let Some(&p) = self.distractor.get(i) {
            paste(p, None, 0);
        }
        paste(self.target[i], None, 0);
        if self.occluded.as_ref().is_some_and(|r| r.contains(&i)) {
            paste(self.target[i], Some(0.5), 2);
        }
        Tensor::new(vec![3, n, n], data).expect("frame buffer matches its shape")
    }

    pub fn to_sequence(&self) -> SynthSequence {
        SynthSequence {
            frames: (0..self.len()).map(|i| self.render(i)).collect(),
            gt_boxes: (0..self.len()).map(|i| self.gt_box(i)).collect(),
            seed: self.seed,
            difficulty: self.difficulty,
            distractor_boxes: (0..self.len()).filter_map(|i| self.distractor_box(i)).collect(),
            occluded: self.occluded.clone(),
        }
    }
}

/// Fully rendered sequence at the default 64×64 frame size.
pub fn gen_sequence(seed: u64, length: usize, difficulty: Difficulty) -> Result<SynthSequence> {
    gen_sequence_sized(seed, length, difficulty, DEFAULT_FRAME_SIZE)
}

pub fn gen_sequence_sized(seed: u64, length: usize, difficulty: Difficulty, frame_size: usize) -> Result<SynthSequence> {
    Ok(SequencePlan::new(seed, length, difficulty, frame_size)?.to_sequence())
}
