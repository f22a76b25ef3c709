//! Toy backbone, cross-scale fusion and 2-D sinusoidal position codes.
//!
//! Feature maps are stored channel-major (`[C×H×W]`); inside the network the
//! same data travels as token matrices (`[H·W × C]`, row `y·W + x`).

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::rc::Rc;

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::numerics::{Activation, Graph, Linear, Mlp, ParamStore, Tape, Tensor, Var};

pub const FINE_STRIDE: usize = 8;
pub const COARSE_STRIDE: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// `[channels × height × width]`
    pub data: Tensor,
}

impl FeatureMap {
    pub fn new(data: Tensor) -> Result<Self> {
        match *data.shape() {
            [channels, height, width] => Ok(Self { channels, height, width, data }),
            ref s => dim_err(format!("feature map needs rank 3, got {s:?}")),
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data.data()[(c * self.height + y) * self.width + x]
    }

    /// `[H·W × C]` token layout.
    pub fn to_tokens(&self) -> Tensor {
        Tensor::from_fn(&[self.height * self.width, self.channels], |ix| {
            let (s, c) = (ix[0], ix[1]);
            self.at(c, s / self.width, s % self.width)
        })
    }

    pub fn from_tokens(tokens: &Tensor, height: usize, width: usize) -> Result<Self> {
        let (s, c) = tokens.dims2()?;
        if s != height * width {
            return dim_err(format!("{s} tokens for a {height}×{width} grid"));
        }
        let data = Tensor::from_fn(&[c, height, width], |ix| {
            tokens.at2(ix[1] * width + ix[2], ix[0])
        });
        Self::new(data)
    }
}

/// Token matrix with its spatial grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence {
    /// `[S × D]`
    pub tokens: Tensor,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl PatchSequence {
    pub fn new(tokens: Tensor, grid_h: usize, grid_w: usize) -> Result<Self> {
        let (s, _) = tokens.dims2()?;
        if s != grid_h * grid_w {
            return dim_err(format!("{s} tokens for a {grid_h}×{grid_w} grid"));
        }
        Ok(Self { tokens, grid_h, grid_w })
    }

    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.shape()[1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// stride 8, `2C` channels
    Fine,
    /// stride 16, `4C` channels
    Coarse,
}

impl Stage {
    pub fn stride(self) -> usize {
        match self {
            Stage::Fine => FINE_STRIDE,
            Stage::Coarse => COARSE_STRIDE,
        }
    }
}

/// Non-overlapping `p×p` patches of a `[3×H×W]` image, one row per patch,
/// features ordered `(channel, dy, dx)`.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let [ch, h, w] = *image.shape() else {
        return dim_err(format!("image needs rank 3, got {:?}", image.shape()));
    };
    if h % patch != 0 || w % patch != 0 {
        return dim_err(format!("{h}×{w} image not divisible into {patch}px patches"));
    }
    let (gh, gw) = (h / patch, w / patch);
    let px = image.data();
    Ok(Tensor::from_fn(&[gh * gw, ch * patch * patch], |ix| {
        let (s, f) = (ix[0], ix[1]);
        let (gy, gx) = (s / gw, s % gw);
        let (c, r) = (f / (patch * patch), f % (patch * patch));
        let (dy, dx) = (r / patch, r % patch);
        px[(c * h + gy * patch + dy) * w + gx * patch + dx]
    }))
}

/// Stand-in backbone: per stage, patch flattening, one linear layer and a
/// GELU. Shared between the template and search branches.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub base_channels: usize,
    pub fine: Linear,
    pub coarse: Linear,
}

impl PatchEmbed {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, base_channels: usize) -> Self {
        let c = base_channels;
        Self {
            base_channels: c,
            fine: Linear::new(store, rng, "backbone.fine", 3 * FINE_STRIDE * FINE_STRIDE, 2 * c),
            coarse: Linear::new(store, rng, "backbone.coarse", 3 * COARSE_STRIDE * COARSE_STRIDE, 4 * c),
        }
    }

    fn check(image: &Tensor) -> Result<(usize, usize)> {
        match *image.shape() {
            [3, h, w] if h % COARSE_STRIDE == 0 && w % COARSE_STRIDE == 0 => Ok((h, w)),
            ref s => dim_err(format!("image {s:?} must be 3×H×W with H, W divisible by 16")),
        }
    }

    /// Pre-activation linear features in token layout.
    pub fn linear_tokens<'t>(&self, g: &Graph<'t, '_>, image: &Tensor, stage: Stage) -> Result<Var<'t>> {
        Self::check(image)?;
        let patches = g.input(patchify(image, stage.stride())?);
        let layer = match stage {
            Stage::Fine => &self.fine,
            Stage::Coarse => &self.coarse,
        };
        layer.forward(g, patches)
    }

    pub fn tokens<'t>(&self, g: &Graph<'t, '_>, image: &Tensor, stage: Stage) -> Result<Var<'t>> {
        Ok(self.linear_tokens(g, image, stage)?.gelu())
    }

    /// Evaluated feature map for one stage.
    pub fn feature_map(&self, store: &ParamStore, image: &Tensor, stage: Stage) -> Result<FeatureMap> {
        let (h, w) = Self::check(image)?;
        let tape = Tape::new();
        let g = Graph::eval(&tape, store);
        let tokens = self.tokens(&g, image, stage)?.value();
        FeatureMap::from_tokens(&tokens, h / stage.stride(), w / stage.stride())
    }
}

/// Source index (into the channel-major input) of every output element of the
/// channel-to-space rearrangement `out(c', 2y+dy, 2x+dx) = in(4c'+2dy+dx, y, x)`.
fn upscale_source_index(channels: usize, h: usize, w: usize) -> Vec<usize> {
    let oc = channels / 4;
    let (oh, ow) = (2 * h, 2 * w);
    let mut idx = Vec::with_capacity(channels * h * w);
    for c in 0..oc {
        for oy in 0..oh {
            for ox in 0..ow {
                let (y, dy, x, dx) = (oy / 2, oy % 2, ox / 2, ox % 2);
                let ic = 4 * c + 2 * dy + dx;
                idx.push((ic * h + y) * w + x);
            }
        }
    }
    idx
}

/// Lossless channel-to-space move `[4c×h×w] -> [c×2h×2w]`.
pub fn rearrange_upscale(coarse: &FeatureMap) -> Result<FeatureMap> {
    if coarse.channels % 4 != 0 {
        return dim_err(format!("{} channels not divisible by 4", coarse.channels));
    }
    let idx = upscale_source_index(coarse.channels, coarse.height, coarse.width);
    let src = coarse.data.data();
    let data: Vec<f64> = idx.iter().map(|&i| src[i]).collect();
    FeatureMap::new(Tensor::new(
        vec![coarse.channels / 4, 2 * coarse.height, 2 * coarse.width],
        data,
    )?)
}

/// Inverse of [`rearrange_upscale`].
pub fn rearrange_downscale(fine: &FeatureMap) -> Result<FeatureMap> {
    if fine.height % 2 != 0 || fine.width % 2 != 0 {
        return dim_err(format!("{}×{} grid is not even", fine.height, fine.width));
    }
    let (h, w) = (fine.height / 2, fine.width / 2);
    let channels = fine.channels * 4;
    let idx = upscale_source_index(channels, h, w);
    let mut data = vec![0.0; channels * h * w];
    for (o, &i) in idx.iter().enumerate() {
        data[i] = fine.data.data()[o];
    }
    FeatureMap::new(Tensor::new(vec![channels, h, w], data)?)
}

/// Token-layout gather index for the upscale: output `[(2h·2w) × c]` from
/// input `[(h·w) × 4c]`.
fn upscale_token_index(channels: usize, h: usize, w: usize) -> Vec<usize> {
    let oc = channels / 4;
    let ow = 2 * w;
    let mut idx = Vec::with_capacity(channels * h * w);
    for oy in 0..2 * h {
        for ox in 0..ow {
            for c in 0..oc {
                let (y, dy, x, dx) = (oy / 2, oy % 2, ox / 2, ox % 2);
                idx.push((y * w + x) * channels + 4 * c + 2 * dy + dx);
            }
        }
    }
    idx
}

/// Differentiable [`rearrange_upscale`] on token matrices.
pub fn rearrange_upscale_tokens<'t>(coarse: Var<'t>, h: usize, w: usize) -> Result<Var<'t>> {
    let (s, channels) = coarse.dims2()?;
    if s != h * w || channels % 4 != 0 {
        return dim_err(format!("coarse tokens [{s}×{channels}] for grid {h}×{w}"));
    }
    let idx: Rc<[usize]> = upscale_token_index(channels, h, w).into();
    coarse.gather(&[4 * h * w, channels / 4], idx)
}

/// Cross-scale fusion: concat the fine map with the rearranged coarse map
/// (`2C + C = 3C` channels) and project to `D` with two FC layers.
#[derive(Clone, Debug)]
pub struct CrossScaleFusion {
    pub proj: Mlp,
}

impl CrossScaleFusion {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, base_channels: usize, d_model: usize) -> Self {
        Self {
            proj: Mlp::new(store, rng, "csf", &[3 * base_channels, d_model, d_model], Activation::Relu),
        }
    }

    /// `fine: [h·w × 2C]`, `coarse: [(h/2)(w/2) × 4C]` -> `[h·w × D]`.
    pub fn fuse<'t>(&self, g: &Graph<'t, '_>, fine: Var<'t>, coarse: Var<'t>, h: usize, w: usize) -> Result<Var<'t>> {
        let (fs, fc) = fine.dims2()?;
        let (cs, cc) = coarse.dims2()?;
        if h % 2 != 0 || w % 2 != 0 || fs != h * w || cs * 4 != fs || cc != 2 * fc {
            return dim_err(format!(
                "fine [{fs}×{fc}] on {h}×{w} vs coarse [{cs}×{cc}]: coarse must be half resolution with twice the channels"
            ));
        }
        let up = rearrange_upscale_tokens(coarse, h / 2, w / 2)?;
        let cat = Var::concat_cols(&[fine, up])?;
        self.proj.forward(g, cat)
    }

    /// Evaluated fusion of two feature maps.
    pub fn fuse_maps(&self, store: &ParamStore, fine: &FeatureMap, coarse: &FeatureMap) -> Result<PatchSequence> {
        if coarse.height * 2 != fine.height || coarse.width * 2 != fine.width {
            return dim_err(format!(
                "coarse {}×{} is not half of fine {}×{}",
                coarse.height, coarse.width, fine.height, fine.width
            ));
        }
        let tape = Tape::new();
        let g = Graph::eval(&tape, store);
        let f = g.input(fine.to_tokens());
        let c = g.input(coarse.to_tokens());
        let out = self.fuse(&g, f, c, fine.height, fine.width)?.value();
        PatchSequence::new(out.as_ref().clone(), fine.height, fine.width)
    }
}

/// Fixed 2-D sine/cosine position codes `[S × D]`: the first `D/2` features
/// encode the row, the rest the column, as interleaved `(sin, cos)` pairs over
/// geometric frequencies. Positions are normalized to `(0, 2π]`.
pub fn sinusoidal_pe(grid_h: usize, grid_w: usize, d_model: usize) -> Result<Tensor> {
    if d_model % 4 != 0 || d_model == 0 {
        return dim_err(format!("position code width {d_model} not divisible by 4"));
    }
    if grid_h == 0 || grid_w == 0 {
        return dim_err("empty grid");
    }
    let half = d_model / 2;
    let freq = |k: usize| 10000f64.powf((2 * (k / 2)) as f64 / half as f64);
    Ok(Tensor::from_fn(&[grid_h * grid_w, d_model], |ix| {
        let (s, f) = (ix[0], ix[1]);
        let (pos, k) = if f < half {
            ((s / grid_w + 1) as f64 / grid_h as f64 * 2.0 * PI, f)
        } else {
            ((s % grid_w + 1) as f64 / grid_w as f64 * 2.0 * PI, f - half)
        };
        let a = pos / freq(k);
        if k % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    }))
}

const FEATURE_MAGIC: &[u8; 4] = b"SFTF";
const FEATURE_VERSION: u32 = 1;

/// Little-endian feature file: magic, version, channels, height, width, then
/// the `f64` values channel-major.
pub fn write_feature_map(w: &mut impl Write, map: &FeatureMap) -> Result<()> {
    w.write_all(FEATURE_MAGIC)?;
    for v in [FEATURE_VERSION, map.channels as u32, map.height as u32, map.width as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in map.data.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_feature_map(r: &mut impl Read) -> Result<FeatureMap> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::Format(format!("bad feature magic {magic:?}")));
    }
    let mut u32s = [0u32; 4];
    for v in &mut u32s {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        *v = u32::from_le_bytes(b);
    }
    let [version, c, h, w] = u32s;
    if version != FEATURE_VERSION {
        return Err(Error::Format(format!("unsupported feature version {version}")));
    }
    let n = (c as usize) * (h as usize) * (w as usize);
    let mut data = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b)?;
        data.push(f64::from_le_bytes(b));
    }
    FeatureMap::new(Tensor::new(vec![c as usize, h as usize, w as usize], data)?)
}
