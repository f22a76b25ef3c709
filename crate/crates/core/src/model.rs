//! The full network: shared backbone and fusion for both branches, MHCA,
//! the spatial-frequency former and the prediction heads.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::fusion::{sinusoidal_pe, CrossScaleFusion, PatchEmbed, PatchSequence, Stage, FINE_STRIDE};
use crate::gpha::{GphaOptions, GphaTrace, KeySource, SfFormer, TemplateKeys};
use crate::head_loss::{HeadOutput, TrackingHeads};
use crate::mhca::MhcaStack;
use crate::numerics::{Graph, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Backbone base width `C` (fine stage has `2C`, coarse `4C` channels).
    pub base_channels: usize,
    pub d_model: usize,
    pub heads: usize,
    pub mhca_rounds: usize,
    pub gpha_layers: usize,
    pub gpha: GphaOptions,
    pub key_source: KeySource,
    /// Side of the square template crop in pixels.
    pub template_size: usize,
    /// Side of the square search crop in pixels.
    pub search_size: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    /// Desk scale.
    fn default() -> Self {
        Self {
            base_channels: 8,
            d_model: 32,
            heads: 4,
            mhca_rounds: 1,
            gpha_layers: 2,
            gpha: GphaOptions::default(),
            key_source: KeySource::Search,
            template_size: 32,
            search_size: 64,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn paper_scale() -> Self {
        Self {
            base_channels: 96,
            d_model: 256,
            heads: 8,
            mhca_rounds: 4,
            gpha_layers: 6,
            template_size: 128,
            search_size: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.base_channels == 0 || self.d_model == 0 {
            return cfg("widths must be positive".into());
        }
        if self.d_model % 4 != 0 {
            return cfg(format!("d_model {} must be divisible by 4", self.d_model));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return cfg(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.gpha_layers == 0 {
            return cfg("at least one GPHA layer is required".into());
        }
        for (what, side) in [("template", self.template_size), ("search", self.search_size)] {
            if side == 0 || side % 16 != 0 {
                return cfg(format!("{what} size {side} must be a positive multiple of 16"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return cfg(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.gpha.alpha <= 0.0 {
            return cfg(format!("alpha {} must be positive", self.gpha.alpha));
        }
        Ok(())
    }

    pub fn template_grid(&self) -> (usize, usize) {
        let g = self.template_size / FINE_STRIDE;
        (g, g)
    }

    pub fn search_grid(&self) -> (usize, usize) {
        let g = self.search_size / FINE_STRIDE;
        (g, g)
    }
}

#[derive(Clone, Debug)]
pub struct SfTransT {
    pub config: ModelConfig,
    pub embed: PatchEmbed,
    pub csf: CrossScaleFusion,
    pub mhca: MhcaStack,
    pub former: SfFormer,
    pub heads: TrackingHeads,
}

/// Evaluated head outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `[S×1]`
    pub scores: Tensor,
    /// `[S×4]` normalized `(cx, cy, w, h)` in the search crop.
    pub boxes: Tensor,
}

impl SfTransT {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (c, d, n) = (config.base_channels, config.d_model, config.heads);
        let embed = PatchEmbed::new(store, rng, c);
        let csf = CrossScaleFusion::new(store, rng, c, d);
        let mhca = MhcaStack::new(store, rng, config.mhca_rounds, d, n)?;
        let mut former = SfFormer::new(store, rng, config.gpha_layers, d, n, config.gpha)?;
        former.key_source = config.key_source;
        let heads = TrackingHeads::new(store, rng, d);
        Ok(Self { config, embed, csf, mhca, former, heads })
    }

    pub fn beta_ids(&self) -> Vec<ParamId> {
        self.former.beta_ids()
    }

    /// Backbone + cross-scale fusion of a `[3×H×W]` crop, `[(H/8)(W/8) × D]`.
    pub fn encode<'t>(&self, g: &Graph<'t, '_>, image: &Tensor) -> Result<Var<'t>> {
        let (h, w) = match *image.shape() {
            [3, h, w] => (h / FINE_STRIDE, w / FINE_STRIDE),
            ref s => return dim_err(format!("image must be 3×H×W, got {s:?}")),
        };
        let fine = self.embed.tokens(g, image, Stage::Fine)?;
        let coarse = self.embed.tokens(g, image, Stage::Coarse)?;
        self.csf.fuse(g, fine, coarse, h, w)
    }

    /// Evaluated template features for caching.
    pub fn encode_template(&self, store: &ParamStore, template: &Tensor) -> Result<PatchSequence> {
        let tape = Tape::new();
        let g = Graph::eval(&tape, store);
        let tokens = self.encode(&g, template)?.value();
        let side = template.shape()[1] / FINE_STRIDE;
        PatchSequence::new(tokens.as_ref().clone(), side, template.shape()[2] / FINE_STRIDE)
    }

    /// Everything after the backbone: position codes, MHCA, the former and
    /// the heads.
    pub fn forward_tokens<'t>(
        &self,
        g: &Graph<'t, '_>,
        template: Var<'t>,
        template_grid: (usize, usize),
        search: Var<'t>,
        search_grid: (usize, usize),
        trace: Option<&mut Vec<GphaTrace>>,
    ) -> Result<HeadOutput<'t>> {
        let d = self.config.d_model;
        let t_pos = g.input(sinusoidal_pe(template_grid.0, template_grid.1, d)?);
        let s_pos = g.input(sinusoidal_pe(search_grid.0, search_grid.1, d)?);
        let (s, t) = self.mhca.forward(g, search.add(s_pos)?, template.add(t_pos)?)?;
        let keys = TemplateKeys { tokens: t, grid: template_grid, pos: Some(t_pos) };
        let x = self.former.forward(g, s, search_grid, Some(s_pos), Some(keys), trace)?;
        self.heads.forward(g, x)
    }

    /// Full forward pass from raw crops, as used in training.
    pub fn forward<'t>(&self, g: &Graph<'t, '_>, template: &Tensor, search: &Tensor) -> Result<HeadOutput<'t>> {
        let t = self.encode(g, template)?;
        let s = self.encode(g, search)?;
        let grid = |img: &Tensor| (img.shape()[1] / FINE_STRIDE, img.shape()[2] / FINE_STRIDE);
        self.forward_tokens(g, t, grid(template), s, grid(search), None)
    }

    /// Evaluated prediction from cached template features.
    pub fn predict(
        &self,
        store: &ParamStore,
        template: &PatchSequence,
        search: &Tensor,
        trace: Option<&mut Vec<GphaTrace>>,
    ) -> Result<Prediction> {
        let tape = Tape::new();
        let g = Graph::eval(&tape, store);
        let t = g.input(template.tokens.clone());
        let s = self.encode(&g, search)?;
        let grid = (search.shape()[1] / FINE_STRIDE, search.shape()[2] / FINE_STRIDE);
        let out = self.forward_tokens(&g, t, (template.grid_h, template.grid_w), s, grid, trace)?;
        Ok(Prediction {
            scores: out.scores.value().as_ref().clone(),
            boxes: out.boxes.value().as_ref().clone(),
        })
    }
}
