//! Flat `key=value` configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are namespaced
//! by module (`gpha.layers=2`, `loss.lambda1=5`). The path `default` stands
//! for the built-in desk-scale configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sft_core::gpha::KeySource;
use sft_core::head_loss::{BceMode, LabelShape, LossOptions, RegressionIou};
use sft_core::model::ModelConfig;

use crate::synth::Difficulty;
use crate::{HarnessError, Result};

/// Parsed but untyped entries, in file order of first appearance.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawConfig {
    entries: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected key=value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(HarnessError::Config(format!("line {}: empty key", n + 1)));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(HarnessError::Config(format!("line {}: duplicate key {k}", n + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        if path == Path::new("default") {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.entries.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| HarnessError::Config(format!("{key}: cannot parse {v:?}"))),
        }
    }

    fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.entries.get(key).map(String::as_str) {
            None => Ok(default),
            Some("true" | "1" | "yes" | "on") => Ok(true),
            Some("false" | "0" | "no" | "off") => Ok(false),
            Some(v) => Err(HarnessError::Config(format!("{key}: expected a boolean, got {v:?}"))),
        }
    }

    fn get_list(&self, key: &str, default: &[f64]) -> Result<Vec<f64>> {
        match self.entries.get(key) {
            None => Ok(default.to_vec()),
            Some(v) if v.is_empty() => Ok(Vec::new()),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| HarnessError::Config(format!("{key}: cannot parse {s:?}")))
                })
                .collect(),
        }
    }

    fn get_choice<T: Copy>(&self, key: &str, default: T, choices: &[(&str, T)]) -> Result<T> {
        match self.entries.get(key) {
            None => Ok(default),
            Some(v) => choices.iter().find(|(name, _)| name == v).map(|&(_, t)| t).ok_or_else(|| {
                let names: Vec<_> = choices.iter().map(|(n, _)| *n).collect();
                HarnessError::Config(format!("{key}: {v:?} is not one of {}", names.join("|")))
            }),
        }
    }
}

pub const KNOWN_KEYS: &[&str] = &[
    "seed",
    "model.base_channels",
    "model.d_model",
    "model.template_size",
    "model.search_size",
    "model.dropout",
    "model.checkpoint",
    "mhca.heads",
    "mhca.rounds",
    "gpha.layers",
    "gpha.alpha",
    "gpha.prior",
    "gpha.residual",
    "gpha.keys",
    "gpha.freeze_beta",
    "loss.lambda1",
    "loss.lambda2",
    "loss.lambda3",
    "loss.bce",
    "loss.iou",
    "loss.labels",
    "data.frame_size",
    "data.sequence_length",
    "data.train_sequences",
    "data.test_sequences",
    "data.difficulty",
    "train.steps",
    "train.step_size",
    "train.batch",
    "train.global_fraction",
    "train.jitter",
    "train.log_every",
    "spectrum.seeds",
    "spectrum.tokens",
    "spectrum.layers",
    "spectrum.d_model",
    "spectrum.heads",
    "spectrum.betas",
    "spectrum.alphas",
    "track.length",
    "track.difficulty",
    "gradcheck.step",
];

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub frame_size: usize,
    pub sequence_length: usize,
    pub train_sequences: usize,
    pub test_sequences: usize,
    pub difficulty: Difficulty,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            frame_size: 64,
            sequence_length: 40,
            train_sequences: 200,
            test_sequences: 50,
            difficulty: Difficulty::Plain,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub step_size: f64,
    /// Samples averaged per update.
    pub batch: usize,
    /// Probability that a sample uses the whole frame as search region.
    pub global_fraction: f64,
    /// Local search centers are displaced by up to `jitter·√(wh)` pixels.
    pub jitter: f64,
    /// Keep every `β` at zero.
    pub freeze_beta: bool,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            step_size: 0.003,
            batch: 8,
            global_fraction: 0.5,
            jitter: 0.5,
            freeze_beta: false,
            log_every: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumConfig {
    pub seeds: usize,
    pub tokens: usize,
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub betas: Vec<f64>,
    /// Gaussian scales for extra runs with the prior enabled.
    pub alphas: Vec<f64>,
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        Self {
            seeds: 100,
            tokens: 64,
            layers: 6,
            d_model: 32,
            heads: 4,
            betas: vec![-1.0, 0.0, 2.0],
            alphas: vec![1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackConfig {
    pub length: usize,
    pub difficulty: Difficulty,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self { length: 40, difficulty: Difficulty::Plain }
    }
}

/// Everything the command line needs, fully typed and validated.
#[derive(Clone, Debug, PartialEq)]
pub struct HarnessConfig {
    pub seed: u64,
    pub model: ModelConfig,
    /// Trained parameters for `track`, `eval` and `export-attn`; a freshly
    /// initialized model is used when absent.
    pub checkpoint: Option<PathBuf>,
    pub loss: LossOptions,
    pub labels: LabelShape,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub spectrum: SpectrumConfig,
    pub track: TrackConfig,
    pub gradcheck_step: f64,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            checkpoint: None,
            loss: LossOptions::default(),
            labels: LabelShape::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            spectrum: SpectrumConfig::default(),
            track: TrackConfig::default(),
            gradcheck_step: 1e-3,
        }
    }
}

const DIFFICULTIES: &[(&str, Difficulty)] = &[
    ("plain", Difficulty::Plain),
    ("distractor", Difficulty::Distractor),
    ("occlusion", Difficulty::Occlusion),
];

impl HarnessConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        if let Some(k) = raw.keys().find(|k| !KNOWN_KEYS.contains(k)) {
            return Err(HarnessError::Config(format!("unknown key {k}")));
        }
        let d = Self::default();
        let r = raw;

        let mut model = ModelConfig {
            base_channels: r.get("model.base_channels", d.model.base_channels)?,
            d_model: r.get("model.d_model", d.model.d_model)?,
            heads: r.get("mhca.heads", d.model.heads)?,
            mhca_rounds: r.get("mhca.rounds", d.model.mhca_rounds)?,
            gpha_layers: r.get("gpha.layers", d.model.gpha_layers)?,
            template_size: r.get("model.template_size", d.model.template_size)?,
            search_size: r.get("model.search_size", d.model.search_size)?,
            dropout: r.get("model.dropout", d.model.dropout)?,
            ..d.model.clone()
        };
        model.gpha.alpha = r.get("gpha.alpha", model.gpha.alpha)?;
        model.gpha.gaussian_prior = r.get_bool("gpha.prior", model.gpha.gaussian_prior)?;
        model.gpha.residual = r.get_bool("gpha.residual", model.gpha.residual)?;
        model.key_source = r.get_choice(
            "gpha.keys",
            model.key_source,
            &[("search", KeySource::Search), ("template", KeySource::Template)],
        )?;
        model.validate()?;

        let mut loss = d.loss;
        loss.weights.ciou = r.get("loss.lambda1", loss.weights.ciou)?;
        loss.weights.l1 = r.get("loss.lambda2", loss.weights.l1)?;
        loss.weights.bce = r.get("loss.lambda3", loss.weights.bce)?;
        loss.bce = r.get_choice("loss.bce", loss.bce, &[("full", BceMode::Full), ("positive", BceMode::PositiveOnly)])?;
        loss.regression = r.get_choice(
            "loss.iou",
            loss.regression,
            &[("ciou", RegressionIou::Ciou), ("giou", RegressionIou::Giou)],
        )?;
        let labels = r.get_choice(
            "loss.labels",
            d.labels,
            &[("ellipse", LabelShape::Ellipse), ("rectangle", LabelShape::Rectangle)],
        )?;

        let data = DataConfig {
            frame_size: r.get("data.frame_size", d.data.frame_size)?,
            sequence_length: r.get("data.sequence_length", d.data.sequence_length)?,
            train_sequences: r.get("data.train_sequences", d.data.train_sequences)?,
            test_sequences: r.get("data.test_sequences", d.data.test_sequences)?,
            difficulty: r.get_choice("data.difficulty", d.data.difficulty, DIFFICULTIES)?,
        };
        let train = TrainConfig {
            steps: r.get("train.steps", d.train.steps)?,
            step_size: r.get("train.step_size", d.train.step_size)?,
            batch: r.get("train.batch", d.train.batch)?,
            global_fraction: r.get("train.global_fraction", d.train.global_fraction)?,
            jitter: r.get("train.jitter", d.train.jitter)?,
            freeze_beta: r.get_bool("gpha.freeze_beta", d.train.freeze_beta)?,
            log_every: r.get("train.log_every", d.train.log_every)?,
        };
        let spectrum = SpectrumConfig {
            seeds: r.get("spectrum.seeds", d.spectrum.seeds)?,
            tokens: r.get("spectrum.tokens", d.spectrum.tokens)?,
            layers: r.get("spectrum.layers", d.spectrum.layers)?,
            d_model: r.get("spectrum.d_model", d.spectrum.d_model)?,
            heads: r.get("spectrum.heads", d.spectrum.heads)?,
            betas: r.get_list("spectrum.betas", &d.spectrum.betas)?,
            alphas: r.get_list("spectrum.alphas", &d.spectrum.alphas)?,
        };
        let track = TrackConfig {
            length: r.get("track.length", d.track.length)?,
            difficulty: r.get_choice("track.difficulty", d.track.difficulty, DIFFICULTIES)?,
        };
        let cfg = Self {
            seed: r.get("seed", d.seed)?,
            model,
            checkpoint: r.entries.get("model.checkpoint").map(PathBuf::from),
            loss,
            labels,
            data,
            train,
            spectrum,
            track,
            gradcheck_step: r.get("gradcheck.step", d.gradcheck_step)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_raw(&RawConfig::load(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        let w = &self.loss.weights;
        if [w.ciou, w.l1, w.bce].iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("loss weights must be finite and non-negative".into());
        }
        let min_frame = crate::synth::MAX_SIDE + 8;
        if self.data.frame_size < min_frame {
            return bad(format!("data.frame_size must be at least {min_frame}"));
        }
        if self.data.sequence_length < 2 || self.track.length < 2 {
            return bad("sequences need at least 2 frames".into());
        }
        if self.data.train_sequences == 0 || self.data.test_sequences == 0 {
            return bad("sequence counts must be positive".into());
        }
        let t = &self.train;
        if t.batch == 0 {
            return bad("train.batch must be positive".into());
        }
        if !(t.step_size.is_finite() && t.step_size > 0.0) {
            return bad(format!("train.step_size {} must be positive", t.step_size));
        }
        if !(0.0..=1.0).contains(&t.global_fraction) || !(t.jitter >= 0.0) {
            return bad("train.global_fraction must lie in [0, 1] and train.jitter be non-negative".into());
        }
        let s = &self.spectrum;
        if s.seeds == 0 || s.tokens == 0 || s.layers == 0 {
            return bad("spectrum seeds, tokens and layers must be positive".into());
        }
        if s.heads == 0 || s.d_model % s.heads != 0 {
            return bad(format!("spectrum.d_model {} not divisible by {} heads", s.d_model, s.heads));
        }
        if s.alphas.iter().any(|a| !(*a > 0.0)) || s.betas.iter().any(|b| !b.is_finite()) {
            return bad("spectrum alphas must be positive and betas finite".into());
        }
        if !(self.gradcheck_step > 0.0) {
            return bad("gradcheck.step must be positive".into());
        }
        Ok(())
    }
}
