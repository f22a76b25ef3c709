//! The `sft` command line.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use log::error;
use sft_core::model::SfTransT;
use sft_core::numerics::ParamStore;
use sft_core::tracker::track_sequence;

use crate::checkpoint;
use crate::config::{HarnessConfig, RawConfig};
use crate::export::{export_attention, trace_pair};
use crate::gradcheck::check_former_and_loss;
use crate::metrics::evaluate;
use crate::spectrum::spectrum_experiment;
use crate::synth::SequencePlan;
use crate::train::{build_model, evaluate_plans, loss_csv, test_plans, train_toy};
use crate::{derive_seed, streams, HarnessError, Result};

/// Largest relative error accepted by `gradcheck`.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "sft", version, about = "Spatial-frequency transformer tracker: training, tracking and diagnostics")]
pub struct Cli {
    /// Flat key=value configuration file, or `default`.
    #[arg(long, global = true, default_value = "default")]
    pub config: PathBuf,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Toy training; writes loss.csv and model.sfck.
    Train,
    /// Tracks one synthetic sequence; writes track.csv.
    Track,
    /// Tracks the held-out sequences; writes metrics.csv and eval_tracks.csv.
    Eval,
    /// Frequency content per layer; writes spectrum.csv.
    Spectrum,
    /// Finite-difference check of the former, heads and loss; writes gradcheck.txt.
    Gradcheck,
    /// Attention weights and Gaussian maps for one frame pair.
    ExportAttn,
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| HarnessError::io(path, e))
}

fn load_model(cfg: &HarnessConfig) -> Result<(SfTransT, ParamStore)> {
    let (model, mut store) = build_model(&cfg.model, cfg.seed)?;
    if let Some(path) = &cfg.checkpoint {
        checkpoint::load_into(path, &mut store)?;
    }
    Ok((model, store))
}

fn track_plan(cfg: &HarnessConfig) -> Result<SequencePlan> {
    SequencePlan::new(
        derive_seed(cfg.seed, streams::TRACK_SEQ, 0),
        cfg.track.length,
        cfg.track.difficulty,
        cfg.data.frame_size,
    )
}

fn run_train(cfg: &HarnessConfig, out: &Path) -> Result<String> {
    let outcome = match train_toy(cfg) {
        Ok(o) => o,
        Err(e @ HarnessError::Diverged(_)) => {
            write_file(&out.join("divergence.txt"), format!("{e}\n"))?;
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    write_file(&out.join("loss.csv"), loss_csv(&outcome.losses))?;
    checkpoint::save(&out.join("model.sfck"), &outcome.store)?;
    let last = outcome.losses.last().map_or(f64::NAN, |r| r.total);
    Ok(format!("trained {} steps, final loss {last}", outcome.losses.len()))
}

fn run_track(cfg: &HarnessConfig, out: &Path) -> Result<String> {
    let (model, store) = load_model(cfg)?;
    let seq = track_plan(cfg)?.to_sequence();
    let (steps, _) = track_sequence(&model, &store, &seq.frames, &seq.gt_boxes[0])?;
    let mut csv = String::new();
    for s in &steps {
        let _ = writeln!(csv, "{}", s.csv_line());
    }
    write_file(&out.join("track.csv"), csv)?;
    let boxes: Vec<_> = steps[1..].iter().map(|s| s.bbox).collect();
    let m = evaluate(&boxes, &seq.gt_boxes[1..])?;
    Ok(format!("tracked {} frames, AO {:.4}, SR_0.5 {:.4}", steps.len(), m.ao, m.sr50))
}

fn run_eval(cfg: &HarnessConfig, out: &Path) -> Result<String> {
    let (model, store) = load_model(cfg)?;
    let (metrics, runs) = evaluate_plans(&model, &store, &test_plans(cfg)?)?;
    write_file(&out.join("metrics.csv"), metrics.csv())?;
    let mut tracks = String::from("sequence,frame_idx,x,y,w,h,confidence,mode\n");
    for (k, run) in runs.iter().enumerate() {
        for s in &run.steps {
            let _ = writeln!(tracks, "{k},{}", s.csv_line());
        }
    }
    write_file(&out.join("eval_tracks.csv"), tracks)?;
    Ok(format!(
        "{} sequences: AO {:.4}, SR {:.4}, SR_0.5 {:.4}, SR_0.75 {:.4}, PR {:.4}",
        runs.len(),
        metrics.ao,
        metrics.sr_auc,
        metrics.sr50,
        metrics.sr75,
        metrics.pr
    ))
}

fn run_spectrum(cfg: &HarnessConfig, out: &Path) -> Result<String> {
    let report = spectrum_experiment(&cfg.spectrum, cfg.seed)?;
    write_file(&out.join("spectrum.csv"), report.csv())?;
    let last = cfg.spectrum.layers;
    let summary: Vec<String> = report
        .rows
        .iter()
        .filter(|r| r.layer == last)
        .map(|r| format!("{} {:.6}", r.config, r.hf_share))
        .collect();
    Ok(format!("HF share after layer {last}: {}", summary.join(", ")))
}

fn run_gradcheck(cfg: &HarnessConfig, out: &Path) -> Result<(String, bool)> {
    let report = check_former_and_loss(cfg.seed, cfg.gradcheck_step)?;
    let worst = report.worst.as_ref().map_or("-".to_string(), |(n, k)| format!("{n}[{k}]"));
    let text = format!(
        "max relative error: {:e}\ncoordinates: {}\nworst: {worst}\n",
        report.max_rel_error, report.coordinates
    );
    write_file(&out.join("gradcheck.txt"), &text)?;
    Ok((text.trim_end().to_string(), report.max_rel_error < GRADCHECK_TOLERANCE))
}

fn run_export(cfg: &HarnessConfig, out: &Path) -> Result<String> {
    let (model, store) = load_model(cfg)?;
    let seq = track_plan(cfg)?.to_sequence();
    let traces = trace_pair(&model, &store, &seq)?;
    let key_grid = match model.config.key_source {
        sft_core::gpha::KeySource::Search => model.config.search_grid(),
        sft_core::gpha::KeySource::Template => model.config.template_grid(),
    };
    let files = export_attention(&traces, key_grid, out)?;
    Ok(format!("wrote {} files", files.len()))
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    match execute(&cli) {
        Ok((msg, ok)) => {
            println!("{msg}");
            if ok {
                0
            } else {
                1
            }
        }
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: &Cli) -> Result<(String, bool)> {
    let mut raw = RawConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        raw.set("seed", seed);
    }
    let cfg = HarnessConfig::from_raw(&raw)?;
    std::fs::create_dir_all(&cli.out).map_err(|e| HarnessError::io(&cli.out, e))?;
    let out = cli.out.as_path();
    match cli.command {
        Command::Train => run_train(&cfg, out).map(|m| (m, true)),
        Command::Track => run_track(&cfg, out).map(|m| (m, true)),
        Command::Eval => run_eval(&cfg, out).map(|m| (m, true)),
        Command::Spectrum => run_spectrum(&cfg, out).map(|m| (m, true)),
        Command::Gradcheck => run_gradcheck(&cfg, out),
        Command::ExportAttn => run_export(&cfg, out).map(|m| (m, true)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_subcommand_is_a_usage_error() {
        assert_eq!(run(["sft", "frobnicate"]), 2);
        assert_eq!(run(["sft"]), 2);
    }

    #[test]
    fn missing_config_is_a_config_error() {
        assert_eq!(run(["sft", "spectrum", "--config", "/nonexistent/sft.cfg"]), 2);
    }
}
