//! Command-line front end: `synth`, `train`, `eval`, `infer`, `viz`.
//!
//! Exit codes: 0 on success, 1 for usage and configuration errors, 2 for
//! runtime aborts. The last line on stdout is always the main output path.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::DType;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{load_config_with_env, ModelConfig};
use crate::data::synth::{synth_clip, MotionProfile, SynthSpec};
use crate::data::{self, load_clip, load_splits, write_clip, write_flow_sidecars, write_splits, Splits};
use crate::error::{Error, IoContext, Result};
use crate::eval::{
    evaluate, read_predictions, write_predictions, EmptyPredictor, EvalOutputs, FramePrediction, GroundTruthPredictor,
    ModelPredictor, Predictor,
};
use crate::model::{BleedNet, FrameInput, Phase};
use crate::nn::sigmoid;
use crate::pointbranch::flow::source_for_clip;
use crate::rng::SeededRng;
use crate::train::checkpoint::{load_checkpoint, load_into, model_from_checkpoint};
use crate::train::run::{train, EpochRecord, TrainOptions};
use crate::train::step::PreparedClip;
use crate::types::Point;
use crate::viz::{self, Series};

#[derive(Debug, Parser)]
#[command(name = "bleedscope", version, about = "Bleeding region and bleeding point detection in surgical video")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with ground-truth flow sidecars.
    Synth(SynthArgs),
    /// Train on the `train` split, evaluating on `test` after every epoch.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Run one clip online and write masks and points.
    Infer(InferArgs),
    /// Overlay predictions on frames and plot the training curves.
    Viz(VizArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub clips: usize,
    #[arg(long, default_value_t = 32)]
    pub frames: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "translate")]
    pub motion: MotionProfile,
    /// Square frame side in pixels.
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    /// Clips assigned to the test split; defaults to a quarter.
    #[arg(long)]
    pub test_clips: Option<usize>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PredictorKind {
    Model,
    /// Replays the annotations (debugging upper bound).
    GroundTruth,
    Empty,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Write one overlay PNG per frame.
    #[arg(long)]
    pub overlays: bool,
    #[arg(long, value_enum, default_value_t = PredictorKind::Model)]
    pub predictor: PredictorKind,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A clip directory in the dataset layout (`<root>/clips/<id>`).
    #[arg(long)]
    pub clip: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Expected config; inference refuses a checkpoint with another architecture.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Also write edge-prompt and point-attention maps and the flow fields.
    #[arg(long)]
    pub debug_dump: bool,
}

#[derive(Debug, Args)]
pub struct VizArgs {
    /// Directory of per-clip predictions as written by `infer` or `eval`.
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Training metrics log; defaults to `<pred>/metrics.jsonl` when present.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    /// Resolved parameters; the output directory is where this file lives.
    params: serde_json::Value,
    package: &'static str,
    version: &'static str,
    seed: Option<u64>,
    config_hash: Option<String>,
    config: Option<String>,
    dependencies: BTreeMap<&'static str, &'static str>,
}

fn write_manifest(
    dir: &Path,
    command: &str,
    params: serde_json::Value,
    cfg: Option<&ModelConfig>,
    seed: Option<u64>,
) -> Result<()> {
    std::fs::create_dir_all(dir).at(dir)?;
    let m = Manifest {
        command,
        params,
        package: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        seed: seed.or(cfg.map(|c| c.seed)),
        config_hash: cfg.map(|c| c.hash_hex()),
        config: cfg.map(|c| c.to_text()),
        dependencies: [
            ("candle-core", "0.11"),
            ("image", "0.25"),
            ("safetensors", "0.8"),
            ("rand_chacha", "0.9"),
        ]
        .into(),
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&m)? + "\n").at(&path)
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Input(msg.into())
}

pub fn cmd_synth(a: &SynthArgs) -> Result<PathBuf> {
    if a.clips == 0 || a.frames == 0 {
        return Err(usage("--clips and --frames must be positive"));
    }
    if a.out.exists() {
        let nonempty = std::fs::read_dir(&a.out).at(&a.out)?.next().is_some();
        if nonempty && !a.force {
            return Err(usage(format!(
                "{} is not empty; pass --force to write into it",
                a.out.display()
            )));
        }
    }
    std::fs::create_dir_all(&a.out).at(&a.out)?;
    let rng = SeededRng::new(a.seed).split("synth");
    let n_test = a.test_clips.unwrap_or(a.clips / 4).min(a.clips.saturating_sub(1));
    let mut splits = Splits::default();
    for i in 0..a.clips {
        let id = format!("clip_{i:03}");
        let mut r = rng.split_index("clip", i as u64);
        let spec = SynthSpec::from_profile(a.motion, a.frames, (a.size, a.size), &mut r);
        let (clip, flows) = synth_clip(&spec, &id, &mut r)?;
        write_clip(&a.out, &clip)?;
        write_flow_sidecars(&a.out, &clip, &flows)?;
        if i >= a.clips - n_test {
            splits.test.push(id);
        } else {
            splits.train.push(id);
        }
    }
    write_splits(&a.out, &splits)?;
    let params = serde_json::json!({
        "clips": a.clips,
        "frames": a.frames,
        "seed": a.seed,
        "motion": format!("{:?}", a.motion).to_lowercase(),
        "size": a.size,
        "test_clips": n_test,
    });
    write_manifest(&a.out, "synth", params, None, Some(a.seed))?;
    Ok(a.out.clone())
}

pub fn cmd_train(a: &TrainArgs) -> Result<PathBuf> {
    let cfg = load_config_with_env(a.config.as_deref())?;
    let params = serde_json::json!({ "data": a.data, "config": a.config, "resume": a.resume });
    write_manifest(&a.out, "train", params, Some(&cfg), None)?;
    let outcome = train(
        &cfg,
        &a.data,
        &a.out,
        &TrainOptions {
            resume: a.resume.clone(),
        },
    )?;
    for r in &outcome.records {
        eprintln!(
            "epoch {} step {} L_m {:.4} L_p {:.4}{}",
            r.epoch,
            r.step,
            r.loss_mask,
            r.loss_point,
            if r.best { " (best)" } else { "" }
        );
    }
    println!("{}", outcome.metrics.display());
    Ok(outcome.last)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<PathBuf> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let model = model_from_checkpoint(&ck)?;
    let splits = load_splits(&a.data)?;
    let ids = match a.split.as_str() {
        "train" => splits.train,
        "test" => splits.test,
        other => return Err(usage(format!("unknown split `{other}` (train|test)"))),
    };
    let params = serde_json::json!({
        "checkpoint": a.checkpoint,
        "data": a.data,
        "split": a.split,
        "overlays": a.overlays,
        "predictor": format!("{:?}", a.predictor),
    });
    write_manifest(&a.out, "eval", params, Some(&model.config), None)?;
    let overlay_dir = a.out.join("overlays");
    let pred_dir = a.out.join("predictions");
    let outputs = EvalOutputs {
        overlays: a.overlays.then_some(overlay_dir.as_path()),
        predictions: Some(&pred_dir),
    };
    let predictor: Box<dyn Predictor> = match a.predictor {
        PredictorKind::Model => Box::new(ModelPredictor { model: &model }),
        PredictorKind::GroundTruth => Box::new(GroundTruthPredictor),
        PredictorKind::Empty => Box::new(EmptyPredictor),
    };
    let report = evaluate(predictor.as_ref(), &a.data, &ids, &model.config, &a.split, outputs)?;
    for s in &report.skipped {
        eprintln!("warning: skipped clip {}: {}", s.clip_id, s.reason);
    }
    let path = a.out.join("report.json");
    std::fs::write(&path, report.to_json()?).at(&path)?;
    Ok(path)
}

fn split_clip_dir(dir: &Path) -> Result<(PathBuf, String)> {
    let id = dir
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| usage(format!("{} is not a clip directory", dir.display())))?
        .to_string();
    let root = dir
        .parent()
        .and_then(Path::parent)
        .ok_or_else(|| usage(format!("{} is not inside `<root>/clips/`", dir.display())))?
        .to_path_buf();
    Ok((root, id))
}

fn gray_png(values: &[f32], h: usize, w: usize, path: &Path) -> Result<()> {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = (hi - lo).max(1e-12);
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([((values[y as usize * w + x as usize] - lo) / span * 255.0).round() as u8])
    });
    img.save(path)?;
    Ok(())
}

pub fn cmd_infer(a: &InferArgs) -> Result<PathBuf> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let model = match &a.config {
        Some(p) => {
            let cfg = load_config_with_env(Some(p))?;
            let m = BleedNet::new(&cfg, ck.dtype)?;
            load_into(&m, &ck)?;
            m
        }
        None => model_from_checkpoint(&ck)?,
    };
    let cfg = &model.config;
    let (root, id) = split_clip_dir(&a.clip)?;
    let clip = load_clip(&root, &id)?;
    let flow = source_for_clip(&cfg.flow, &root, &clip)?;
    let params = serde_json::json!({
        "checkpoint": a.checkpoint,
        "clip": a.clip,
        "config": a.config,
        "debug_dump": a.debug_dump,
    });
    write_manifest(&a.out, "infer", params, Some(cfg), None)?;
    let prepared = PreparedClip::new(&clip, cfg, &flow, model.store.dtype())?;
    let (h, w) = clip.dims();
    let debug = a.out.join(&id).join("debug");
    if a.debug_dump {
        std::fs::create_dir_all(&debug).at(&debug)?;
    }
    let mut stream = model.new_stream();
    let mut preds = Vec::with_capacity(clip.len());
    for (k, (frame, _)) in prepared.clip.frames.iter().enumerate() {
        let input = FrameInput {
            frame,
            flow: prepared.flow_into(k),
            forced_mask: None,
        };
        let o = model.step(&mut stream, input, Phase::Infer)?;
        if a.debug_dump {
            let e = sigmoid(&o.mask.edge_logits)?.to_dtype(DType::F32)?;
            let (_, _, eh, ew) = e.dims4()?;
            let name = |s: &str| debug.join(format!("{:06}_{s}.png", frame.frame_index));
            gray_png(&e.flatten_all()?.to_vec1()?, eh, ew, &name("edge"))?;
            let g = cfg.input_resolution / 16;
            let att = o.point.decoded.attention.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
            gray_png(&att, g, g, &name("attention"))?;
            if let Some(f) = prepared.flow_into(k) {
                data::flo::write_flo(&debug.join(format!("{:06}.flo", frame.frame_index)), f)?;
            }
        }
        preds.push(FramePrediction {
            frame_index: frame.frame_index,
            mask: data::resize::nearest_mask(&o.mask.mask, h, w),
            point: o.prediction,
        });
    }
    write_predictions(&a.out, &clip, &preds, cfg)?;
    Ok(a.out.join(&id))
}

fn plot_records(records: &[EpochRecord], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).at(dir)?;
    let series = |name: &str, f: &dyn Fn(&EpochRecord) -> Option<f64>| Series {
        name: name.into(),
        points: records
            .iter()
            .filter_map(|r| f(r).map(|v| (r.epoch as f64, v)))
            .collect(),
    };
    viz::write_plot(
        &dir.join("loss.svg"),
        "Training loss",
        "epoch",
        &[
            series("L_m", &|r| Some(r.loss_mask)),
            series("L_p", &|r| Some(r.loss_point)),
        ],
    )?;
    viz::write_plot(
        &dir.join("iou.svg"),
        "Held-out IoU and Dice",
        "epoch",
        &[
            series("IoU", &|r| r.eval.as_ref().and_then(|m| m.iou)),
            series("Dice", &|r| r.eval.as_ref().and_then(|m| m.dice)),
        ],
    )?;
    let keys: Vec<String> = records
        .iter()
        .find_map(|r| r.eval.as_ref().map(|m| m.pck.keys().cloned().collect()))
        .unwrap_or_default();
    let pck: Vec<Series> = keys
        .iter()
        .map(|k| {
            let label = format!("PCK@{k}");
            series(&label, &|r| r.eval.as_ref().and_then(|m| m.pck.get(k).copied().flatten()))
        })
        .collect();
    viz::write_plot(&dir.join("pck.svg"), "Held-out PCK", "epoch", &pck)
}

pub fn cmd_viz(a: &VizArgs) -> Result<PathBuf> {
    std::fs::create_dir_all(&a.out).at(&a.out)?;
    let params = serde_json::json!({ "pred": a.pred, "data": a.data, "metrics": a.metrics });
    write_manifest(&a.out, "viz", params, None, None)?;
    let mut warnings = Vec::new();
    let mut clip_dirs: Vec<PathBuf> = match std::fs::read_dir(&a.pred) {
        Ok(rd) => rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("points.jsonl").is_file())
            .collect(),
        Err(e) => {
            warnings.push(format!("cannot read {}: {e}", a.pred.display()));
            Vec::new()
        }
    };
    clip_dirs.sort();
    if clip_dirs.is_empty() {
        warnings.push(format!("no predictions under {}", a.pred.display()));
    }
    for dir in &clip_dirs {
        let id = dir.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let clip = match load_clip(&a.data, &id) {
            Ok(c) => c,
            Err(e) => {
                warnings.push(format!("clip {id}: {e}"));
                continue;
            }
        };
        let out = a.out.join(&id);
        std::fs::create_dir_all(&out).at(&out)?;
        for (rec, mask) in read_predictions(dir)? {
            let Some((frame, ann)) = clip.frames.iter().find(|(f, _)| f.frame_index == rec.idx) else {
                warnings.push(format!("clip {id}: prediction for frame {} has no frame", rec.idx));
                continue;
            };
            if mask.dim() != (frame.height(), frame.width()) {
                warnings.push(format!("clip {id}: frame {} mask size differs", rec.idx));
                continue;
            }
            let p = rec.point.map(|[x, y]| Point::new(x, y));
            viz::overlay(frame, &mask, ann.mask.as_ref(), p, ann.point)
                .save(out.join(format!("{:06}_pred.png", rec.idx)))?;
        }
    }
    let metrics = a.metrics.clone().or_else(|| {
        let p = a.pred.join("metrics.jsonl");
        p.is_file().then_some(p)
    });
    if let Some(path) = metrics {
        let text = std::fs::read_to_string(&path).at(&path)?;
        let records: Vec<EpochRecord> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        plot_records(&records, &a.out.join("plots"))?;
    }
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    Ok(a.out.clone())
}

/// Exit code for an error: 1 for bad usage or configuration, 2 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::ConfigParse { .. } | Error::ConfigValidation { .. } | Error::Input(_) => 1,
        _ => 2,
    }
}

pub fn run(cli: Cli) -> Result<PathBuf> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Infer(a) => cmd_infer(&a),
        Command::Viz(a) => cmd_viz(&a),
    }
}

/// Parses `std::env::args`, runs the command and returns the exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(path) => {
            println!("{}", path.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::TrainingAborted { dump, .. } = &e {
                println!("{}", dump.display());
            }
            exit_code(&e)
        }
    }
}
