//! Epoch loop: shuffled windows, per-epoch evaluation, checkpoints and the
//! JSON-lines metrics log.

use std::collections::BTreeMap;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::{load_clip, load_splits, window_sampler};
use crate::error::{Error, IoContext, Result};
use crate::eval::{evaluate_model, EvalOutputs, MetricSummary};
use crate::model::BleedNet;
use crate::pointbranch::flow::source_for_clip;
use crate::rng::SeededRng;
use crate::train::checkpoint::{load_checkpoint, load_into, save_checkpoint};
use crate::train::step::{alternating_step, OptimState, PreparedClip, StepReport, WindowRef};

/// Model, optimizer state and the windows of the training clips.
#[derive(Debug)]
pub struct Trainer {
    pub model: BleedNet,
    pub state: OptimState,
    pub clips: Vec<PreparedClip>,
    windows: Vec<(usize, RangeInclusive<usize>)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub steps: usize,
    pub loss_mask: f64,
    pub loss_point: f64,
    pub lr_factor: f64,
}

impl Trainer {
    pub fn new(model: BleedNet, clips: Vec<PreparedClip>) -> Result<Self> {
        let n = model.config.window_size;
        let windows: Vec<_> = clips
            .iter()
            .enumerate()
            .flat_map(|(i, c)| window_sampler(c.clip.len(), n).into_iter().map(move |r| (i, r)))
            .collect();
        if windows.is_empty() {
            return Err(Error::Input("no training windows".into()));
        }
        let tp = &model.config.train;
        let total = if tp.total_steps > 0 {
            tp.total_steps
        } else {
            (tp.epochs * windows.len()) as u64
        };
        if total < 2 {
            return Err(Error::Input("training needs at least 2 steps".into()));
        }
        let state = OptimState::new(&model, total)?;
        Ok(Self {
            model,
            state,
            clips,
            windows,
        })
    }

    pub fn windows_per_epoch(&self) -> usize {
        self.windows.len()
    }

    pub fn finished(&self) -> bool {
        self.state.step >= self.state.total_steps
    }

    /// Window visiting order for a 1-based epoch.
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.windows.len()).collect();
        SeededRng::new(self.model.config.seed)
            .split_index("data", epoch as u64)
            .shuffle(&mut order);
        order
    }

    /// Runs one epoch, stopping early at the step cap.
    pub fn run_epoch(&mut self, epoch: usize, mut on_step: impl FnMut(&StepReport)) -> Result<EpochStats> {
        let mut sum_m = 0.0;
        let mut sum_p = 0.0;
        let mut steps = 0;
        let mut lr = 0.0;
        for i in self.epoch_order(epoch) {
            if self.finished() {
                break;
            }
            let (c, range) = &self.windows[i];
            let w = WindowRef {
                clip: &self.clips[*c],
                range,
            };
            let r = alternating_step(&self.model, &w, &mut self.state)?;
            on_step(&r);
            sum_m += r.loss_mask;
            sum_p += r.loss_point;
            lr = r.lr_factor;
            steps += 1;
        }
        let n = steps.max(1) as f64;
        Ok(EpochStats {
            steps,
            loss_mask: sum_m / n,
            loss_point: sum_p / n,
            lr_factor: lr,
        })
    }
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub steps_in_epoch: usize,
    pub loss_mask: f64,
    pub loss_point: f64,
    pub lr_factor: f64,
    /// Aggregate metrics on the held-out split, absent when it is empty.
    pub eval: Option<MetricSummary>,
    pub selection_score: f64,
    pub best: bool,
}

/// One line of `steps.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub loss_mask: f64,
    pub loss_point: f64,
    pub lr_factor: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub last: PathBuf,
    pub best: PathBuf,
    pub metrics: PathBuf,
    pub records: Vec<EpochRecord>,
}

pub fn checkpoint_dir(out: &Path) -> PathBuf {
    out.join("checkpoints")
}

/// Loads and prepares the clips named in a split.
pub fn prepare_split(cfg: &ModelConfig, root: &Path, ids: &[String], dtype: DType) -> Result<Vec<PreparedClip>> {
    let mut ids = ids.to_vec();
    ids.sort();
    ids.iter()
        .map(|id| {
            let clip = load_clip(root, id)?;
            let flow = source_for_clip(&cfg.flow, root, &clip)?;
            PreparedClip::new(&clip, cfg, &flow, dtype)
        })
        .collect()
}

/// Higher is better: mean of IoU and the widest-threshold PCK on the held-out
/// split, or the negated training loss when there is none.
fn selection_score(eval: Option<&MetricSummary>, stats: &EpochStats, cfg: &ModelConfig) -> f64 {
    match eval {
        Some(m) => {
            let widest = cfg.pck_thresholds.iter().copied().fold(f64::NAN, f64::max);
            0.5 * (m.iou.unwrap_or(0.0) + m.pck_at(widest).unwrap_or(0.0))
        }
        None => -(stats.loss_mask + stats.loss_point),
    }
}

fn read_records(path: &Path) -> Result<Vec<EpochRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path).at(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

fn write_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it)?);
        s.push('\n');
    }
    std::fs::write(path, s).at(path)
}

fn dump_abort(out: &Path, trainer: &Trainer, epoch: usize, err: &Error) -> Result<PathBuf> {
    let dir = out.join(format!("abort_step_{:06}", trainer.state.step + 1));
    std::fs::create_dir_all(&dir).at(&dir)?;
    save_checkpoint(&dir.join("state.safetensors"), &trainer.model, Some(&trainer.state), epoch, &BTreeMap::new())?;
    let diag = serde_json::json!({
        "epoch": epoch,
        "step": trainer.state.step + 1,
        "error": err.to_string(),
    });
    let path = dir.join("diagnostic.json");
    std::fs::write(&path, serde_json::to_string_pretty(&diag)? + "\n").at(&path)?;
    Ok(dir)
}

/// Trains on the `train` split of a dataset, evaluating on `test` after each
/// epoch. Writes `metrics.jsonl`, `steps.jsonl` and checkpoints under `out`.
pub fn train(cfg: &ModelConfig, root: &Path, out: &Path, opts: &TrainOptions) -> Result<TrainOutcome> {
    let splits = load_splits(root)?;
    let dtype = DType::F32;
    let clips = prepare_split(cfg, root, &splits.train, dtype)?;
    let mut test_ids = splits.test.clone();
    test_ids.sort();

    let model = BleedNet::new(cfg, dtype)?;
    let mut trainer = Trainer::new(model, clips)?;
    let ck_dir = checkpoint_dir(out);
    std::fs::create_dir_all(&ck_dir).at(&ck_dir)?;
    let metrics_path = out.join("metrics.jsonl");
    let steps_path = out.join("steps.jsonl");

    let mut records = Vec::new();
    let mut step_log: Vec<StepRecord> = Vec::new();
    let mut start_epoch = 1;
    let mut best_score = f64::NEG_INFINITY;
    if let Some(path) = &opts.resume {
        let ck = load_checkpoint(path)?;
        if ck.config.hash_hex() != cfg.hash_hex() {
            return Err(Error::Checkpoint(format!(
                "{} was written with a different config",
                path.display()
            )));
        }
        load_into(&trainer.model, &ck)?;
        trainer.state.opt_a.load_state(&ck.optimizer_a, ck.optimizer_a_steps)?;
        trainer.state.opt_b.load_state(&ck.optimizer_b, ck.optimizer_b_steps)?;
        trainer.state.step = ck.step;
        start_epoch = ck.epoch + 1;
        best_score = ck
            .metadata
            .get("best_score")
            .and_then(|s| s.parse().ok())
            .unwrap_or(f64::NEG_INFINITY);
        records = read_records(&metrics_path)?;
        records.retain(|r| r.epoch <= ck.epoch);
        if steps_path.exists() {
            let text = std::fs::read_to_string(&steps_path).at(&steps_path)?;
            for l in text.lines().filter(|l| !l.trim().is_empty()) {
                let r: StepRecord = serde_json::from_str(l)?;
                if r.step <= ck.step {
                    step_log.push(r);
                }
            }
        }
    }

    let last = ck_dir.join("last.safetensors");
    let best = ck_dir.join("best.safetensors");
    for epoch in start_epoch..=cfg.train.epochs {
        if trainer.finished() {
            break;
        }
        let stats = match trainer.run_epoch(epoch, |r| {
            step_log.push(StepRecord {
                epoch,
                step: r.step,
                loss_mask: r.loss_mask,
                loss_point: r.loss_point,
                lr_factor: r.lr_factor,
            })
        }) {
            Ok(s) => s,
            Err(e @ Error::NonFiniteLoss { .. }) => {
                write_lines(&steps_path, &step_log)?;
                let dump = dump_abort(out, &trainer, epoch, &e)?;
                return Err(Error::TrainingAborted {
                    dump,
                    reason: e.to_string(),
                });
            }
            Err(e) => return Err(e),
        };
        let eval = if test_ids.is_empty() {
            None
        } else {
            Some(evaluate_model(&trainer.model, root, &test_ids, "test", EvalOutputs::default())?.aggregate)
        };
        let score = selection_score(eval.as_ref(), &stats, cfg);
        let is_best = score > best_score;
        if is_best {
            best_score = score;
        }
        records.push(EpochRecord {
            epoch,
            step: trainer.state.step,
            steps_in_epoch: stats.steps,
            loss_mask: stats.loss_mask,
            loss_point: stats.loss_point,
            lr_factor: stats.lr_factor,
            eval,
            selection_score: score,
            best: is_best,
        });
        let extra: BTreeMap<String, String> = [("best_score".to_string(), format!("{best_score:e}"))].into();
        let epoch_path = ck_dir.join(format!("epoch_{epoch:04}.safetensors"));
        save_checkpoint(&epoch_path, &trainer.model, Some(&trainer.state), epoch, &extra)?;
        std::fs::copy(&epoch_path, &last).at(&last)?;
        if is_best {
            std::fs::copy(&epoch_path, &best).at(&best)?;
        }
        write_lines(&metrics_path, &records)?;
        write_lines(&steps_path, &step_log)?;
    }
    if !last.exists() {
        return Err(Error::Input("no epoch ran; nothing to checkpoint".into()));
    }
    Ok(TrainOutcome {
        last,
        best,
        metrics: metrics_path,
        records,
    })
}
