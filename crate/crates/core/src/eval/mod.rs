//! Online evaluation: stream each clip frame by frame with fresh banks and
//! score the per-frame predictions.

pub mod metrics;
pub mod report;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::{self, load_clip, resize::nearest_mask, Clip};
use crate::error::{IoContext, Result};
use crate::model::{BleedNet, FrameInput, Phase};
use crate::pointbranch::flow::{source_for_clip, FlowSource};
use crate::pointbranch::PointPrediction;
use crate::train::step::PreparedClip;
use crate::types::BinaryMask;
use crate::viz;

pub use metrics::{area_rate, dice_score, iou, pck, point_correct, ExistenceCounts};
pub use report::{validate_report, ClipReport, EvalReport, MetricSummary, SkippedClip, REPORT_SCHEMA_VERSION};

/// One frame's output at the clip's own resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePrediction {
    pub frame_index: usize,
    pub mask: BinaryMask,
    pub point: PointPrediction,
}

pub trait Predictor {
    fn name(&self) -> &str;
    fn predict(&self, clip: &Clip, flow: &FlowSource) -> Result<Vec<FramePrediction>>;
}

/// Runs the detector online over a clip with banks reset at the start.
pub struct ModelPredictor<'a> {
    pub model: &'a BleedNet,
}

impl Predictor for ModelPredictor<'_> {
    fn name(&self) -> &str {
        "model"
    }

    fn predict(&self, clip: &Clip, flow: &FlowSource) -> Result<Vec<FramePrediction>> {
        let (h, w) = clip.dims();
        let prepared = PreparedClip::new(clip, &self.model.config, flow, self.model.store.dtype())?;
        let mut stream = self.model.new_stream();
        let mut out = Vec::with_capacity(clip.len());
        for (k, (frame, _)) in prepared.clip.frames.iter().enumerate() {
            let input = FrameInput {
                frame,
                flow: prepared.flow_into(k),
                forced_mask: None,
            };
            let o = self.model.step(&mut stream, input, Phase::Infer)?;
            out.push(FramePrediction {
                frame_index: frame.frame_index,
                mask: nearest_mask(&o.mask.mask, h, w),
                point: o.prediction,
            });
        }
        Ok(out)
    }
}

/// Replays the ground truth; the upper bound of every metric.
pub struct GroundTruthPredictor;

impl Predictor for GroundTruthPredictor {
    fn name(&self) -> &str {
        "ground_truth"
    }

    fn predict(&self, clip: &Clip, _flow: &FlowSource) -> Result<Vec<FramePrediction>> {
        let (h, w) = clip.dims();
        Ok(clip
            .frames
            .iter()
            .map(|(f, a)| FramePrediction {
                frame_index: f.frame_index,
                mask: a.mask_or_empty(h, w),
                point: PointPrediction {
                    coord: a.point.map_or([0.5, 0.5], |p| [p.x / w as f64, p.y / h as f64]),
                    score: if a.has_point { 1.0 } else { 0.0 },
                    frame_index: f.frame_index,
                },
            })
            .collect())
    }
}

/// Predicts nothing on every frame; the lower bound.
pub struct EmptyPredictor;

impl Predictor for EmptyPredictor {
    fn name(&self) -> &str {
        "empty"
    }

    fn predict(&self, clip: &Clip, _flow: &FlowSource) -> Result<Vec<FramePrediction>> {
        let (h, w) = clip.dims();
        Ok(clip
            .frames
            .iter()
            .map(|(f, _)| FramePrediction {
                frame_index: f.frame_index,
                mask: ndarray::Array2::from_elem((h, w), false),
                point: PointPrediction {
                    coord: [0.5, 0.5],
                    score: 0.0,
                    frame_index: f.frame_index,
                },
            })
            .collect())
    }
}

/// Running sums for one clip or the whole split.
#[derive(Debug, Clone, Default)]
pub struct Accumulator {
    frames: usize,
    iou_sum: f64,
    dice_sum: f64,
    mask_frames: usize,
    pck_correct: Vec<usize>,
    pck_frames: usize,
    fp_area_sum: f64,
    empty_frames: usize,
    existence: ExistenceCounts,
}

impl Accumulator {
    pub fn new(n_thresholds: usize) -> Self {
        Self {
            pck_correct: vec![0; n_thresholds],
            ..Default::default()
        }
    }

    pub fn add_frame(&mut self, pred: &FramePrediction, clip: &Clip, pos: usize, cfg: &ModelConfig) {
        let (h, w) = clip.dims();
        let ann = &clip.frames[pos].1;
        let gt = ann.mask_or_empty(h, w);
        self.frames += 1;
        if ann.has_region {
            self.iou_sum += iou(&pred.mask, &gt);
            self.dice_sum += dice_score(&pred.mask, &gt);
            self.mask_frames += 1;
        } else {
            self.fp_area_sum += area_rate(&pred.mask);
            self.empty_frames += 1;
        }
        if ann.has_point {
            self.pck_frames += 1;
            for (i, &k) in cfg.pck_thresholds.iter().enumerate() {
                if point_correct(&pred.point, ann, k, (h, w), cfg.existence_threshold) == Some(true) {
                    self.pck_correct[i] += 1;
                }
            }
        }
        self.existence.add(pred.point.present(cfg.existence_threshold), ann.has_point);
    }

    pub fn merge(&mut self, o: &Accumulator) {
        self.frames += o.frames;
        self.iou_sum += o.iou_sum;
        self.dice_sum += o.dice_sum;
        self.mask_frames += o.mask_frames;
        for (a, b) in self.pck_correct.iter_mut().zip(&o.pck_correct) {
            *a += b;
        }
        self.pck_frames += o.pck_frames;
        self.fp_area_sum += o.fp_area_sum;
        self.empty_frames += o.empty_frames;
        self.existence.merge(&o.existence);
    }

    pub fn summary(&self, thresholds: &[f64]) -> MetricSummary {
        let mean = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
        MetricSummary {
            frames: self.frames,
            iou: mean(self.iou_sum, self.mask_frames),
            dice: mean(self.dice_sum, self.mask_frames),
            mask_frames: self.mask_frames,
            pck: thresholds
                .iter()
                .zip(&self.pck_correct)
                .map(|(k, &c)| (report::pck_key(*k), mean(c as f64, self.pck_frames)))
                .collect(),
            pck_frames: self.pck_frames,
            fp_area_rate: mean(self.fp_area_sum, self.empty_frames),
            empty_frames: self.empty_frames,
            existence_precision: self.existence.precision(),
            existence_recall: self.existence.recall(),
            existence: self.existence,
        }
    }
}

/// Where evaluation writes per-frame artifacts.
#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOutputs<'a> {
    /// `<dir>/<clip>/<frame>_pred.png`
    pub overlays: Option<&'a Path>,
    /// Infer-style masks and points per clip.
    pub predictions: Option<&'a Path>,
}

/// Scores one clip's predictions.
pub fn score_clip(clip: &Clip, preds: &[FramePrediction], cfg: &ModelConfig) -> Accumulator {
    let mut acc = Accumulator::new(cfg.pck_thresholds.len());
    for (pos, p) in preds.iter().enumerate() {
        acc.add_frame(p, clip, pos, cfg);
    }
    acc
}

/// Evaluates a predictor over already-loaded clips.
pub fn evaluate_clips(
    predictor: &dyn Predictor,
    clips: &[(Clip, FlowSource)],
    cfg: &ModelConfig,
    split: &str,
    outputs: EvalOutputs<'_>,
) -> Result<EvalReport> {
    let mut order: Vec<usize> = (0..clips.len()).collect();
    order.sort_by(|&a, &b| clips[a].0.clip_id.cmp(&clips[b].0.clip_id));
    let mut total = Accumulator::new(cfg.pck_thresholds.len());
    let mut per_clip = Vec::with_capacity(clips.len());
    for i in order {
        let (clip, flow) = &clips[i];
        let preds = predictor.predict(clip, flow)?;
        let acc = score_clip(clip, &preds, cfg);
        total.merge(&acc);
        per_clip.push(ClipReport {
            clip_id: clip.clip_id.clone(),
            metrics: acc.summary(&cfg.pck_thresholds),
        });
        if let Some(dir) = outputs.overlays {
            write_overlays(dir, clip, &preds, cfg)?;
        }
        if let Some(dir) = outputs.predictions {
            write_predictions(dir, clip, &preds, cfg)?;
        }
    }
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        predictor: predictor.name().to_string(),
        split: split.to_string(),
        config_hash: cfg.hash_hex(),
        pck_thresholds: cfg.pck_thresholds.clone(),
        existence_threshold: cfg.existence_threshold,
        aggregate: total.summary(&cfg.pck_thresholds),
        clips: per_clip,
        skipped: Vec::new(),
    })
}

/// Loads the named clips from a dataset root and evaluates them. Clips that
/// fail to load are listed in the report and skipped.
pub fn evaluate(
    predictor: &dyn Predictor,
    root: &Path,
    clip_ids: &[String],
    cfg: &ModelConfig,
    split: &str,
    outputs: EvalOutputs<'_>,
) -> Result<EvalReport> {
    let mut loaded = Vec::new();
    let mut skipped = Vec::new();
    for id in clip_ids {
        let attempt = load_clip(root, id).and_then(|c| {
            let src = source_for_clip(&cfg.flow, root, &c)?;
            Ok((c, src))
        });
        match attempt {
            Ok(pair) => loaded.push(pair),
            Err(e) => skipped.push(SkippedClip {
                clip_id: id.clone(),
                reason: e.to_string(),
            }),
        }
    }
    skipped.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
    let mut report = evaluate_clips(predictor, &loaded, cfg, split, outputs)?;
    report.skipped = skipped;
    Ok(report)
}

pub fn write_overlays(dir: &Path, clip: &Clip, preds: &[FramePrediction], cfg: &ModelConfig) -> Result<()> {
    let out = dir.join(&clip.clip_id);
    std::fs::create_dir_all(&out).at(&out)?;
    let (h, w) = clip.dims();
    for ((frame, ann), p) in clip.frames.iter().zip(preds) {
        let pred_point = p.point.present(cfg.existence_threshold).then(|| p.point.pixel(h, w));
        let img = viz::overlay(frame, &p.mask, ann.mask.as_ref(), pred_point, ann.point);
        img.save(out.join(format!("{:06}_pred.png", frame.frame_index)))?;
    }
    Ok(())
}

/// One line of `points.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PointRecord {
    pub idx: usize,
    /// Pixel coordinates, `null` when the detector declares no point.
    pub point: Option<[f64; 2]>,
    pub score: f64,
}

/// Writes `<dir>/<clip>/masks/%06d.png` and `<dir>/<clip>/points.jsonl`.
pub fn write_predictions(dir: &Path, clip: &Clip, preds: &[FramePrediction], cfg: &ModelConfig) -> Result<()> {
    let out = dir.join(&clip.clip_id);
    let masks = out.join("masks");
    std::fs::create_dir_all(&masks).at(&masks)?;
    let (h, w) = clip.dims();
    let mut lines = String::new();
    for p in preds {
        data::mask_to_image(&p.mask).save(masks.join(data::frame_file(p.frame_index)))?;
        let point = p.point.present(cfg.existence_threshold).then(|| {
            let q = p.point.pixel(h, w);
            [q.x, q.y]
        });
        let rec = PointRecord {
            idx: p.frame_index,
            point,
            score: p.point.score,
        };
        lines.push_str(&serde_json::to_string(&rec)?);
        lines.push('\n');
    }
    let path = out.join("points.jsonl");
    std::fs::write(&path, lines).at(&path)
}

/// Reads what [`write_predictions`] wrote for one clip.
pub fn read_predictions(clip_dir: &Path) -> Result<Vec<(PointRecord, BinaryMask)>> {
    let path = clip_dir.join("points.jsonl");
    let text = std::fs::read_to_string(&path).at(&path)?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let rec: PointRecord = serde_json::from_str(line)?;
        let mask = data::read_mask(&clip_dir.join("masks").join(data::frame_file(rec.idx)))?;
        out.push((rec, mask));
    }
    Ok(out)
}

pub fn evaluate_model(
    model: &BleedNet,
    root: &Path,
    clip_ids: &[String],
    split: &str,
    outputs: EvalOutputs<'_>,
) -> Result<EvalReport> {
    evaluate(&ModelPredictor { model }, root, clip_ids, &model.config, split, outputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_clip, MotionProfile, SynthSpec};
    use crate::rng::SeededRng;

    fn clips(n: usize) -> Vec<(Clip, FlowSource)> {
        let rng = SeededRng::new(3);
        (0..n)
            .map(|i| {
                let mut r = rng.split_index("clip", i as u64);
                let spec = SynthSpec::from_profile(MotionProfile::Translate, 10, (32, 32), &mut r);
                let (c, flows) = synth_clip(&spec, &format!("clip{i:02}"), &mut r).unwrap();
                (c, FlowSource::Injected(flows))
            })
            .collect()
    }

    fn cfg() -> ModelConfig {
        ModelConfig::default()
    }

    #[test]
    fn ground_truth_is_perfect() {
        let c = clips(3);
        let r = evaluate_clips(&GroundTruthPredictor, &c, &cfg(), "test", EvalOutputs::default()).unwrap();
        let a = &r.aggregate;
        assert_eq!(a.iou, Some(1.0));
        assert_eq!(a.dice, Some(1.0));
        for v in a.pck.values() {
            assert_eq!(*v, Some(1.0));
        }
        assert_eq!(a.existence_precision, Some(1.0));
        assert_eq!(a.existence_recall, Some(1.0));
        assert_eq!(a.fp_area_rate.unwrap_or(0.0), 0.0);
        validate_report(&serde_json::to_value(&r).unwrap()).unwrap();
    }

    #[test]
    fn empty_is_lower_bound() {
        let c = clips(2);
        let r = evaluate_clips(&EmptyPredictor, &c, &cfg(), "test", EvalOutputs::default()).unwrap();
        let a = &r.aggregate;
        assert_eq!(a.iou, Some(0.0));
        assert_eq!(a.dice, Some(0.0));
        for v in a.pck.values() {
            assert_eq!(*v, Some(0.0));
        }
        assert_eq!(a.existence_recall, Some(0.0));
        assert_eq!(a.existence_precision, None);
    }

    #[test]
    fn clip_order_does_not_matter() {
        let c = clips(4);
        let a = evaluate_clips(&GroundTruthPredictor, &c, &cfg(), "t", EvalOutputs::default()).unwrap();
        let mut rev = c.clone();
        rev.reverse();
        let b = evaluate_clips(&GroundTruthPredictor, &rev, &cfg(), "t", EvalOutputs::default()).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn aggregate_is_frame_weighted() {
        let c = clips(3);
        let r = evaluate_clips(&GroundTruthPredictor, &c, &cfg(), "t", EvalOutputs::default()).unwrap();
        let frames: usize = r.clips.iter().map(|c| c.metrics.frames).sum();
        assert_eq!(frames, r.aggregate.frames);
        let mf: usize = r.clips.iter().map(|c| c.metrics.mask_frames).sum();
        assert_eq!(mf, r.aggregate.mask_frames);
    }

    #[test]
    fn predictions_round_trip() {
        let c = clips(1);
        let dir = tempfile::tempdir().unwrap();
        let out = EvalOutputs {
            overlays: Some(&dir.path().join("ov")),
            predictions: Some(&dir.path().join("pred")),
        };
        evaluate_clips(&GroundTruthPredictor, &c, &cfg(), "t", out).unwrap();
        let back = read_predictions(&dir.path().join("pred").join("clip00")).unwrap();
        assert_eq!(back.len(), c[0].0.len());
        let n = std::fs::read_dir(dir.path().join("ov").join("clip00")).unwrap().count();
        assert_eq!(n, c[0].0.len());
        for ((rec, m), (_, ann)) in back.iter().zip(&c[0].0.frames) {
            assert_eq!(rec.point.is_some(), ann.has_point);
            assert_eq!(*m, ann.mask_or_empty(32, 32));
        }
    }
}
