//! Evaluation report types and their JSON schema check.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::eval::ExistenceCounts;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// JSON key for a PCK threshold, e.g. `0.05`.
pub fn pck_key(k: f64) -> String {
    format!("{k}")
}

/// Metrics over a set of frames. Absent values mean no eligible frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub frames: usize,
    /// Mean over frames with a nonempty ground-truth mask.
    pub iou: Option<f64>,
    pub dice: Option<f64>,
    pub mask_frames: usize,
    pub pck: BTreeMap<String, Option<f64>>,
    pub pck_frames: usize,
    /// Mean predicted area fraction over frames with an empty ground truth.
    pub fp_area_rate: Option<f64>,
    pub empty_frames: usize,
    pub existence_precision: Option<f64>,
    pub existence_recall: Option<f64>,
    pub existence: ExistenceCounts,
}

impl MetricSummary {
    pub fn pck_at(&self, k: f64) -> Option<f64> {
        self.pck.get(&pck_key(k)).copied().flatten()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipReport {
    pub clip_id: String,
    pub metrics: MetricSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedClip {
    pub clip_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub predictor: String,
    pub split: String,
    pub config_hash: String,
    pub pck_thresholds: Vec<f64>,
    pub existence_threshold: f64,
    pub aggregate: MetricSummary,
    /// Sorted by clip id.
    pub clips: Vec<ClipReport>,
    pub skipped: Vec<SkippedClip>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

fn bad(path: &str, why: impl Into<String>) -> Error {
    Error::Input(format!("report schema: `{path}` {}", why.into()))
}

fn field<'a>(obj: &'a Value, path: &str, key: &str) -> Result<&'a Value> {
    obj.get(key).ok_or_else(|| bad(&format!("{path}.{key}"), "is missing"))
}

fn count(obj: &Value, path: &str, key: &str) -> Result<u64> {
    field(obj, path, key)?
        .as_u64()
        .ok_or_else(|| bad(&format!("{path}.{key}"), "must be a nonnegative integer"))
}

fn unit_or_null(obj: &Value, path: &str, key: &str) -> Result<Option<f64>> {
    let v = field(obj, path, key)?;
    if v.is_null() {
        return Ok(None);
    }
    let x = v
        .as_f64()
        .ok_or_else(|| bad(&format!("{path}.{key}"), "must be a number or null"))?;
    if !(0.0..=1.0).contains(&x) {
        return Err(bad(&format!("{path}.{key}"), format!("= {x} is outside [0, 1]")));
    }
    Ok(Some(x))
}

fn check_summary(v: &Value, path: &str, thresholds: &[f64]) -> Result<()> {
    if !v.is_object() {
        return Err(bad(path, "must be an object"));
    }
    let frames = count(v, path, "frames")?;
    let mask_frames = count(v, path, "mask_frames")?;
    let pck_frames = count(v, path, "pck_frames")?;
    let empty_frames = count(v, path, "empty_frames")?;
    if mask_frames + empty_frames != frames {
        return Err(bad(path, "mask_frames + empty_frames must equal frames"));
    }
    if pck_frames > frames {
        return Err(bad(path, "pck_frames exceeds frames"));
    }
    for (key, n) in [("iou", mask_frames), ("dice", mask_frames), ("fp_area_rate", empty_frames)] {
        if unit_or_null(v, path, key)?.is_some() != (n > 0) {
            return Err(bad(&format!("{path}.{key}"), "must be present exactly when it has eligible frames"));
        }
    }
    unit_or_null(v, path, "existence_precision")?;
    unit_or_null(v, path, "existence_recall")?;
    let ex = field(v, path, "existence")?;
    let ex_path = format!("{path}.existence");
    let total: u64 = ["tp", "fp", "fn", "tn"]
        .iter()
        .map(|k| count(ex, &ex_path, k))
        .sum::<Result<u64>>()?;
    if total != frames {
        return Err(bad(&ex_path, "counts must sum to frames"));
    }
    let pck = field(v, path, "pck")?;
    let pck_path = format!("{path}.pck");
    let mut prev: Option<f64> = None;
    for &k in thresholds {
        let val = unit_or_null(pck, &pck_path, &pck_key(k))?;
        if val.is_some() != (pck_frames > 0) {
            return Err(bad(&pck_path, "must be present exactly when pck_frames > 0"));
        }
        if let (Some(a), Some(b)) = (prev, val) {
            if b < a {
                return Err(bad(&pck_path, "must be nondecreasing in the threshold"));
            }
        }
        prev = val;
    }
    Ok(())
}

/// Checks a parsed report against the schema of [`REPORT_SCHEMA_VERSION`].
pub fn validate_report(v: &Value) -> Result<()> {
    let version = count(v, "$", "schema_version")?;
    if version != REPORT_SCHEMA_VERSION as u64 {
        return Err(bad("$.schema_version", format!("= {version} is not supported")));
    }
    for key in ["predictor", "split", "config_hash"] {
        if !field(v, "$", key)?.is_string() {
            return Err(bad(&format!("$.{key}"), "must be a string"));
        }
    }
    let thresholds: Vec<f64> = field(v, "$", "pck_thresholds")?
        .as_array()
        .ok_or_else(|| bad("$.pck_thresholds", "must be an array"))?
        .iter()
        .map(|x| x.as_f64().ok_or_else(|| bad("$.pck_thresholds", "must hold numbers")))
        .collect::<Result<_>>()?;
    if thresholds.windows(2).any(|w| w[1] <= w[0]) {
        return Err(bad("$.pck_thresholds", "must be strictly increasing"));
    }
    unit_or_null(v, "$", "existence_threshold")?;
    check_summary(field(v, "$", "aggregate")?, "$.aggregate", &thresholds)?;
    let clips = field(v, "$", "clips")?
        .as_array()
        .ok_or_else(|| bad("$.clips", "must be an array"))?;
    let mut frames = 0;
    let mut last_id: Option<&str> = None;
    for (i, c) in clips.iter().enumerate() {
        let path = format!("$.clips[{i}]");
        let id = field(c, &path, "clip_id")?
            .as_str()
            .ok_or_else(|| bad(&format!("{path}.clip_id"), "must be a string"))?;
        if last_id.is_some_and(|l| l >= id) {
            return Err(bad("$.clips", "must be sorted by unique clip id"));
        }
        last_id = Some(id);
        let m = field(c, &path, "metrics")?;
        check_summary(m, &format!("{path}.metrics"), &thresholds)?;
        frames += count(m, &path, "frames")?;
    }
    if frames != count(field(v, "$", "aggregate")?, "$.aggregate", "frames")? {
        return Err(bad("$.aggregate.frames", "must equal the sum over clips"));
    }
    let skipped = field(v, "$", "skipped")?
        .as_array()
        .ok_or_else(|| bad("$.skipped", "must be an array"))?;
    for (i, s) in skipped.iter().enumerate() {
        let path = format!("$.skipped[{i}]");
        for key in ["clip_id", "reason"] {
            if !field(s, &path, key)?.is_string() {
                return Err(bad(&format!("{path}.{key}"), "must be a string"));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary() -> MetricSummary {
        MetricSummary {
            frames: 4,
            iou: Some(0.5),
            dice: Some(2.0 / 3.0),
            mask_frames: 3,
            pck: [("0.02", Some(0.0)), ("0.05", Some(0.5)), ("0.1", Some(1.0))]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            pck_frames: 2,
            fp_area_rate: Some(0.01),
            empty_frames: 1,
            existence_precision: Some(1.0),
            existence_recall: Some(1.0),
            existence: ExistenceCounts {
                tp: 2,
                fp: 0,
                fn_: 0,
                tn: 2,
            },
        }
    }

    fn report() -> EvalReport {
        EvalReport {
            schema_version: REPORT_SCHEMA_VERSION,
            predictor: "model".into(),
            split: "test".into(),
            config_hash: "ab".into(),
            pck_thresholds: vec![0.02, 0.05, 0.1],
            existence_threshold: 0.5,
            aggregate: summary(),
            clips: vec![ClipReport {
                clip_id: "a".into(),
                metrics: summary(),
            }],
            skipped: vec![],
        }
    }

    #[test]
    fn valid_report_passes_and_round_trips() {
        let r = report();
        let v = serde_json::to_value(&r).unwrap();
        validate_report(&v).unwrap();
        let back: EvalReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        assert_eq!(v["aggregate"]["existence"]["fn"], 0);
    }

    #[test]
    fn schema_violations_are_caught() {
        let base = serde_json::to_value(report()).unwrap();
        let mut v = base.clone();
        v["schema_version"] = 2.into();
        assert!(validate_report(&v).is_err());
        let mut v = base.clone();
        v["aggregate"]["pck"]["0.1"] = 0.2.into();
        assert!(validate_report(&v).is_err());
        let mut v = base.clone();
        v["aggregate"]["iou"] = 1.5.into();
        assert!(validate_report(&v).is_err());
        let mut v = base.clone();
        v.as_object_mut().unwrap().remove("clips");
        assert!(validate_report(&v).is_err());
        let mut v = base;
        v["clips"][0]["metrics"]["frames"] = 5.into();
        assert!(validate_report(&v).is_err());
    }
}
