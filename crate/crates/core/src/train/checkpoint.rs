//! Checkpoint container.
//!
//! One safetensors file. Tensor names carry their segment as a prefix
//! (`backbone.`, `maskbranch.`, `pointbranch.`, `optimizer_A.`,
//! `optimizer_B.`); the config snapshot, step counters and format version sit
//! in the header metadata.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, View};

use crate::config::ModelConfig;
use crate::error::{Error, IoContext, Result};
use crate::model::BleedNet;
use crate::train::step::OptimState;

pub const CHECKPOINT_VERSION: &str = "1";
const OPT_A: &str = "optimizer_A.";
const OPT_B: &str = "optimizer_B.";

struct Raw {
    dtype: Dtype,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl View for &Raw {
    fn dtype(&self) -> Dtype {
        self.dtype
    }
    fn shape(&self) -> &[usize] {
        &self.shape
    }
    fn data(&self) -> Cow<'_, [u8]> {
        Cow::Borrowed(&self.bytes)
    }
    fn data_len(&self) -> usize {
        self.bytes.len()
    }
}

fn to_raw(t: &Tensor) -> Result<Raw> {
    let shape = t.dims().to_vec();
    let flat = t.flatten_all()?;
    let (dtype, bytes) = match t.dtype() {
        DType::F64 => (
            Dtype::F64,
            flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        _ => (
            Dtype::F32,
            flat.to_dtype(DType::F32)?
                .to_vec1::<f32>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
        ),
    };
    Ok(Raw { dtype, shape, bytes })
}

fn from_view(name: &str, v: &safetensors::tensor::TensorView<'_>) -> Result<Tensor> {
    let shape = v.shape().to_vec();
    let data = v.data();
    let t = match v.dtype() {
        Dtype::F32 => {
            let vals: Vec<f32> = data.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            Tensor::from_vec(vals, shape, &Device::Cpu)?
        }
        Dtype::F64 => {
            let vals: Vec<f64> = data.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
            Tensor::from_vec(vals, shape, &Device::Cpu)?
        }
        other => return Err(Error::Checkpoint(format!("tensor `{name}` has unsupported dtype {other:?}"))),
    };
    Ok(t)
}

/// Decoded checkpoint contents.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: String,
    pub config: ModelConfig,
    pub step: u64,
    pub epoch: usize,
    pub dtype: DType,
    pub model: BTreeMap<String, Tensor>,
    pub optimizer_a: BTreeMap<String, Tensor>,
    pub optimizer_b: BTreeMap<String, Tensor>,
    pub optimizer_a_steps: u64,
    pub optimizer_b_steps: u64,
    pub metadata: BTreeMap<String, String>,
}

pub fn save_checkpoint(
    path: &Path,
    model: &BleedNet,
    optim: Option<&OptimState>,
    epoch: usize,
    extra: &BTreeMap<String, String>,
) -> Result<()> {
    let mut raws: BTreeMap<String, Raw> = BTreeMap::new();
    for (k, t) in model.store.tensors() {
        raws.insert(k, to_raw(&t)?);
    }
    let mut meta: HashMap<String, String> = HashMap::new();
    meta.insert("format".into(), "bleedscope-checkpoint".into());
    meta.insert("version".into(), CHECKPOINT_VERSION.into());
    meta.insert("config_snapshot".into(), model.config.to_text());
    meta.insert("config_hash".into(), model.config.hash_hex());
    meta.insert("epoch".into(), epoch.to_string());
    meta.insert(
        "dtype".into(),
        if model.store.dtype() == DType::F64 { "f64" } else { "f32" }.into(),
    );
    let mut segments = vec!["backbone", "maskbranch", "pointbranch"];
    match optim {
        Some(o) => {
            meta.insert("step".into(), o.step.to_string());
            meta.insert("optimizer_A.steps".into(), o.opt_a.steps().to_string());
            meta.insert("optimizer_B.steps".into(), o.opt_b.steps().to_string());
            for (k, t) in o.opt_a.state() {
                raws.insert(format!("{OPT_A}{k}"), to_raw(&t)?);
            }
            for (k, t) in o.opt_b.state() {
                raws.insert(format!("{OPT_B}{k}"), to_raw(&t)?);
            }
            segments.extend(["optimizer_A", "optimizer_B"]);
        }
        None => {
            meta.insert("step".into(), "0".into());
        }
    }
    meta.insert("segments".into(), segments.join(","));
    for (k, v) in extra {
        meta.insert(format!("extra.{k}"), v.clone());
    }
    let bytes = safetensors::serialize(raws.iter().map(|(k, r)| (k.clone(), r)), Some(meta))
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).at(dir)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).at(&tmp)?;
    std::fs::rename(&tmp, path).at(path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).at(path)?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let meta = header
        .metadata()
        .clone()
        .ok_or_else(|| Error::Checkpoint(format!("{}: no metadata", path.display())))?;
    let get = |k: &str| {
        meta.get(k)
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("{}: metadata lacks `{k}`", path.display())))
    };
    let version = get("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let config = ModelConfig::parse(&get("config_snapshot")?)?;
    let parse_u64 = |k: &str| -> Result<u64> {
        get(k)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("metadata `{k}` is not an integer")))
    };
    let step = parse_u64("step")?;
    let epoch = parse_u64("epoch")? as usize;
    let dtype = if get("dtype")? == "f64" { DType::F64 } else { DType::F32 };
    let optimizer_a_steps = meta.get("optimizer_A.steps").and_then(|s| s.parse().ok()).unwrap_or(0);
    let optimizer_b_steps = meta.get("optimizer_B.steps").and_then(|s| s.parse().ok()).unwrap_or(0);

    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut model = BTreeMap::new();
    let mut optimizer_a = BTreeMap::new();
    let mut optimizer_b = BTreeMap::new();
    for (name, view) in st.tensors() {
        let t = from_view(&name, &view)?;
        if let Some(rest) = name.strip_prefix(OPT_A) {
            optimizer_a.insert(rest.to_string(), t);
        } else if let Some(rest) = name.strip_prefix(OPT_B) {
            optimizer_b.insert(rest.to_string(), t);
        } else {
            model.insert(name, t);
        }
    }
    let metadata = meta
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("extra.").map(|k| (k.to_string(), v.clone())))
        .collect();
    Ok(Checkpoint {
        version,
        config,
        step,
        epoch,
        dtype,
        model,
        optimizer_a,
        optimizer_b,
        optimizer_a_steps,
        optimizer_b_steps,
        metadata,
    })
}

/// Builds the model described by a checkpoint and loads its weights.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<BleedNet> {
    let model = BleedNet::new(&ck.config, ck.dtype)?;
    model.store.load(&ck.model)?;
    Ok(model)
}

/// Loads weights into an existing model, refusing a different architecture.
pub fn load_into(model: &BleedNet, ck: &Checkpoint) -> Result<()> {
    let mine = &model.config;
    let theirs = &ck.config;
    let arch = |c: &ModelConfig| {
        (
            c.input_resolution,
            c.channels,
            c.channels_f1,
            c.channels_f2,
            c.num_heads,
            c.decoder_depth,
            c.memory_capacity,
        )
    };
    if arch(mine) != arch(theirs) {
        return Err(Error::Checkpoint(format!(
            "checkpoint architecture {:?} does not match config {:?}",
            arch(theirs),
            arch(mine)
        )));
    }
    model.store.load(&ck.model)
}
