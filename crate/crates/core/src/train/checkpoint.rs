//! Safetensors checkpoints with a metadata header: format version, kind,
//! architecture JSON, resolved config, epoch, RNG state and optimizer step.
//! Tensor names are prefixed by collection: `model.`, `autoencoder.`,
//! `adam.`.

use std::borrow::Cow;
use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::VarMap;
use safetensors::tensor::{Dtype, SafeTensors, View};
use serde::{Deserialize, Serialize};

use super::Adam;
use crate::error::{Error, Result};
use crate::model::{ModelArch, TrajectoryPipeline};
use crate::nn::{sorted_vars, var_builder};
use crate::relation::{Autoencoder, AutoencoderArch};

pub const CHECKPOINT_VERSION: &str = "1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Autoencoder,
    Model,
}

impl CheckpointKind {
    fn as_str(self) -> &'static str {
        match self {
            CheckpointKind::Autoencoder => "autoencoder",
            CheckpointKind::Model => "model",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub version: String,
    pub kind: CheckpointKind,
    /// Architecture descriptor as JSON.
    pub arch: String,
    /// Resolved run config (TOML), empty when not recorded.
    pub config: String,
    /// Number of completed epochs.
    pub epoch: usize,
    /// Serialized training RNG, when resumable.
    pub rng_state: Option<String>,
    pub optimizer_step: usize,
}

impl CheckpointMeta {
    fn to_map(&self) -> HashMap<String, String> {
        let mut m = HashMap::new();
        m.insert("version".into(), self.version.clone());
        m.insert("kind".into(), self.kind.as_str().into());
        m.insert("arch".into(), self.arch.clone());
        m.insert("config".into(), self.config.clone());
        m.insert("epoch".into(), self.epoch.to_string());
        m.insert("optimizer_step".into(), self.optimizer_step.to_string());
        if let Some(r) = &self.rng_state {
            m.insert("rng_state".into(), r.clone());
        }
        m
    }

    fn from_map(m: &HashMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            m.get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("metadata field {k:?} missing")))
        };
        let version = get("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint format version {version:?} is not supported (expected {CHECKPOINT_VERSION:?})"
            )));
        }
        let kind = match get("kind")?.as_str() {
            "autoencoder" => CheckpointKind::Autoencoder,
            "model" => CheckpointKind::Model,
            other => return Err(Error::Checkpoint(format!("unknown checkpoint kind {other:?}"))),
        };
        let parse = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("metadata field {k:?} is not an integer")))
        };
        Ok(Self {
            version,
            kind,
            arch: get("arch")?,
            config: get("config")?,
            epoch: parse("epoch")?,
            rng_state: m.get("rng_state").cloned(),
            optimizer_step: parse("optimizer_step")?,
        })
    }
}

struct RawTensor {
    dtype: Dtype,
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl View for &RawTensor {
    fn dtype(&self) -> Dtype {
        self.dtype
    }
    fn shape(&self) -> &[usize] {
        &self.shape
    }
    fn data(&self) -> Cow<'_, [u8]> {
        Cow::Borrowed(&self.data)
    }
    fn data_len(&self) -> usize {
        self.data.len()
    }
}

fn to_raw(t: &Tensor) -> Result<RawTensor> {
    let flat = t.flatten_all()?;
    let (dtype, data) = match t.dtype() {
        DType::F64 => (Dtype::F64, flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
        _ => (
            Dtype::F32,
            flat.to_dtype(DType::F32)?
                .to_vec1::<f32>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
        ),
    };
    Ok(RawTensor {
        dtype,
        shape: t.dims().to_vec(),
        data,
    })
}

/// Rewrites a safetensors header with sorted keys. The library writes its
/// metadata map in hash order, which would make identical checkpoints
/// differ byte for byte.
pub fn canonical_safetensors(bytes: Vec<u8>) -> Result<Vec<u8>> {
    let bad = || Error::Checkpoint("malformed safetensors header".into());
    let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(bad)?.try_into().map_err(|_| bad())?;
    let n = u64::from_le_bytes(len_bytes) as usize;
    let header = bytes.get(8..8 + n).ok_or_else(bad)?;
    // serde_json maps are ordered by key, so re-serializing sorts them.
    let value: serde_json::Value = serde_json::from_slice(header)?;
    let mut h = serde_json::to_vec(&value)?;
    h.resize(h.len().div_ceil(8) * 8, b' ');
    let mut out = Vec::with_capacity(bytes.len() + 8);
    out.extend_from_slice(&(h.len() as u64).to_le_bytes());
    out.extend_from_slice(&h);
    out.extend_from_slice(&bytes[8 + n..]);
    Ok(out)
}

pub fn save_checkpoint(path: &Path, meta: &CheckpointMeta, tensors: &[(String, Tensor)]) -> Result<()> {
    let raws = tensors
        .iter()
        .map(|(n, t)| Ok((n.clone(), to_raw(t)?)))
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        }
    }
    let bytes = safetensors::tensor::serialize(raws.iter().map(|(n, r)| (n.as_str(), r)), Some(meta.to_map()))
        .map_err(|e| Error::Checkpoint(format!("serializing {}: {e}", path.display())))?;
    let bytes = canonical_safetensors(bytes)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing checkpoint {}", path.display()), e))
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointMeta, HashMap<String, Tensor>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
    let corrupt = |e: safetensors::SafeTensorError| Error::Checkpoint(format!("{} is not a valid checkpoint: {e}", path.display()));
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(corrupt)?;
    let meta = CheckpointMeta::from_map(
        header
            .metadata()
            .as_ref()
            .ok_or_else(|| Error::Checkpoint(format!("{} has no metadata header", path.display())))?,
    )?;
    let st = SafeTensors::deserialize(&bytes).map_err(corrupt)?;
    let mut out = HashMap::new();
    for (name, view) in st.tensors() {
        let shape = view.shape().to_vec();
        let t = match view.dtype() {
            Dtype::F64 => {
                let v: Vec<f64> = view
                    .data()
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                Tensor::from_vec(v, shape, &Device::Cpu)?
            }
            Dtype::F32 => {
                let v: Vec<f32> = view
                    .data()
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                Tensor::from_vec(v, shape, &Device::Cpu)?
            }
            other => return Err(Error::Checkpoint(format!("tensor {name} has unsupported dtype {other:?}"))),
        };
        out.insert(name, t);
    }
    Ok((meta, out))
}

/// Copies `prefix`-named tensors into every parameter of `vars`, refusing
/// missing, extra or mis-shaped tensors.
pub fn load_vars(vars: &VarMap, tensors: &HashMap<String, Tensor>, prefix: &str) -> Result<()> {
    let params = sorted_vars(vars);
    for (name, var) in &params {
        let key = format!("{prefix}{name}");
        let t = tensors
            .get(&key)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {key} missing from checkpoint")))?;
        if t.dims() != var.dims() {
            return Err(Error::Checkpoint(format!(
                "tensor {key} has shape {:?}, architecture expects {:?}",
                t.dims(),
                var.dims()
            )));
        }
        var.set(&t.to_dtype(var.dtype())?.to_device(var.device())?)?;
    }
    for key in tensors.keys().filter(|k| k.starts_with(prefix)) {
        let name = &key[prefix.len()..];
        if !params.iter().any(|(n, _)| n == name) {
            return Err(Error::Checkpoint(format!("unexpected tensor {key} in checkpoint")));
        }
    }
    Ok(())
}

fn prefixed(vars: &VarMap, prefix: &str) -> Vec<(String, Tensor)> {
    sorted_vars(vars)
        .into_iter()
        .map(|(n, v)| (format!("{prefix}{n}"), v.as_tensor().clone()))
        .collect()
}

pub fn save_autoencoder(
    path: &Path,
    ae: &Autoencoder,
    vars: &VarMap,
    epoch: usize,
    optimizer: Option<&Adam>,
    config: &str,
) -> Result<()> {
    let mut tensors = prefixed(vars, "autoencoder.");
    if let Some(opt) = optimizer {
        tensors.extend(opt.state().into_iter().map(|(n, t)| (format!("adam.{n}"), t)));
    }
    let meta = CheckpointMeta {
        version: CHECKPOINT_VERSION.into(),
        kind: CheckpointKind::Autoencoder,
        arch: serde_json::to_string(ae.arch())?,
        config: config.into(),
        epoch,
        rng_state: None,
        optimizer_step: optimizer.map_or(0, |o| o.step_count()),
    };
    save_checkpoint(path, &meta, &tensors)
}

pub struct LoadedAutoencoder {
    pub autoencoder: Autoencoder,
    pub vars: VarMap,
    pub meta: CheckpointMeta,
    pub tensors: HashMap<String, Tensor>,
}

pub fn load_autoencoder(path: &Path, dtype: DType, device: &Device) -> Result<LoadedAutoencoder> {
    let (meta, tensors) = load_checkpoint(path)?;
    if meta.kind != CheckpointKind::Autoencoder {
        return Err(Error::Checkpoint(format!("{} is a {} checkpoint, expected an autoencoder", path.display(), meta.kind.as_str())));
    }
    let arch: AutoencoderArch = serde_json::from_str(&meta.arch)
        .map_err(|e| Error::Checkpoint(format!("bad architecture descriptor: {e}")))?;
    let vars = VarMap::new();
    let autoencoder = Autoencoder::new(&arch, var_builder(&vars, dtype, device))?;
    load_vars(&vars, &tensors, "autoencoder.")?;
    Ok(LoadedAutoencoder {
        autoencoder,
        vars,
        meta,
        tensors,
    })
}

pub fn save_pipeline(
    path: &Path,
    pipeline: &TrajectoryPipeline,
    epoch: usize,
    optimizer: Option<&Adam>,
    rng_state: Option<String>,
    config: &str,
) -> Result<()> {
    let mut tensors = prefixed(&pipeline.vars, "model.");
    tensors.extend(prefixed(&pipeline.autoencoder_vars, "autoencoder."));
    if let Some(opt) = optimizer {
        tensors.extend(opt.state().into_iter().map(|(n, t)| (format!("adam.{n}"), t)));
    }
    let meta = CheckpointMeta {
        version: CHECKPOINT_VERSION.into(),
        kind: CheckpointKind::Model,
        arch: serde_json::to_string(&pipeline.arch)?,
        config: config.into(),
        epoch,
        rng_state,
        optimizer_step: optimizer.map_or(0, |o| o.step_count()),
    };
    save_checkpoint(path, &meta, &tensors)
}

pub struct LoadedPipeline {
    pub pipeline: TrajectoryPipeline,
    pub meta: CheckpointMeta,
    pub tensors: HashMap<String, Tensor>,
}

pub fn load_pipeline(path: &Path, dtype: DType, device: &Device) -> Result<LoadedPipeline> {
    let (meta, tensors) = load_checkpoint(path)?;
    if meta.kind != CheckpointKind::Model {
        return Err(Error::Checkpoint(format!(
            "{} is an {} checkpoint, expected a full model",
            path.display(),
            meta.kind.as_str()
        )));
    }
    let arch: ModelArch = serde_json::from_str(&meta.arch)
        .map_err(|e| Error::Checkpoint(format!("bad architecture descriptor: {e}")))?;
    let pipeline = TrajectoryPipeline::new(&arch, 0, dtype, device)?;
    load_vars(&pipeline.vars, &tensors, "model.")?;
    load_vars(&pipeline.autoencoder_vars, &tensors, "autoencoder.")?;
    Ok(LoadedPipeline { pipeline, meta, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor_to_vec;

    #[test]
    fn pipeline_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let p = TrajectoryPipeline::new(&ModelArch::tiny(), 4, DType::F32, &Device::Cpu).unwrap();
        save_pipeline(&path, &p, 3, None, Some("{}".into()), "seed = 1\n").unwrap();
        let loaded = load_pipeline(&path, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(loaded.meta.epoch, 3);
        assert_eq!(loaded.meta.config, "seed = 1\n");
        let a = crate::nn::snapshot(&p.vars).unwrap();
        let b = crate::nn::snapshot(&loaded.pipeline.vars).unwrap();
        for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
            assert_eq!(na, nb);
            assert_eq!(tensor_to_vec(ta).unwrap(), tensor_to_vec(tb).unwrap());
        }
        let again = dir.path().join("m2.safetensors");
        save_pipeline(&again, &loaded.pipeline, 3, None, Some("{}".into()), "seed = 1\n").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }

    #[test]
    fn refusals() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let p = TrajectoryPipeline::new(&ModelArch::tiny(), 4, DType::F32, &Device::Cpu).unwrap();
        save_pipeline(&path, &p, 0, None, None, "").unwrap();

        std::fs::write(dir.path().join("bad"), b"not a checkpoint").unwrap();
        assert!(matches!(load_checkpoint(&dir.path().join("bad")), Err(Error::Checkpoint(_))));

        let (mut meta, tensors) = load_checkpoint(&path).unwrap();
        let named: Vec<(String, Tensor)> = tensors.clone().into_iter().collect();
        meta.version = "0".into();
        save_checkpoint(&dir.path().join("v0"), &meta, &named).unwrap();
        let err = load_checkpoint(&dir.path().join("v0")).unwrap_err();
        assert!(err.to_string().contains("version"));

        let mut wrong = tensors.clone();
        wrong.insert("model.decoder.head.bias".into(), Tensor::zeros(3, DType::F32, &Device::Cpu).unwrap());
        let err = load_vars(&p.vars, &wrong, "model.").unwrap_err();
        assert!(err.to_string().contains("model.decoder.head.bias"), "{err}");

        assert!(load_autoencoder(&path, DType::F32, &Device::Cpu).is_err());
    }
}
