//! Run configuration: one TOML file, `TRAJCAST_CACHE_DIR`, then
//! `--set section.key=value` overrides, in increasing precedence.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::cache::CacheSettings;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::ModelArch;
use crate::train::TrainConfig;

pub const CACHE_DIR_ENV: &str = "TRAJCAST_CACHE_DIR";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    /// Four-column `frame agent x y` files, one per scene:
    /// `<raw_dir>/<scene>.txt`.
    #[default]
    Ethucy,
    /// Stanford Drone annotations: `<raw_dir>/<scene>/annotations.txt`,
    /// kept in pixels.
    Sdd,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Train on every scene but `test_scene`, test on it.
    #[default]
    LeaveOneOut,
    /// Split each scene in time: the first `temporal_train_fraction` of its
    /// frames for training, windows starting after that for testing.
    Temporal,
    /// Train/val/test scene lists from `split_manifest`.
    Manifest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub format: DataFormat,
    pub raw_dir: PathBuf,
    pub scenes: Vec<String>,
    pub protocol: Protocol,
    pub test_scene: String,
    pub temporal_train_fraction: f64,
    pub split_manifest: Option<PathBuf>,
    pub stride: usize,
    /// Materialize the rotated copies and pretrain the autoencoder on them.
    pub rotations: bool,
    /// Keep every n-th raw SDD frame (12 turns 30 FPS into 2.5 FPS).
    pub sdd_frame_step: i64,
    pub cache_dir: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            format: DataFormat::Ethucy,
            raw_dir: PathBuf::from("data/ethucy"),
            scenes: ["eth", "hotel", "univ", "zara1", "zara2"].map(String::from).to_vec(),
            protocol: Protocol::LeaveOneOut,
            test_scene: "zara2".into(),
            temporal_train_fraction: 0.8,
            split_manifest: None,
            stride: 1,
            rotations: true,
            sdd_frame_step: 12,
            cache_dir: PathBuf::from("cache"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensityConfig {
    /// World-unit padding around the scene bounds.
    pub margin: f64,
    /// Gaussian kernel width in map cells.
    pub sigma_map: f64,
}

impl Default for DensityConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            sigma_map: 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> candle_core::DType {
        match self {
            Precision::F32 => candle_core::DType::F32,
            Precision::F64 => candle_core::DType::F64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Parent of the per-run directories; also holds the latest
    /// `autoencoder.safetensors` and `model.safetensors`.
    pub out_dir: PathBuf,
    pub precision: Precision,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs"),
            precision: Precision::F32,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub density: DensityConfig,
    pub model: ModelArch,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub run: RunSection,
}

fn parse_value(raw: &str) -> toml::Value {
    // Anything that is not a TOML literal is taken as a bare string.
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies one `a.b.c=value` override to a TOML table.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut node = table;
    for part in &parts[..parts.len() - 1] {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {part} is not a section")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Defaults, then `file`, then the cache-dir environment variable, then
    /// `overrides`. The result is validated.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => toml::Table::new(),
        };
        if let Ok(dir) = std::env::var(CACHE_DIR_ENV) {
            if !dir.is_empty() {
                apply_override(&mut table, &format!("data.cache_dir={}", toml::Value::String(dir)))?;
            }
        }
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| Error::Config(format!("model: {e}")))?;
        self.train.validate()?;
        self.eval.validate()?;
        let d = &self.data;
        if d.scenes.is_empty() {
            return Err(Error::Config("data.scenes is empty".into()));
        }
        if d.stride == 0 || d.sdd_frame_step < 1 {
            return Err(Error::Config("data.stride and data.sdd_frame_step must be >= 1".into()));
        }
        match d.protocol {
            Protocol::LeaveOneOut if !d.scenes.contains(&d.test_scene) => {
                return Err(Error::Config(format!(
                    "data.test_scene {:?} is not one of data.scenes {:?}",
                    d.test_scene, d.scenes
                )))
            }
            Protocol::Temporal if !(d.temporal_train_fraction > 0.0 && d.temporal_train_fraction < 1.0) => {
                return Err(Error::Config(format!(
                    "data.temporal_train_fraction must be in (0, 1), got {}",
                    d.temporal_train_fraction
                )))
            }
            Protocol::Manifest if d.split_manifest.is_none() => {
                return Err(Error::Config("data.protocol = \"manifest\" needs data.split_manifest".into()))
            }
            _ => {}
        }
        if !(self.density.sigma_map > 0.0) || !(self.density.margin >= 0.0) {
            return Err(Error::Config("density.sigma_map must be > 0 and density.margin >= 0".into()));
        }
        Ok(())
    }

    /// Parses a resolved configuration, such as the one recorded in a
    /// checkpoint.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The exact resolved configuration as TOML.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serializing config: {e}")))
    }

    /// SHA-256 of the resolved configuration, hex.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(crate::dataset::cache::sha256_bytes(self.to_toml()?.as_bytes()))
    }

    pub fn cache_settings(&self) -> CacheSettings {
        CacheSettings {
            tau: self.model.tau,
            horizon: self.model.horizon,
            stride: self.data.stride,
            sigma_map: self.density.sigma_map,
            map_size: self.model.autoencoder.map_size,
            margin: self.density.margin,
            rotations: self.data.rotations,
        }
    }

    pub fn scene_path(&self, scene: &str) -> PathBuf {
        match self.data.format {
            DataFormat::Ethucy => self.data.raw_dir.join(format!("{scene}.txt")),
            DataFormat::Sdd => self.data.raw_dir.join(scene).join("annotations.txt"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[train]\nepochs = 7\nk = 5\n[model]\nuse_goal = false\n").unwrap();
        let cfg = RunConfig::load(Some(&path), &["train.epochs=9".into(), "data.test_scene=eth".into()]).unwrap();
        assert_eq!(cfg.train.epochs, 9);
        assert_eq!(cfg.train.k, 5);
        assert!(!cfg.model.use_goal);
        assert_eq!(cfg.data.test_scene, "eth");
        assert_eq!(cfg.train.lr0, TrainConfig::default().lr0);
        let text = cfg.to_toml().unwrap();
        std::fs::write(&path, &text).unwrap();
        let again = RunConfig::load(Some(&path), &[]).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.fingerprint().unwrap(), cfg.fingerprint().unwrap());
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        let e = RunConfig::load(None, &["train.epoch=3".into()]).unwrap_err();
        assert!(matches!(e, Error::Config(_)), "{e}");
        assert!(RunConfig::load(None, &["data.test_scene=mars".into()]).is_err());
        assert!(RunConfig::load(None, &["train.lr0=-1".into()]).is_err());
        assert!(RunConfig::load(None, &["noequals".into()]).is_err());
        assert!(RunConfig::load(None, &["eval.select=min_fde_then_ade".into()]).is_ok());
    }
}
