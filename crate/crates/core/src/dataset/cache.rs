//! Preprocessed per-scene cache: windows, recordings and rendered density
//! maps on disk, indexed by a manifest with SHA-256 checksums.
//!
//! Layout of a cache directory:
//! - `manifest.json`
//! - `<scene>.recording.json` and `<scene>.windows.json` for every scene and
//!   rotated copy (`@` in ids becomes `_` in file names)
//! - `<scene>.maps.safetensors` with `[N, H, W]` maps of every annotated
//!   frame of the unrotated scenes
//!
//! Nothing time-dependent is written, so rebuilding from the same inputs
//! gives byte-identical files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{rotate_scene, SceneRecording, SequenceSample, ROTATION_STEP_DEG};
use crate::density::{render_density_frame, SceneGeometry};
use crate::error::{Error, Result};
use crate::source::SceneData;

pub const CACHE_VERSION: &str = "1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheSettings {
    pub tau: usize,
    pub horizon: usize,
    pub stride: usize,
    pub sigma_map: f64,
    pub map_size: (usize, usize),
    pub margin: f64,
    /// Also materialize the eleven rotated copies of each scene.
    pub rotations: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CachedScene {
    pub scene_id: String,
    pub base_scene: String,
    pub rotation_deg: u32,
    pub source: String,
    pub source_sha256: String,
    pub dt: f64,
    pub num_windows: usize,
    pub num_frames: usize,
    pub geometry: SceneGeometry,
    /// `recording`, `windows` and (unrotated scenes only) `maps`.
    pub files: BTreeMap<String, FileEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub version: String,
    pub settings: CacheSettings,
    pub scenes: Vec<CachedScene>,
}

impl CacheManifest {
    pub fn scene(&self, id: &str) -> Option<&CachedScene> {
        self.scenes.iter().find(|s| s.scene_id == id)
    }

    /// Rotated copies (not including the original) of `base`.
    pub fn rotations_of(&self, base: &str) -> Vec<&CachedScene> {
        self.scenes
            .iter()
            .filter(|s| s.base_scene == base && s.rotation_deg != 0)
            .collect()
    }
}

/// A parsed recording and the raw file it came from.
pub struct SceneSource {
    pub recording: SceneRecording,
    pub path: PathBuf,
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(sha256_bytes(&bytes))
}

fn file_stem(scene_id: &str) -> String {
    scene_id.replace(['@', '/', '\\'], "_")
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<FileEntry> {
    let path = dir.join(name);
    std::fs::write(&path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(FileEntry {
        name: name.to_string(),
        sha256: sha256_bytes(bytes),
    })
}

fn maps_bytes(scene: &SceneData, sigma_map: f64) -> Result<Vec<u8>> {
    let frames = scene.recording.frame_ids();
    let (h, w) = scene.geometry.map_size;
    let mut bytes = Vec::with_capacity(frames.len() * h * w * 4);
    for f in &frames {
        let map = render_density_frame(&scene.recording.positions_at(*f), &scene.geometry, sigma_map)?;
        for v in &map.data {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let view = safetensors::tensor::TensorView::new(safetensors::Dtype::F32, vec![frames.len(), h, w], &bytes)
        .map_err(|e| Error::Data(format!("building map tensor: {e}")))?;
    let mut meta = std::collections::HashMap::new();
    meta.insert("frame_ids".to_string(), serde_json::to_string(&frames)?);
    meta.insert("sigma_map".to_string(), sigma_map.to_string());
    meta.insert("geometry".to_string(), serde_json::to_string(&scene.geometry)?);
    let bytes = safetensors::tensor::serialize([("maps", view)], Some(meta))
        .map_err(|e| Error::Data(format!("serializing maps: {e}")))?;
    crate::train::canonical_safetensors(bytes)
}

/// Builds the cache for `sources` in `dir` and returns its manifest.
pub fn write_cache(dir: &Path, settings: &CacheSettings, sources: &[SceneSource]) -> Result<CacheManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut scenes = Vec::new();
    for src in sources {
        let source_sha256 = sha256_file(&src.path)?;
        let angles: Vec<u32> = if settings.rotations {
            (0..360).step_by(ROTATION_STEP_DEG as usize).collect()
        } else {
            vec![0]
        };
        for deg in angles {
            let rec = rotate_scene(&src.recording, deg)?;
            let scene = SceneData::new(rec, settings.map_size, settings.margin, settings.tau, settings.horizon, settings.stride)?;
            let stem = file_stem(&scene.recording.scene_id);
            let mut files = BTreeMap::new();
            files.insert(
                "recording".into(),
                write_file(dir, &format!("{stem}.recording.json"), &serde_json::to_vec(&scene.recording)?)?,
            );
            files.insert(
                "windows".into(),
                write_file(dir, &format!("{stem}.windows.json"), &serde_json::to_vec(&scene.windows)?)?,
            );
            if deg == 0 {
                files.insert(
                    "maps".into(),
                    write_file(dir, &format!("{stem}.maps.safetensors"), &maps_bytes(&scene, settings.sigma_map)?)?,
                );
            }
            scenes.push(CachedScene {
                scene_id: scene.recording.scene_id.clone(),
                base_scene: src.recording.scene_id.clone(),
                rotation_deg: deg,
                source: src.path.display().to_string(),
                source_sha256: source_sha256.clone(),
                dt: scene.recording.dt(),
                num_windows: scene.windows.len(),
                num_frames: scene.recording.frame_ids().len(),
                geometry: scene.geometry.clone(),
                files,
            });
        }
    }
    let manifest = CacheManifest {
        version: CACHE_VERSION.into(),
        settings: settings.clone(),
        scenes,
    };
    write_file(dir, MANIFEST_FILE, &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CacheManifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = std::fs::read(&path).map_err(|e| {
        Error::io(
            format!("reading cache manifest {} (run prepare-data first)", path.display()),
            e,
        )
    })?;
    let manifest: CacheManifest = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Data(format!("cache manifest {} is malformed: {e}", path.display())))?;
    if manifest.version != CACHE_VERSION {
        return Err(Error::Data(format!(
            "cache version {} is not supported (expected {CACHE_VERSION})",
            manifest.version
        )));
    }
    Ok(manifest)
}

/// Checks every file of the manifest in `dir` against its checksum and
/// every source file against the checksum it had when the cache was built.
pub fn verify_cache(dir: &Path) -> Result<CacheManifest> {
    let manifest = read_manifest(dir)?;
    for scene in &manifest.scenes {
        let actual = sha256_file(Path::new(&scene.source))?;
        if actual != scene.source_sha256 {
            return Err(Error::Data(format!(
                "checksum mismatch for source {} of scene {}",
                scene.source, scene.scene_id
            )));
        }
        for entry in scene.files.values() {
            if sha256_file(&dir.join(&entry.name))? != entry.sha256 {
                return Err(Error::Data(format!("checksum mismatch for cache file {}", entry.name)));
            }
        }
    }
    Ok(manifest)
}

fn read_checked(dir: &Path, scene: &CachedScene, kind: &str) -> Result<Vec<u8>> {
    let entry = scene
        .files
        .get(kind)
        .ok_or_else(|| Error::Data(format!("cache has no {kind} file for scene {}", scene.scene_id)))?;
    let path = dir.join(&entry.name);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if sha256_bytes(&bytes) != entry.sha256 {
        return Err(Error::Data(format!("checksum mismatch for cache file {}", entry.name)));
    }
    Ok(bytes)
}

/// Loads the named scenes. Fails when the cache was built with settings
/// other than `settings`.
pub fn load_scenes(dir: &Path, settings: &CacheSettings, ids: &[String]) -> Result<Vec<SceneData>> {
    let manifest = read_manifest(dir)?;
    let ours = CacheSettings {
        rotations: manifest.settings.rotations,
        ..settings.clone()
    };
    if manifest.settings != ours {
        return Err(Error::Config(format!(
            "cache in {} was built with {:?}, but the config asks for {:?}; rerun prepare-data",
            dir.display(),
            manifest.settings,
            ours
        )));
    }
    ids.iter()
        .map(|id| {
            let scene = manifest.scene(id).ok_or_else(|| {
                Error::Config(format!(
                    "scene {id:?} is not in the cache (has {:?})",
                    manifest.scenes.iter().map(|s| &s.scene_id).collect::<Vec<_>>()
                ))
            })?;
            let recording: SceneRecording = serde_json::from_slice(&read_checked(dir, scene, "recording")?)?;
            let windows: Vec<SequenceSample> = serde_json::from_slice(&read_checked(dir, scene, "windows")?)?;
            Ok(SceneData {
                recording,
                geometry: scene.geometry.clone(),
                windows,
            })
        })
        .collect()
}

/// Frame ids and `[N, H, W]` maps of an unrotated cached scene.
pub fn load_maps(dir: &Path, scene_id: &str) -> Result<(Vec<i64>, Vec<f32>, (usize, usize))> {
    let manifest = read_manifest(dir)?;
    let scene = manifest
        .scene(scene_id)
        .ok_or_else(|| Error::Config(format!("scene {scene_id:?} is not in the cache")))?;
    let bytes = read_checked(dir, scene, "maps")?;
    let (_, meta) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| Error::Data(format!("reading maps: {e}")))?;
    let frames: Vec<i64> = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get("frame_ids"))
        .map(|s| serde_json::from_str(s))
        .transpose()?
        .ok_or_else(|| Error::Data("maps file has no frame ids".into()))?;
    let st = safetensors::SafeTensors::deserialize(&bytes).map_err(|e| Error::Data(format!("reading maps: {e}")))?;
    let t = st.tensor("maps").map_err(|e| Error::Data(format!("reading maps: {e}")))?;
    let shape = t.shape().to_vec();
    let data = t
        .data()
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((frames, data, (shape[1], shape[2])))
}
