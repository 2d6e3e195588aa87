//! Turning a run configuration into scenes and train/val/test windows.

use crate::dataset::cache::{load_scenes, read_manifest, write_cache, CacheManifest, SceneSource};
use crate::dataset::{
    load_split_manifest, parse_ethucy_file, parse_sdd_annotations, rotate_scene, split_validation, subsample_frames,
    AgentTrack, SceneRecording, SequenceSample, ROTATION_STEP_DEG,
};
use crate::error::{Error, Result};
use crate::source::{subsample_windows, SceneData};

use super::config::{DataFormat, Protocol, RunConfig};

/// Parses one raw scene file. SDD scenes are subsampled in time and take
/// the configured scene name as their id.
pub fn load_raw_scene(cfg: &RunConfig, scene: &str) -> Result<SceneRecording> {
    let path = cfg.scene_path(scene);
    if !path.exists() {
        return Err(Error::Config(format!("raw data for scene {scene:?} not found at {}", path.display())));
    }
    match cfg.data.format {
        DataFormat::Ethucy => {
            let mut rec = parse_ethucy_file(&path)?;
            rec.scene_id = scene.to_string();
            Ok(rec)
        }
        DataFormat::Sdd => {
            let mut rec = subsample_frames(&parse_sdd_annotations(&path)?, cfg.data.sdd_frame_step)?;
            rec.scene_id = scene.to_string();
            Ok(rec)
        }
    }
}

/// Parses the selected scenes (all configured scenes by default) and
/// writes the cache.
pub fn prepare_cache(cfg: &RunConfig, only: Option<&[String]>) -> Result<CacheManifest> {
    let scenes: Vec<&String> = match only {
        Some(list) => {
            for s in list {
                if !cfg.data.scenes.contains(s) {
                    return Err(Error::Config(format!("scene {s:?} is not one of data.scenes {:?}", cfg.data.scenes)));
                }
            }
            cfg.data.scenes.iter().filter(|s| list.contains(s)).collect()
        }
        None => cfg.data.scenes.iter().collect(),
    };
    let sources = scenes
        .into_iter()
        .map(|s| {
            Ok(SceneSource {
                recording: load_raw_scene(cfg, s)?,
                path: cfg.scene_path(s),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_cache(&cfg.data.cache_dir, &cfg.cache_settings(), &sources)
}

pub struct Experiment {
    /// Every scene windows may refer to (including rotated copies).
    pub scenes: Vec<SceneData>,
    /// Scenes whose maps pretrain the autoencoder; restricted to training
    /// frames.
    pub ae_scenes: Vec<SceneData>,
    pub train_windows: Vec<SequenceSample>,
    pub val_windows: Vec<SequenceSample>,
    pub test_windows: Vec<SequenceSample>,
}

impl Experiment {
    pub fn scene_refs(&self) -> Vec<&SceneData> {
        self.scenes.iter().collect()
    }

    pub fn ae_scene_refs(&self) -> Vec<&SceneData> {
        self.ae_scenes.iter().collect()
    }

    /// Scenes referenced by `windows`.
    pub fn scenes_of(&self, windows: &[SequenceSample]) -> Vec<&SceneData> {
        self.scenes
            .iter()
            .filter(|s| windows.iter().any(|w| w.scene_id == s.recording.scene_id))
            .collect()
    }
}

fn rotation_ids(base: &[String]) -> Vec<String> {
    base.iter()
        .flat_map(|id| (1..360 / ROTATION_STEP_DEG).map(move |k| format!("{id}@rot{}", k * ROTATION_STEP_DEG)))
        .collect()
}

/// Annotations at or before `last_frame`, keeping the scene's geometry.
fn truncated(scene: &SceneData, last_frame: i64) -> Result<SceneData> {
    let rec = &scene.recording;
    let tracks = rec
        .tracks
        .iter()
        .filter_map(|t| {
            let n = t.frames.partition_point(|f| *f <= last_frame);
            (n > 0).then(|| AgentTrack::new(t.agent_id, t.frames[..n].to_vec(), t.positions[..n].to_vec()))
        })
        .collect::<Result<Vec<_>>>()?;
    let recording = SceneRecording::new(rec.scene_id.clone(), rec.frame_rate, tracks)?;
    let (train, _) = scene.windows_split_at(last_frame);
    Ok(SceneData {
        recording,
        geometry: scene.geometry.clone(),
        windows: train,
    })
}

pub fn assemble(cfg: &RunConfig) -> Result<Experiment> {
    let dir = &cfg.data.cache_dir;
    let settings = cfg.cache_settings();
    let d = &cfg.data;
    let manifest = read_manifest(dir)?;
    let want_rotations = d.rotations || cfg.train.augment_rotations;
    let mut exp = match d.protocol {
        Protocol::LeaveOneOut | Protocol::Manifest => {
            let (train_ids, val_ids, test_ids) = if d.protocol == Protocol::LeaveOneOut {
                let split = crate::dataset::leave_one_out_split(&d.scenes, &d.test_scene)?;
                (split.train_scenes, split.val_scenes, split.test_scenes)
            } else {
                let path = d.split_manifest.as_ref().expect("validated");
                let split = load_split_manifest(path)?;
                (split.train_scenes, split.val_scenes, split.test_scenes)
            };
            let train = load_scenes(dir, &settings, &train_ids)?;
            let val = load_scenes(dir, &settings, &val_ids)?;
            let test = load_scenes(dir, &settings, &test_ids)?;
            let rotated = if want_rotations {
                if !manifest.settings.rotations {
                    return Err(Error::Config(format!(
                        "the cache in {} has no rotated copies; rerun prepare-data with data.rotations = true",
                        dir.display()
                    )));
                }
                load_scenes(dir, &settings, &rotation_ids(&train_ids))?
            } else {
                Vec::new()
            };
            let mut train_windows: Vec<SequenceSample> = train.iter().flat_map(|s| s.windows.clone()).collect();
            let mut val_windows: Vec<SequenceSample> = val.iter().flat_map(|s| s.windows.clone()).collect();
            if val_ids.is_empty() {
                (train_windows, val_windows) = split_validation(train_windows, cfg.train.validation_fraction)?;
            }
            if cfg.train.augment_rotations {
                train_windows.extend(rotated.iter().flat_map(|s| s.windows.clone()));
            }
            let mut ae_scenes = train.clone();
            if d.rotations {
                ae_scenes.extend(rotated.iter().cloned());
            }
            let test_windows = test.iter().flat_map(|s| s.windows.clone()).collect();
            let mut scenes = train;
            scenes.extend(val);
            scenes.extend(test);
            scenes.extend(rotated);
            Experiment {
                scenes,
                ae_scenes,
                train_windows,
                val_windows,
                test_windows,
            }
        }
        Protocol::Temporal => {
            let scenes = load_scenes(dir, &settings, &d.scenes)?;
            let mut ae_scenes = Vec::new();
            let mut extra = Vec::new();
            let (mut train_windows, mut test_windows) = (Vec::new(), Vec::new());
            for scene in &scenes {
                let frames = scene.recording.frame_ids();
                if frames.is_empty() {
                    return Err(Error::Data(format!("scene {} has no annotations", scene.recording.scene_id)));
                }
                let cut = frames[((frames.len() - 1) as f64 * d.temporal_train_fraction).floor() as usize];
                let head = truncated(scene, cut)?;
                train_windows.extend(head.windows.iter().cloned());
                test_windows.extend(scene.windows.iter().filter(|w| w.t0 > cut).cloned());
                if want_rotations {
                    for k in 1..360 / ROTATION_STEP_DEG {
                        let rec = rotate_scene(&head.recording, k * ROTATION_STEP_DEG)?;
                        let rot = SceneData::new(rec, settings.map_size, settings.margin, settings.tau, settings.horizon, settings.stride)?;
                        extra.push(rot);
                    }
                }
                ae_scenes.push(head);
            }
            let (mut train_windows, val_windows) = split_validation(train_windows, cfg.train.validation_fraction)?;
            if cfg.train.augment_rotations {
                train_windows.extend(extra.iter().flat_map(|s| s.windows.clone()));
            }
            if d.rotations {
                ae_scenes.extend(extra.iter().cloned());
            }
            let mut all = scenes;
            all.extend(extra);
            Experiment {
                scenes: all,
                ae_scenes,
                train_windows,
                val_windows,
                test_windows,
            }
        }
    };
    if let Some(max) = cfg.train.max_train_windows {
        exp.train_windows = subsample_windows(std::mem::take(&mut exp.train_windows), max);
    }
    log::info!(
        "{} training, {} validation, {} test windows",
        exp.train_windows.len(),
        exp.val_windows.len(),
        exp.test_windows.len()
    );
    Ok(exp)
}
