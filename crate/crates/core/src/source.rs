//! Scenes with their map geometry and windows, and indexed access to
//! prepared network inputs for training and evaluation.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::dataset::{build_windows, SceneRecording, SequenceSample};
use crate::density::SceneGeometry;
use crate::error::{contract, Result};
use crate::model::{prepare_sample, PreparedSample, SceneLatents};
use crate::relation::Autoencoder;

#[derive(Clone, Debug)]
pub struct SceneData {
    pub recording: SceneRecording,
    pub geometry: SceneGeometry,
    pub windows: Vec<SequenceSample>,
}

impl SceneData {
    pub fn new(
        recording: SceneRecording,
        map_size: (usize, usize),
        margin: f64,
        tau: usize,
        horizon: usize,
        stride: usize,
    ) -> Result<Self> {
        let geometry = SceneGeometry::for_recording(&recording, map_size, margin)?;
        let windows = build_windows(&recording, tau, horizon, stride)?;
        Ok(Self {
            recording,
            geometry,
            windows,
        })
    }

    /// Keeps the windows whose first future frame is before (`true`) or at
    /// or after (`false`) `frame`.
    pub fn windows_split_at(&self, frame: i64) -> (Vec<SequenceSample>, Vec<SequenceSample>) {
        let step = self.recording.annotation_step();
        self.windows
            .iter()
            .cloned()
            .partition(|w| w.obs_frames.last().copied().unwrap_or(w.t0) + step * w.horizon() as i64 <= frame)
    }
}

pub trait SampleSource {
    fn len(&self) -> usize;
    fn window(&self, index: usize) -> &SequenceSample;
    fn prepare(&self, index: usize, with_future: bool) -> Result<PreparedSample>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Windows plus the frozen-autoencoder latents of every frame they observe.
pub struct WindowSource {
    windows: Vec<SequenceSample>,
    latents: HashMap<String, SceneLatents>,
}

impl WindowSource {
    /// Encodes the observed frames of `windows` with `ae` (skipped when
    /// `ae` is `None`, for models without the relation module). Every
    /// window's scene must be in `scenes`.
    pub fn new(
        windows: Vec<SequenceSample>,
        scenes: &[&SceneData],
        ae: Option<&Autoencoder>,
        sigma_map: f64,
    ) -> Result<Self> {
        let mut latents = HashMap::new();
        if let Some(ae) = ae {
            let mut needed: BTreeMap<&str, BTreeSet<i64>> = BTreeMap::new();
            for w in &windows {
                needed.entry(w.scene_id.as_str()).or_default().extend(w.obs_frames.iter().copied());
            }
            for (scene_id, frames) in needed {
                let scene = scenes
                    .iter()
                    .find(|s| s.recording.scene_id == scene_id)
                    .ok_or_else(|| contract(format!("no scene data for window scene {scene_id}")))?;
                let frames: Vec<i64> = frames.into_iter().collect();
                let lat = SceneLatents::encode(&scene.recording, &frames, &scene.geometry, sigma_map, ae)?;
                latents.insert(scene_id.to_string(), lat);
            }
        }
        Ok(Self { windows, latents })
    }

    pub fn windows(&self) -> &[SequenceSample] {
        &self.windows
    }

    /// Replaces the ground-truth futures (used after perturbing the
    /// observations of a scene).
    pub fn with_futures_from(mut self, clean: &[SequenceSample]) -> Result<Self> {
        if clean.len() != self.windows.len() {
            return Err(contract("window lists differ in length"));
        }
        for (w, c) in self.windows.iter_mut().zip(clean) {
            if (w.agent_id, w.t0, &w.scene_id) != (c.agent_id, c.t0, &c.scene_id) {
                return Err(contract("window lists are not aligned"));
            }
            w.future = c.future.clone();
        }
        Ok(self)
    }
}

impl SampleSource for WindowSource {
    fn len(&self) -> usize {
        self.windows.len()
    }

    fn window(&self, index: usize) -> &SequenceSample {
        &self.windows[index]
    }

    fn prepare(&self, index: usize, with_future: bool) -> Result<PreparedSample> {
        let w = &self.windows[index];
        match self.latents.get(&w.scene_id) {
            Some(lat) => {
                let window = lat.window(&w.obs_frames)?;
                prepare_sample(w, Some((&window, lat)), with_future)
            }
            None => prepare_sample(w, None, with_future),
        }
    }
}

/// Evenly spaced subset of at most `max` windows, order preserved.
pub fn subsample_windows(windows: Vec<SequenceSample>, max: usize) -> Vec<SequenceSample> {
    if windows.len() <= max || max == 0 {
        return windows;
    }
    let n = windows.len();
    let keep: BTreeSet<usize> = (0..max).map(|i| i * n / max).collect();
    windows
        .into_iter()
        .enumerate()
        .filter(|(i, _)| keep.contains(i))
        .map(|(_, w)| w)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synthetic::{simulate_crowd, CrowdSimConfig};

    #[test]
    fn temporal_split_has_no_future_overlap() {
        let rec = simulate_crowd(
            &CrowdSimConfig {
                duration_s: 120.0,
                ..Default::default()
            },
            "plaza",
        )
        .unwrap();
        let scene = SceneData::new(rec, (80, 80), 1.0, 8, 12, 1).unwrap();
        let cut = 2400;
        let (train, test) = scene.windows_split_at(cut);
        assert!(!train.is_empty() && !test.is_empty());
        assert_eq!(train.len() + test.len(), scene.windows.len());
        assert!(train.iter().all(|w| w.t0 + 190 <= cut));
    }

    #[test]
    fn subsample_is_even() {
        let rec = simulate_crowd(
            &CrowdSimConfig {
                duration_s: 60.0,
                ..Default::default()
            },
            "plaza",
        )
        .unwrap();
        let scene = SceneData::new(rec, (80, 80), 1.0, 8, 12, 1).unwrap();
        let n = scene.windows.len();
        let sub = subsample_windows(scene.windows.clone(), n / 3);
        assert_eq!(sub.len(), n / 3);
        assert_eq!(sub[0], scene.windows[0]);
    }
}
