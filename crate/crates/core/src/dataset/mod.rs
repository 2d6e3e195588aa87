//! Trajectory data: parsing raw annotation files, kinematic features,
//! observation/future windowing, scene splits and rotation augmentation.

mod augment;
pub mod cache;
mod ethucy;
mod kinematics;
mod sdd;
mod split;
pub mod synthetic;
mod windows;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use augment::{rotate_point, rotate_scene, ROTATION_STEP_DEG};
pub use ethucy::{parse_ethucy_file, parse_ethucy_str, write_ethucy_file};
pub use kinematics::{estimate_kinematics, history_features};
pub use sdd::{parse_sdd_annotations, parse_sdd_str, subsample_frames};
pub use split::{leave_one_out_split, load_split_manifest, split_validation, DatasetSplit};
pub use windows::build_windows;

/// A 2D position in world units (meters for ETH-UCY, pixels for SDD).
pub type Point = [f64; 2];

/// Default observation length (8 annotations = 3.2 s at 2.5 FPS).
pub const DEFAULT_TAU: usize = 8;
/// Default prediction horizon (12 annotations = 4.8 s at 2.5 FPS).
pub const DEFAULT_HORIZON: usize = 12;
/// ETH-UCY annotation rate.
pub const ETHUCY_FRAME_RATE: f64 = 2.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: Point,
    pub max: Point,
}

impl Bounds {
    /// Envelope of `points`; `None` for an empty iterator.
    pub fn envelope<'a>(points: impl IntoIterator<Item = &'a Point>) -> Option<Self> {
        let mut it = points.into_iter();
        let first = *it.next()?;
        let mut b = Bounds {
            min: first,
            max: first,
        };
        for p in it {
            for d in 0..2 {
                b.min[d] = b.min[d].min(p[d]);
                b.max[d] = b.max[d].max(p[d]);
            }
        }
        Some(b)
    }

    pub fn contains(&self, p: &Point) -> bool {
        (0..2).all(|d| p[d] >= self.min[d] && p[d] <= self.max[d])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub agent_id: i64,
    /// Strictly increasing raw frame indices.
    pub frames: Vec<i64>,
    pub positions: Vec<Point>,
}

impl AgentTrack {
    pub fn new(agent_id: i64, frames: Vec<i64>, positions: Vec<Point>) -> Result<Self> {
        if frames.len() != positions.len() {
            return Err(Error::Data(format!(
                "agent {agent_id}: {} frames but {} positions",
                frames.len(),
                positions.len()
            )));
        }
        if frames.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Data(format!(
                "agent {agent_id}: frames are not strictly increasing"
            )));
        }
        Ok(Self {
            agent_id,
            frames,
            positions,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn position_at(&self, frame: i64) -> Option<Point> {
        self.frames
            .binary_search(&frame)
            .ok()
            .map(|i| self.positions[i])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecording {
    pub scene_id: String,
    /// Annotation rate in frames per second; `1 / frame_rate` is the time
    /// step between consecutive annotations.
    pub frame_rate: f64,
    pub bounds: Bounds,
    pub tracks: Vec<AgentTrack>,
}

impl SceneRecording {
    /// Builds a recording; tracks are sorted by agent id and bounds are the
    /// envelope of every annotation.
    pub fn new(scene_id: impl Into<String>, frame_rate: f64, mut tracks: Vec<AgentTrack>) -> Result<Self> {
        let scene_id = scene_id.into();
        if !(frame_rate > 0.0) || !frame_rate.is_finite() {
            return Err(Error::Data(format!(
                "scene {scene_id}: frame rate must be positive, got {frame_rate}"
            )));
        }
        tracks.retain(|t| !t.is_empty());
        tracks.sort_by_key(|t| t.agent_id);
        let bounds = Bounds::envelope(tracks.iter().flat_map(|t| t.positions.iter())).unwrap_or(Bounds {
            min: [0.0, 0.0],
            max: [0.0, 0.0],
        });
        Ok(Self {
            scene_id,
            frame_rate,
            bounds,
            tracks,
        })
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.frame_rate
    }

    pub fn recompute_bounds(&mut self) {
        if let Some(b) = Bounds::envelope(self.tracks.iter().flat_map(|t| t.positions.iter())) {
            self.bounds = b;
        }
    }

    /// Raw-frame spacing between consecutive annotations: the most common
    /// positive frame difference within tracks (smallest on ties).
    pub fn annotation_step(&self) -> i64 {
        let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
        for t in &self.tracks {
            for w in t.frames.windows(2) {
                *counts.entry(w[1] - w[0]).or_default() += 1;
            }
        }
        counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(step, _)| *step)
            .unwrap_or(1)
    }

    /// Every frame with at least one annotation, ascending.
    pub fn frame_ids(&self) -> Vec<i64> {
        let set: BTreeSet<i64> = self.tracks.iter().flat_map(|t| t.frames.iter().copied()).collect();
        set.into_iter().collect()
    }

    /// Positions of all agents annotated at `frame`.
    pub fn positions_at(&self, frame: i64) -> Vec<Point> {
        self.tracks.iter().filter_map(|t| t.position_at(frame)).collect()
    }

    pub fn track(&self, agent_id: i64) -> Option<&AgentTrack> {
        self.tracks
            .binary_search_by_key(&agent_id, |t| t.agent_id)
            .ok()
            .map(|i| &self.tracks[i])
    }

    pub fn num_annotations(&self) -> usize {
        self.tracks.iter().map(|t| t.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub agent_id: i64,
    pub positions: Vec<Point>,
}

/// One agent's observed history and ground-truth future.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceSample {
    pub scene_id: String,
    pub agent_id: i64,
    /// First observed raw frame.
    pub t0: i64,
    /// Raw frame ids of the observed steps.
    pub obs_frames: Vec<i64>,
    /// Per observed step: x, y, vx, vy, ax, ay.
    pub history: Vec<[f64; 6]>,
    /// Future positions; the last entry is the goal.
    pub future: Vec<Point>,
    pub neighbors: Vec<Neighbor>,
}

impl SequenceSample {
    pub fn tau(&self) -> usize {
        self.history.len()
    }

    pub fn horizon(&self) -> usize {
        self.future.len()
    }

    pub fn observed_positions(&self) -> Vec<Point> {
        self.history.iter().map(|h| [h[0], h[1]]).collect()
    }

    pub fn last_observed(&self) -> Point {
        let h = self.history.last().expect("sample has at least one observed step");
        [h[0], h[1]]
    }

    pub fn goal(&self) -> Option<Point> {
        self.future.last().copied()
    }
}
