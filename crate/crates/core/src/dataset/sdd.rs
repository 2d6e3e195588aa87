use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::{AgentTrack, Point, SceneRecording};
use crate::error::{Error, Result};

/// SDD videos are annotated at 30 FPS.
pub const SDD_FRAME_RATE: f64 = 30.0;

/// Parses a Stanford Drone Dataset `annotations.txt`:
/// `track_id xmin ymin xmax ymax frame lost occluded generated "label"`.
/// Positions are bounding-box centers in pixels; rows with `lost == 1` are
/// dropped. The scene id is the parent directory name when the file is
/// called `annotations.txt`, otherwise the file stem.
pub fn parse_sdd_annotations(path: &Path) -> Result<SceneRecording> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned());
    let scene_id = match stem.as_deref() {
        Some("annotations") => path
            .parent()
            .and_then(|p| p.file_name())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "annotations".into()),
        Some(s) => s.to_string(),
        None => "sdd".into(),
    };
    parse_sdd_str(&text, &scene_id, path)
}

pub fn parse_sdd_str(text: &str, scene_id: &str, origin: &Path) -> Result<SceneRecording> {
    let perr = |line: usize, message: String| Error::Parse {
        path: PathBuf::from(origin),
        line,
        message,
    };
    let mut per_agent: BTreeMap<i64, BTreeMap<i64, Point>> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 10 {
            return Err(perr(line_no, format!("expected 10 columns, found {}", fields.len())));
        }
        let int = |i: usize| -> Result<i64> {
            fields[i]
                .parse::<i64>()
                .map_err(|_| perr(line_no, format!("column {} is not an integer: {:?}", i + 1, fields[i])))
        };
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| perr(line_no, format!("column {} is not a number: {:?}", i + 1, fields[i])))
        };
        let track = int(0)?;
        let (xmin, ymin, xmax, ymax) = (num(1)?, num(2)?, num(3)?, num(4)?);
        let frame = int(5)?;
        let lost = int(6)?;
        if !fields[9].starts_with('"') || !fields[9].ends_with('"') || fields[9].len() < 2 {
            return Err(perr(line_no, format!("label must be quoted: {}", fields[9])));
        }
        if lost == 1 {
            continue;
        }
        let center = [(xmin + xmax) / 2.0, (ymin + ymax) / 2.0];
        if per_agent.entry(track).or_default().insert(frame, center).is_some() {
            return Err(Error::Data(format!(
                "{}:{line_no}: duplicate annotation for track {track} at frame {frame}",
                origin.display()
            )));
        }
    }
    let mut tracks = Vec::with_capacity(per_agent.len());
    for (agent, rows) in per_agent {
        let (frames, positions) = rows.into_iter().unzip();
        tracks.push(AgentTrack::new(agent, frames, positions)?);
    }
    SceneRecording::new(scene_id, SDD_FRAME_RATE, tracks)
}

/// Keeps only frames that are multiples of `step` and divides the frame rate
/// accordingly (step 12 turns 30 FPS SDD into 2.5 FPS).
pub fn subsample_frames(rec: &SceneRecording, step: i64) -> Result<SceneRecording> {
    if step < 1 {
        return Err(Error::Config(format!("frame step must be >= 1, got {step}")));
    }
    let tracks = rec
        .tracks
        .iter()
        .map(|t| {
            let (frames, positions): (Vec<i64>, Vec<Point>) = t
                .frames
                .iter()
                .zip(&t.positions)
                .filter(|(f, _)| **f % step == 0)
                .map(|(f, p)| (*f, *p))
                .unzip();
            AgentTrack::new(t.agent_id, frames, positions)
        })
        .collect::<Result<Vec<_>>>()?;
    SceneRecording::new(rec.scene_id.clone(), rec.frame_rate / step as f64, tracks)
}
