use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{AgentTrack, Point, SceneRecording, ETHUCY_FRAME_RATE};
use crate::error::{Error, Result};

/// Parses an ETH-UCY trajectory file: one `frame agent x y` annotation per
/// line, whitespace separated. Integral floats such as `780.0` are accepted
/// for the id columns. The scene id is the file stem.
pub fn parse_ethucy_file(path: &Path) -> Result<SceneRecording> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let scene_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scene".to_string());
    parse_ethucy_str(&text, &scene_id, path)
}

pub fn parse_ethucy_str(text: &str, scene_id: &str, origin: &Path) -> Result<SceneRecording> {
    let perr = |line: usize, message: String| Error::Parse {
        path: PathBuf::from(origin),
        line,
        message,
    };
    let mut per_agent: BTreeMap<i64, Vec<(i64, Point)>> = BTreeMap::new();
    let mut seen: HashSet<(i64, i64)> = HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(perr(line_no, format!("expected 4 fields, found {}", fields.len())));
        }
        let mut vals = [0.0f64; 4];
        for (i, f) in fields.iter().enumerate() {
            vals[i] = f
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| perr(line_no, format!("field {} is not a number: {f:?}", i + 1)))?;
        }
        let frame = integral(vals[0]).ok_or_else(|| perr(line_no, "frame id is not an integer".into()))?;
        let agent = integral(vals[1]).ok_or_else(|| perr(line_no, "agent id is not an integer".into()))?;
        if !seen.insert((frame, agent)) {
            return Err(Error::Data(format!(
                "{}:{line_no}: duplicate annotation for agent {agent} at frame {frame}",
                origin.display()
            )));
        }
        per_agent.entry(agent).or_default().push((frame, [vals[2], vals[3]]));
    }
    let mut tracks = Vec::with_capacity(per_agent.len());
    for (agent, mut rows) in per_agent {
        rows.sort_by_key(|r| r.0);
        let (frames, positions) = rows.into_iter().unzip();
        tracks.push(AgentTrack::new(agent, frames, positions)?);
    }
    SceneRecording::new(scene_id, ETHUCY_FRAME_RATE, tracks)
}

fn integral(v: f64) -> Option<i64> {
    (v.fract() == 0.0 && v.abs() < 9.0e15).then_some(v as i64)
}

/// Writes a recording in the same tab-separated layout the public ETH-UCY
/// files use, ordered by frame then agent.
pub fn write_ethucy_file(rec: &SceneRecording, path: &Path) -> Result<()> {
    let mut rows: Vec<(i64, i64, Point)> = rec
        .tracks
        .iter()
        .flat_map(|t| t.frames.iter().zip(&t.positions).map(move |(f, p)| (*f, t.agent_id, *p)))
        .collect();
    rows.sort_by_key(|r| (r.0, r.1));
    let mut out = String::with_capacity(rows.len() * 32);
    for (f, a, p) in rows {
        let _ = writeln!(out, "{f}.0\t{a}.0\t{:.4}\t{:.4}", p[0], p[1]);
    }
    std::fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}
