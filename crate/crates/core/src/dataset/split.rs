use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SequenceSample;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train_scenes: Vec<String>,
    pub val_scenes: Vec<String>,
    pub test_scenes: Vec<String>,
}

impl DatasetSplit {
    fn check_disjoint(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for id in self.train_scenes.iter().chain(&self.val_scenes).chain(&self.test_scenes) {
            if !seen.insert(id.as_str()) {
                return Err(Error::Config(format!("scene {id:?} appears in more than one split")));
            }
        }
        Ok(())
    }
}

/// Trains on every scene except `held_out`, which becomes the test set.
/// Validation windows for this protocol are carved from the training scenes
/// with [`split_validation`], so `val_scenes` stays empty.
pub fn leave_one_out_split(all_scenes: &[String], held_out: &str) -> Result<DatasetSplit> {
    if !all_scenes.iter().any(|s| s == held_out) {
        return Err(Error::Config(format!(
            "held-out scene {held_out:?} is not one of {all_scenes:?}"
        )));
    }
    let split = DatasetSplit {
        train_scenes: all_scenes.iter().filter(|s| *s != held_out).cloned().collect(),
        val_scenes: Vec::new(),
        test_scenes: vec![held_out.to_string()],
    };
    split.check_disjoint()?;
    Ok(split)
}

/// Reads a split manifest: one `<train|val|test> <video_id>` pair per line,
/// `#` comments allowed.
pub fn load_split_manifest(path: &Path) -> Result<DatasetSplit> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading split manifest {}", path.display()), e))?;
    let mut split = DatasetSplit::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(kind), Some(id), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "expected `<split> <video_id>`".into(),
            });
        };
        let list = match kind {
            "train" => &mut split.train_scenes,
            "val" => &mut split.val_scenes,
            "test" => &mut split.test_scenes,
            other => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("unknown split {other:?}"),
                })
            }
        };
        list.push(id.to_string());
    }
    split.check_disjoint()?;
    Ok(split)
}

/// Holds out the temporally last `fraction` of each scene's windows (by
/// `t0`, then agent id) for validation. Returns `(train, val)`.
pub fn split_validation(
    windows: Vec<SequenceSample>,
    fraction: f64,
) -> Result<(Vec<SequenceSample>, Vec<SequenceSample>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("validation fraction must be in [0, 1), got {fraction}")));
    }
    let mut by_scene: BTreeMap<String, Vec<SequenceSample>> = BTreeMap::new();
    for w in windows {
        by_scene.entry(w.scene_id.clone()).or_default().push(w);
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (_, mut ws) in by_scene {
        ws.sort_by_key(|w| (w.t0, w.agent_id));
        let n_val = (ws.len() as f64 * fraction).floor() as usize;
        let cut = ws.len() - n_val;
        val.extend(ws.drain(cut..));
        train.extend(ws);
    }
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scenes() -> Vec<String> {
        ["eth", "hotel", "univ", "zara1", "zara2"].iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn hold_out_one() {
        let s = leave_one_out_split(&scenes(), "eth").unwrap();
        assert_eq!(s.train_scenes.len(), 4);
        assert_eq!(s.test_scenes, vec!["eth".to_string()]);
        assert!(!s.train_scenes.contains(&"eth".to_string()));
    }

    #[test]
    fn unknown_held_out() {
        assert!(matches!(leave_one_out_split(&scenes(), "sdd"), Err(Error::Config(_))));
    }

    #[test]
    fn manifest_36_12_12() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.txt");
        let mut text = String::from("# sdd split\n");
        for i in 0..60 {
            let kind = if i < 36 { "train" } else if i < 48 { "val" } else { "test" };
            text.push_str(&format!("{kind} video_{i}\n"));
        }
        std::fs::write(&path, text).unwrap();
        let s = load_split_manifest(&path).unwrap();
        assert_eq!((s.train_scenes.len(), s.val_scenes.len(), s.test_scenes.len()), (36, 12, 12));

        std::fs::write(&path, "train a\ntest a\n").unwrap();
        assert!(load_split_manifest(&path).is_err());
        std::fs::write(&path, "holdout a\n").unwrap();
        assert!(matches!(load_split_manifest(&path), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn validation_takes_latest_windows() {
        let mk = |scene: &str, t0: i64| SequenceSample {
            scene_id: scene.into(),
            agent_id: 1,
            t0,
            obs_frames: vec![t0],
            history: vec![[0.0; 6]],
            future: vec![[0.0; 2]],
            neighbors: vec![],
        };
        let ws: Vec<_> = (0..20).rev().map(|t| mk("a", t)).chain((0..10).map(|t| mk("b", t))).collect();
        let (train, val) = split_validation(ws, 0.1).unwrap();
        assert_eq!(val.len(), 3);
        assert_eq!(train.len(), 27);
        let max_train_a = train.iter().filter(|w| w.scene_id == "a").map(|w| w.t0).max().unwrap();
        assert!(val.iter().filter(|w| w.scene_id == "a").all(|w| w.t0 > max_train_a));
        assert!(split_validation(vec![], 1.0).is_err());
    }
}
