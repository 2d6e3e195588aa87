use super::{history_features, Neighbor, SceneRecording, SequenceSample};
use crate::error::{Error, Result};

/// Cuts every track into `tau + horizon` windows of consecutive annotations,
/// advancing `stride` annotations between windows. Annotations are
/// consecutive when their raw frames differ by the recording's annotation
/// step; a gap starts a new run. Neighbors are agents annotated at every
/// observed frame of the window.
pub fn build_windows(
    rec: &SceneRecording,
    tau: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<SequenceSample>> {
    if tau == 0 || horizon == 0 || stride == 0 {
        return Err(Error::Config(format!(
            "window lengths and stride must be >= 1 (tau={tau}, horizon={horizon}, stride={stride})"
        )));
    }
    let step = rec.annotation_step();
    let len = tau + horizon;
    let dt = rec.dt();
    let mut out = Vec::new();
    for track in &rec.tracks {
        let mut run_start = 0;
        for i in 1..=track.len() {
            let run_ends = i == track.len() || track.frames[i] - track.frames[i - 1] != step;
            if !run_ends {
                continue;
            }
            let run_len = i - run_start;
            if run_len >= len {
                let mut s = run_start;
                while s + len <= i {
                    let obs = &track.positions[s..s + tau];
                    let obs_frames = track.frames[s..s + tau].to_vec();
                    let neighbors = rec
                        .tracks
                        .iter()
                        .filter(|o| o.agent_id != track.agent_id)
                        .filter_map(|o| {
                            let positions = obs_frames
                                .iter()
                                .map(|f| o.position_at(*f))
                                .collect::<Option<Vec<_>>>()?;
                            Some(Neighbor {
                                agent_id: o.agent_id,
                                positions,
                            })
                        })
                        .collect();
                    out.push(SequenceSample {
                        scene_id: rec.scene_id.clone(),
                        agent_id: track.agent_id,
                        t0: track.frames[s],
                        obs_frames,
                        history: history_features(obs, dt),
                        future: track.positions[s + tau..s + len].to_vec(),
                        neighbors,
                    });
                    s += stride;
                }
            }
            run_start = i;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::AgentTrack;
    use proptest::prelude::*;

    fn line_track(agent: i64, start_frame: i64, n: usize) -> AgentTrack {
        let frames = (0..n as i64).map(|i| start_frame + 10 * i).collect();
        let positions = (0..n).map(|i| [i as f64 * 0.5, agent as f64]).collect();
        AgentTrack::new(agent, frames, positions).unwrap()
    }

    fn rec(tracks: Vec<AgentTrack>) -> SceneRecording {
        SceneRecording::new("s", 2.5, tracks).unwrap()
    }

    #[test]
    fn boundary_counts() {
        for (n, expected) in [(20, 1), (21, 2), (19, 0)] {
            let w = build_windows(&rec(vec![line_track(1, 0, n)]), 8, 12, 1).unwrap();
            assert_eq!(w.len(), expected, "track of {n} steps");
        }
    }

    #[test]
    fn gaps_split_runs() {
        let mut t = line_track(1, 0, 30);
        // remove annotation 15, leaving runs of 15 and 14 steps
        t.frames.remove(15);
        t.positions.remove(15);
        let w = build_windows(&rec(vec![t, line_track(2, 0, 3)]), 4, 6, 1).unwrap();
        let ones: Vec<_> = w.iter().filter(|s| s.agent_id == 1).collect();
        assert_eq!(ones.len(), (15 - 10 + 1) + (14 - 10 + 1));
    }

    #[test]
    fn sample_contents_match_track() {
        let t = line_track(7, 100, 26);
        let r = rec(vec![t.clone(), line_track(8, 100, 5), line_track(9, 130, 30)]);
        let w = build_windows(&r, 8, 12, 2).unwrap();
        let s = &w.iter().filter(|s| s.agent_id == 7).nth(1).unwrap();
        assert_eq!(s.t0, 120);
        assert_eq!(s.observed_positions(), t.positions[2..10].to_vec());
        assert_eq!(s.future, t.positions[10..22].to_vec());
        assert_eq!(s.goal(), Some(t.positions[21]));
        assert_eq!(s.obs_frames.len(), 8);
        // agent 8 ends at frame 140, agent 9 starts at 130: neither covers 120..190
        assert!(s.neighbors.is_empty());
        let later = w.iter().find(|s| s.agent_id == 7 && s.t0 == 140).unwrap();
        assert_eq!(later.neighbors.len(), 1);
        assert_eq!(later.neighbors[0].agent_id, 9);
        assert!((later.history[3][2] - 1.25).abs() < 1e-12);
    }

    #[test]
    fn zero_lengths_rejected() {
        assert!(build_windows(&rec(vec![line_track(1, 0, 5)]), 0, 3, 1).is_err());
    }

    proptest! {
        #[test]
        fn count_law(len in 1usize..60, tau in 1usize..10, horizon in 1usize..14) {
            let w = build_windows(&rec(vec![line_track(1, 0, len)]), tau, horizon, 1).unwrap();
            let expected = (len + 1).saturating_sub(tau + horizon);
            prop_assert_eq!(w.len(), expected);
        }
    }
}
