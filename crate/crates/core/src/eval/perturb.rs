use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{history_features, AgentTrack, SceneRecording, SequenceSample};
use crate::error::{Error, Result};

fn normal(sigma: f64) -> Result<Normal<f64>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Config(format!("perturbation sigma must be >= 0, got {sigma}")));
    }
    Ok(Normal::new(0.0, sigma).expect("validated sigma"))
}

/// Adds i.i.d. `N(0, sigma^2)` noise to every observed position coordinate
/// and re-derives velocities and accelerations with step `dt`. The future
/// is untouched.
pub fn perturb_observations(sample: &SequenceSample, sigma: f64, dt: f64, rng: &mut impl Rng) -> Result<SequenceSample> {
    if sigma == 0.0 {
        return Ok(sample.clone());
    }
    let n = normal(sigma)?;
    let noisy: Vec<[f64; 2]> = sample
        .observed_positions()
        .iter()
        .map(|p| [p[0] + n.sample(rng), p[1] + n.sample(rng)])
        .collect();
    Ok(SequenceSample {
        history: history_features(&noisy, dt),
        ..sample.clone()
    })
}

/// Adds i.i.d. noise to every annotation of a recording; used to perturb
/// both the target histories and the density maps of a scene at once.
/// Bounds are kept so map geometry does not move.
pub fn perturb_recording(rec: &SceneRecording, sigma: f64, rng: &mut impl Rng) -> Result<SceneRecording> {
    let n = normal(sigma)?;
    let tracks = rec
        .tracks
        .iter()
        .map(|t| {
            let positions = t
                .positions
                .iter()
                .map(|p| [p[0] + n.sample(rng), p[1] + n.sample(rng)])
                .collect();
            AgentTrack::new(t.agent_id, t.frames.clone(), positions)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneRecording {
        tracks,
        ..rec.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> SequenceSample {
        let obs: Vec<[f64; 2]> = (0..8).map(|i| [0.4 * i as f64, 1.0]).collect();
        SequenceSample {
            scene_id: "s".into(),
            agent_id: 1,
            t0: 0,
            obs_frames: (0..8).map(|i| i * 10).collect(),
            history: history_features(&obs, 0.4),
            future: (8..20).map(|i| [0.4 * i as f64, 1.0]).collect(),
            neighbors: vec![],
        }
    }

    #[test]
    fn zero_sigma_is_identity_and_future_untouched() {
        let s = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(perturb_observations(&s, 0.0, 0.4, &mut rng).unwrap(), s);
        let p = perturb_observations(&s, 0.1, 0.4, &mut rng).unwrap();
        assert_eq!(p.future, s.future);
        assert_ne!(p.history, s.history);
        assert!(perturb_observations(&s, -1.0, 0.4, &mut rng).is_err());
    }

    #[test]
    fn empirical_std() {
        let s = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut diffs = Vec::new();
        while diffs.len() < 100_000 {
            let p = perturb_observations(&s, 0.1, 0.4, &mut rng).unwrap();
            for (a, b) in p.history.iter().zip(&s.history) {
                diffs.push(a[0] - b[0]);
                diffs.push(a[1] - b[1]);
            }
        }
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let std = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - 0.1).abs() < 0.002, "std {std}");
    }

    #[test]
    fn seeded_determinism() {
        let s = sample();
        let a = perturb_observations(&s, 0.1, 0.4, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = perturb_observations(&s, 0.1, 0.4, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }
}
