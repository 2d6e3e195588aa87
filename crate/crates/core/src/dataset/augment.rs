use super::{Point, SceneRecording};
use crate::error::{Error, Result};

/// Rotation augmentation uses multiples of this angle.
pub const ROTATION_STEP_DEG: u32 = 30;

pub fn rotate_point(p: Point, degrees: f64) -> Point {
    let (s, c) = degrees.to_radians().sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1]]
}

/// Rotates every position about the world origin. `degrees` must be one of
/// 0, 30, ..., 330. The rotated scene id carries an `@rot<deg>` suffix
/// unless the angle is zero.
pub fn rotate_scene(rec: &SceneRecording, degrees: u32) -> Result<SceneRecording> {
    if degrees >= 360 || degrees % ROTATION_STEP_DEG != 0 {
        return Err(Error::Config(format!(
            "rotation must be a multiple of {ROTATION_STEP_DEG} in [0, 330], got {degrees}"
        )));
    }
    if degrees == 0 {
        return Ok(rec.clone());
    }
    let mut out = rec.clone();
    for t in &mut out.tracks {
        for p in &mut t.positions {
            *p = rotate_point(*p, degrees as f64);
        }
    }
    out.recompute_bounds();
    out.scene_id = format!("{}@rot{degrees}", rec.scene_id);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{estimate_kinematics, AgentTrack};
    use proptest::prelude::*;

    #[test]
    fn quarter_turn() {
        let p = rotate_point([1.0, 0.0], 90.0);
        assert!((p[0]).abs() < 1e-9 && (p[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn thirty_degrees() {
        let p = rotate_point([1.0, 1.0], 30.0);
        let (s, c) = (0.5f64, 3f64.sqrt() / 2.0);
        assert!((p[0] - (c - s)).abs() < 1e-12);
        assert!((p[1] - (s + c)).abs() < 1e-12);
        assert!((p[0] - 0.3660).abs() < 1e-4 && (p[1] - 1.3660).abs() < 1e-4);
    }

    #[test]
    fn identity_and_invalid_angles() {
        let t = AgentTrack::new(1, vec![0, 10], vec![[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let rec = SceneRecording::new("s", 2.5, vec![t]).unwrap();
        assert_eq!(rotate_scene(&rec, 0).unwrap(), rec);
        assert!(rotate_scene(&rec, 45).is_err());
        assert!(rotate_scene(&rec, 360).is_err());
        let r = rotate_scene(&rec, 180).unwrap();
        assert_eq!(r.scene_id, "s@rot180");
        assert!((r.bounds.min[0] + 3.0).abs() < 1e-9 && (r.bounds.max[1] + 2.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn kinematic_magnitudes_invariant(
            pts in prop::collection::vec((-20.0f64..20.0, -20.0f64..20.0), 2..10),
            k in 0u32..12,
        ) {
            let p: Vec<Point> = pts.iter().map(|&(x, y)| [x, y]).collect();
            let rp: Vec<Point> = p.iter().map(|q| rotate_point(*q, (k * 30) as f64)).collect();
            let (v, a) = estimate_kinematics(&p, 0.4);
            let (rv, ra) = estimate_kinematics(&rp, 0.4);
            let norm = |x: &Point| x[0].hypot(x[1]);
            for i in 0..p.len() {
                prop_assert!((norm(&v[i]) - norm(&rv[i])).abs() < 1e-9);
                prop_assert!((norm(&a[i]) - norm(&ra[i])).abs() < 1e-9);
            }
        }
    }
}
