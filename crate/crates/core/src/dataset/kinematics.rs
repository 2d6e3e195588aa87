use super::Point;

/// Backward finite differences: `v[i] = (p[i] - p[i-1]) / dt` for `i >= 1`,
/// `v[0] = v[1]` (zero for a single position). Accelerations apply the same
/// rule to the velocities.
pub fn estimate_kinematics(positions: &[Point], dt: f64) -> (Vec<Point>, Vec<Point>) {
    let v = backward_diff(positions, dt);
    let a = backward_diff(&v, dt);
    (v, a)
}

fn backward_diff(xs: &[Point], dt: f64) -> Vec<Point> {
    let n = xs.len();
    let mut out = vec![[0.0; 2]; n];
    for i in 1..n {
        out[i] = [(xs[i][0] - xs[i - 1][0]) / dt, (xs[i][1] - xs[i - 1][1]) / dt];
    }
    if n > 1 {
        out[0] = out[1];
    }
    out
}

/// Stacks positions with their estimated velocities and accelerations into
/// the per-step `[x, y, vx, vy, ax, ay]` layout.
pub fn history_features(positions: &[Point], dt: f64) -> Vec<[f64; 6]> {
    let (v, a) = estimate_kinematics(positions, dt);
    positions
        .iter()
        .zip(v.iter().zip(&a))
        .map(|(p, (v, a))| [p[0], p[1], v[0], v[1], a[0], a[1]])
        .collect()
}
