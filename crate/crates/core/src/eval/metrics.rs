use serde::{Deserialize, Serialize};

use crate::dataset::Point;
use crate::error::{contract, Result};

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn check(pred: &[Point], truth: &[Point]) -> Result<()> {
    if pred.len() != truth.len() || truth.is_empty() {
        return Err(contract(format!(
            "prediction has {} steps, ground truth {}",
            pred.len(),
            truth.len()
        )));
    }
    Ok(())
}

/// Mean L2 error over the horizon.
pub fn ade(pred: &[Point], truth: &[Point]) -> Result<f64> {
    check(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(a, b)| dist(*a, *b)).sum::<f64>() / truth.len() as f64)
}

/// L2 error at the final step.
pub fn fde(pred: &[Point], truth: &[Point]) -> Result<f64> {
    check(pred, truth)?;
    Ok(dist(pred[pred.len() - 1], truth[truth.len() - 1]))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectMode {
    /// minADE and minFDE taken independently over the candidates.
    #[default]
    MinAde,
    /// Pick the candidate with the lowest FDE and report its ADE and FDE.
    MinFdeThenAde,
}

impl std::str::FromStr for SelectMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "min_ade" => Ok(SelectMode::MinAde),
            "min_fde_then_ade" => Ok(SelectMode::MinFdeThenAde),
            other => Err(crate::Error::Config(format!(
                "unknown selection mode {other:?} (expected min_ade or min_fde_then_ade)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MinOfK {
    pub ade: f64,
    pub fde: f64,
    /// Candidate achieving `ade` (ties to the smallest index).
    pub index: usize,
}

pub fn min_of_k(preds: &[Vec<Point>], truth: &[Point], mode: SelectMode) -> Result<MinOfK> {
    if preds.is_empty() {
        return Err(contract("min-of-K needs at least one candidate"));
    }
    let ades = preds.iter().map(|p| ade(p, truth)).collect::<Result<Vec<_>>>()?;
    let fdes = preds.iter().map(|p| fde(p, truth)).collect::<Result<Vec<_>>>()?;
    let argmin = |v: &[f64]| {
        let mut best = 0;
        for (i, x) in v.iter().enumerate() {
            if *x < v[best] {
                best = i;
            }
        }
        best
    };
    Ok(match mode {
        SelectMode::MinAde => {
            let i = argmin(&ades);
            MinOfK {
                ade: ades[i],
                fde: fdes[argmin(&fdes)],
                index: i,
            }
        }
        SelectMode::MinFdeThenAde => {
            let i = argmin(&fdes);
            MinOfK {
                ade: ades[i],
                fde: fdes[i],
                index: i,
            }
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KdeConfig {
    pub bandwidth_floor: f64,
    /// Lower clamp on each step's log-density.
    pub log_density_floor: f64,
}

impl Default for KdeConfig {
    fn default() -> Self {
        Self {
            bandwidth_floor: 1e-6,
            log_density_floor: -20.0,
        }
    }
}

/// Scott's-rule bandwidths per axis: `S^(-1/6) * std` (unbiased std),
/// floored.
pub fn scott_bandwidth(points: &[Point], floor: f64) -> [f64; 2] {
    let n = points.len() as f64;
    let factor = n.powf(-1.0 / 6.0);
    let mut bw = [0.0; 2];
    for (d, slot) in bw.iter_mut().enumerate() {
        let mean = points.iter().map(|p| p[d]).sum::<f64>() / n;
        let var = points.iter().map(|p| (p[d] - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        *slot = (factor * var.sqrt()).max(floor);
    }
    bw
}

/// Log-density of `y` under a product-Gaussian KDE on `points`.
pub fn kde_log_density(points: &[Point], y: Point, bw: [f64; 2]) -> f64 {
    let logs: Vec<f64> = points
        .iter()
        .map(|p| {
            let u = (y[0] - p[0]) / bw[0];
            let v = (y[1] - p[1]) / bw[1];
            -0.5 * (u * u + v * v)
        })
        .collect();
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logs.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    lse - (points.len() as f64).ln() - (2.0 * std::f64::consts::PI * bw[0] * bw[1]).ln()
}

/// Mean over steps of `-log p(Y_t)` under a per-step KDE fit to the
/// samples (`S x T`), with Scott bandwidths unless `bandwidth` fixes them.
pub fn kde_nll_with(samples: &[Vec<Point>], truth: &[Point], cfg: &KdeConfig, bandwidth: Option<[f64; 2]>) -> Result<f64> {
    if samples.len() < 2 {
        return Err(contract(format!("KDE needs at least 2 samples, got {}", samples.len())));
    }
    for s in samples {
        check(s, truth)?;
    }
    let mut total = 0.0;
    for (t, y) in truth.iter().enumerate() {
        let pts: Vec<Point> = samples.iter().map(|s| s[t]).collect();
        let bw = bandwidth.unwrap_or_else(|| scott_bandwidth(&pts, cfg.bandwidth_floor));
        let logp = kde_log_density(&pts, *y, bw).max(cfg.log_density_floor);
        total -= logp;
    }
    Ok(total / truth.len() as f64)
}

pub fn kde_nll(samples: &[Vec<Point>], truth: &[Point], cfg: &KdeConfig) -> Result<f64> {
    kde_nll_with(samples, truth, cfg, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn traj(n: usize, f: impl Fn(usize) -> Point) -> Vec<Point> {
        (0..n).map(f).collect()
    }

    #[test]
    fn displacement_basics() {
        let y = traj(12, |i| [i as f64, 0.5 * i as f64]);
        assert_eq!(ade(&y, &y).unwrap(), 0.0);
        let off = traj(12, |i| [i as f64 + 3.0, 0.5 * i as f64 + 4.0]);
        assert!((ade(&off, &y).unwrap() - 5.0).abs() < 1e-12);
        assert!((fde(&off, &y).unwrap() - 5.0).abs() < 1e-12);
        assert!(ade(&off[..3], &y).is_err());
        let one = [[1.0, 1.0]];
        assert_eq!(ade(&one, &[[0.0, 0.0]]).unwrap(), fde(&one, &[[0.0, 0.0]]).unwrap());
    }

    #[test]
    fn min_of_k_exact_copy_wins() {
        let y = traj(12, |i| [i as f64, 1.0]);
        let garbage = traj(12, |_| [100.0, -100.0]);
        for mode in [SelectMode::MinAde, SelectMode::MinFdeThenAde] {
            let r = min_of_k(&[garbage.clone(), y.clone()], &y, mode).unwrap();
            assert_eq!((r.ade, r.fde, r.index), (0.0, 0.0, 1));
        }
        let single = min_of_k(&[garbage.clone()], &y, SelectMode::MinAde).unwrap();
        assert_eq!(single.ade, ade(&garbage, &y).unwrap());
    }

    #[test]
    fn kde_hand_example() {
        let samples = vec![vec![[0.0, 0.0]], vec![[2.0, 0.0]]];
        let nll = kde_nll_with(&samples, &[[1.0, 0.0]], &KdeConfig::default(), Some([1.0, 1.0])).unwrap();
        assert!((nll - 2.3379).abs() < 1e-4);
        assert!((nll - ((2.0 * std::f64::consts::PI).ln() + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn kde_concentrated_samples() {
        let y = traj(12, |i| [i as f64, 2.0]);
        let samples = vec![y.clone(); 50];
        assert!(kde_nll(&samples, &y, &KdeConfig::default()).unwrap() <= -10.0);
        assert!(kde_nll(&samples[..1], &y, &KdeConfig::default()).is_err());
        let far = traj(12, |_| [1e6, 1e6]);
        assert_eq!(kde_nll(&samples, &far, &KdeConfig::default()).unwrap(), 20.0);
    }

    proptest! {
        #[test]
        fn kde_translation_invariant(
            pts in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 5..20),
            shift in (-50.0f64..50.0, -50.0f64..50.0),
        ) {
            let samples: Vec<Vec<Point>> = pts.iter().map(|p| vec![[p.0, p.1]]).collect();
            let y = [[0.3, -0.2]];
            let a = kde_nll(&samples, &y, &KdeConfig::default()).unwrap();
            let moved: Vec<Vec<Point>> = pts.iter().map(|p| vec![[p.0 + shift.0, p.1 + shift.1]]).collect();
            let b = kde_nll(&moved, &[[0.3 + shift.0, -0.2 + shift.1]], &KdeConfig::default()).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn min_ade_nonincreasing_in_k(
            cands in prop::collection::vec(prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 4), 1..8),
        ) {
            let preds: Vec<Vec<Point>> = cands.iter().map(|c| c.iter().map(|p| [p.0, p.1]).collect()).collect();
            let y = vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]];
            let mut prev = f64::INFINITY;
            for k in 1..=preds.len() {
                let r = min_of_k(&preds[..k], &y, SelectMode::MinAde).unwrap();
                prop_assert!(r.ade <= prev);
                prev = r.ade;
            }
        }
    }
}
