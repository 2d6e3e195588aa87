use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{ade, fde, kde_nll, min_of_k, KdeConfig, SelectMode};
use crate::dataset::Point;
use crate::error::{Error, Result};

/// One evaluated window: `K x T` predictions and the `T` ground-truth
/// positions, world coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub scene_id: String,
    pub agent_id: i64,
    pub t0: i64,
    pub predictions: Vec<Vec<Point>>,
    pub ground_truth: Vec<Point>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    /// Mean over the K candidates of each candidate's ADE.
    pub ade: f64,
    pub fde: f64,
    pub min_ade: f64,
    pub min_fde: f64,
    pub kde_nll: Option<f64>,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Robustness {
    pub sigma: f64,
    pub clean: SceneMetrics,
    pub perturbed: SceneMetrics,
    /// Perturbed minus clean best-of-K errors.
    pub ade_increase: f64,
    pub fde_increase: f64,
}

impl Robustness {
    pub fn new(sigma: f64, clean: SceneMetrics, perturbed: SceneMetrics) -> Self {
        Self {
            sigma,
            ade_increase: perturbed.min_ade - clean.min_ade,
            fde_increase: perturbed.min_fde - clean.min_fde,
            clean,
            perturbed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_scene: BTreeMap<String, SceneMetrics>,
    /// Unweighted mean over scenes.
    pub aggregate: SceneMetrics,
    pub robustness: Option<Robustness>,
    pub k: usize,
    pub select: SelectMode,
    /// Samples per window behind `kde_nll`.
    pub kde_samples: Option<usize>,
    pub config_fingerprint: String,
}

pub enum KdeSource<'a> {
    None,
    /// One value per record, computed elsewhere (e.g. from a larger sample).
    Precomputed(&'a [f64]),
    /// Fit on each record's own predictions (needs K >= 2).
    FromPredictions(&'a KdeConfig),
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Per-scene means of every metric and their unweighted mean over scenes.
pub fn evaluate_records(
    records: &[PredictionRecord],
    kde: KdeSource<'_>,
    select: SelectMode,
) -> Result<(BTreeMap<String, SceneMetrics>, SceneMetrics)> {
    if records.is_empty() {
        return Err(Error::Data("no prediction records to evaluate".into()));
    }
    let k = records[0].predictions.len();
    if k == 0 || records.iter().any(|r| r.predictions.len() != k) {
        return Err(Error::Data("prediction records must all carry the same non-zero K".into()));
    }
    if let KdeSource::Precomputed(v) = kde {
        if v.len() != records.len() {
            return Err(crate::error::contract("one KDE value per record required"));
        }
    }
    let mut rows: BTreeMap<String, Vec<[f64; 5]>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let ades = r.predictions.iter().map(|p| ade(p, &r.ground_truth)).collect::<Result<Vec<_>>>()?;
        let fdes = r.predictions.iter().map(|p| fde(p, &r.ground_truth)).collect::<Result<Vec<_>>>()?;
        let m = min_of_k(&r.predictions, &r.ground_truth, select)?;
        let nll = match &kde {
            KdeSource::None => f64::NAN,
            KdeSource::Precomputed(v) => v[i],
            KdeSource::FromPredictions(cfg) if k >= 2 => kde_nll(&r.predictions, &r.ground_truth, cfg)?,
            KdeSource::FromPredictions(_) => f64::NAN,
        };
        rows.entry(r.scene_id.clone())
            .or_default()
            .push([mean(ades.into_iter()), mean(fdes.into_iter()), m.ade, m.fde, nll]);
    }
    let per_scene: BTreeMap<String, SceneMetrics> = rows
        .into_iter()
        .map(|(id, rs)| {
            let col = |c: usize| mean(rs.iter().map(|r| r[c]));
            let nll = col(4);
            (
                id,
                SceneMetrics {
                    ade: col(0),
                    fde: col(1),
                    min_ade: col(2),
                    min_fde: col(3),
                    kde_nll: nll.is_finite().then_some(nll),
                    count: rs.len(),
                },
            )
        })
        .collect();
    let scenes: Vec<&SceneMetrics> = per_scene.values().collect();
    let nll = mean(scenes.iter().filter_map(|s| s.kde_nll));
    let aggregate = SceneMetrics {
        ade: mean(scenes.iter().map(|s| s.ade)),
        fde: mean(scenes.iter().map(|s| s.fde)),
        min_ade: mean(scenes.iter().map(|s| s.min_ade)),
        min_fde: mean(scenes.iter().map(|s| s.min_fde)),
        kde_nll: nll.is_finite().then_some(nll),
        count: scenes.iter().map(|s| s.count).sum(),
    };
    Ok((per_scene, aggregate))
}

pub fn write_dump(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_dump(path: &Path) -> Result<Vec<PredictionRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if rec.predictions.iter().any(|p| p.len() != rec.ground_truth.len()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "prediction length differs from ground truth".into(),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.3}"))
}

/// Plain-text table of a report.
pub fn render_table(report: &MetricsReport) -> String {
    let mut s = format!(
        "{:<16} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
        "scene", "n", "ade", "fde", "minADE", "minFDE", "kde_nll"
    );
    let row = |name: &str, m: &SceneMetrics| {
        format!(
            "{:<16} {:>6} {:>8.3} {:>8.3} {:>8.3} {:>8.3} {:>8}\n",
            name,
            m.count,
            m.ade,
            m.fde,
            m.min_ade,
            m.min_fde,
            fmt_opt(m.kde_nll)
        )
    };
    for (id, m) in &report.per_scene {
        s.push_str(&row(id, m));
    }
    s.push_str(&row("average", &report.aggregate));
    if let Some(r) = &report.robustness {
        s.push_str(&format!(
            "perturbation sigma {:.3}: minADE +{:.3}, minFDE +{:.3}\n",
            r.sigma, r.ade_increase, r.fde_increase
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(scene: &str, off: f64) -> PredictionRecord {
        let gt: Vec<Point> = (0..4).map(|i| [i as f64, 0.0]).collect();
        PredictionRecord {
            scene_id: scene.into(),
            agent_id: 1,
            t0: 0,
            predictions: vec![gt.iter().map(|p| [p[0], p[1] + off]).collect(), gt.iter().map(|p| [p[0], p[1] + 2.0 * off]).collect()],
            ground_truth: gt,
        }
    }

    #[test]
    fn perfect_predictions_are_zero() {
        let (_, agg) = evaluate_records(&[rec("a", 0.0)], KdeSource::None, SelectMode::MinAde).unwrap();
        assert_eq!((agg.ade, agg.fde, agg.min_ade, agg.min_fde), (0.0, 0.0, 0.0, 0.0));
        assert!(evaluate_records(&[], KdeSource::None, SelectMode::MinAde).is_err());
    }

    #[test]
    fn aggregate_is_unweighted_scene_mean() {
        let records = vec![rec("a", 1.0), rec("a", 1.0), rec("a", 1.0), rec("b", 3.0)];
        let (per, agg) = evaluate_records(&records, KdeSource::None, SelectMode::MinAde).unwrap();
        assert_eq!(per["a"].min_ade, 1.0);
        assert_eq!(per["b"].min_ade, 3.0);
        assert_eq!(agg.min_ade, 2.0);
        assert_eq!(per["a"].ade, 1.5);
        assert!(agg.min_ade <= agg.ade);
    }

    #[test]
    fn robustness_increase_is_difference() {
        let clean = SceneMetrics { min_ade: 0.20, min_fde: 0.4, ..Default::default() };
        let noisy = SceneMetrics { min_ade: 0.52, min_fde: 0.5, ..Default::default() };
        let r = Robustness::new(0.1, clean, noisy);
        assert!((r.ade_increase - 0.32).abs() < 1e-12);
    }

    #[test]
    fn dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let records = vec![rec("a", 0.5), rec("b", 0.25)];
        write_dump(&path, &records).unwrap();
        assert_eq!(read_dump(&path).unwrap(), records);
        std::fs::write(&path, "{\"bad\": 1}\n").unwrap();
        assert!(matches!(read_dump(&path), Err(Error::Parse { line: 1, .. })));
    }
}
