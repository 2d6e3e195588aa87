use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{kde_nll, min_of_k, KdeConfig, SelectMode};
use super::perturb::perturb_recording;
use super::report::{evaluate_records, KdeSource, MetricsReport, PredictionRecord, Robustness, SceneMetrics};
use crate::dataset::{build_windows, SequenceSample};
use crate::error::{Error, Result};
use crate::model::{build_batch, PreparedSample, TrajectoryPipeline};
use crate::relation::Autoencoder;
use crate::source::{SampleSource, SceneData, WindowSource};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k: usize,
    pub select: SelectMode,
    /// Samples per window for the KDE negative log-likelihood; 0 skips it.
    pub kde_samples: usize,
    pub kde: KdeConfig,
    pub seed: u64,
    pub batch_size: usize,
    /// Observation noise standard deviation for the robustness run.
    pub perturb_sigma: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 20,
            select: SelectMode::MinAde,
            kde_samples: 2000,
            kde: KdeConfig::default(),
            seed: 1234,
            batch_size: 64,
            perturb_sigma: 0.1,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.batch_size == 0 {
            return Err(Error::Config("eval.k and eval.batch_size must be >= 1".into()));
        }
        if !(self.perturb_sigma >= 0.0) {
            return Err(Error::Config(format!("eval.perturb_sigma must be >= 0, got {}", self.perturb_sigma)));
        }
        Ok(())
    }
}

fn prepare_all(source: &dyn SampleSource, range: std::ops::Range<usize>) -> Result<Vec<PreparedSample>> {
    range.map(|i| source.prepare(i, false)).collect()
}

/// `k` predictions per window of `source`, in order, from one seeded stream.
pub fn predict_records(
    pipeline: &TrajectoryPipeline,
    source: &dyn SampleSource,
    k: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<PredictionRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(source.len());
    let mut start = 0;
    while start < source.len() {
        let end = (start + batch_size.max(1)).min(source.len());
        let prepared = prepare_all(source, start..end)?;
        let refs: Vec<&PreparedSample> = prepared.iter().collect();
        let batch = build_batch(&refs, &pipeline.arch, pipeline.dtype(), pipeline.device())?;
        for (i, p) in pipeline.predict(&batch, k, &mut rng)?.into_iter().enumerate() {
            let w = source.window(start + i);
            out.push(PredictionRecord {
                scene_id: w.scene_id.clone(),
                agent_id: w.agent_id,
                t0: w.t0,
                predictions: p.trajectories,
                ground_truth: w.future.clone(),
            });
        }
        start = end;
    }
    Ok(out)
}

/// KDE negative log-likelihood of each window's ground truth under
/// `samples` fresh predictions. `None` when the model produces a single
/// deterministic candidate.
pub fn kde_values(
    pipeline: &TrajectoryPipeline,
    source: &dyn SampleSource,
    samples: usize,
    cfg: &KdeConfig,
    seed: u64,
) -> Result<Option<Vec<f64>>> {
    if samples < 2 || pipeline.effective_k(samples) < 2 {
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(source.len());
    for i in 0..source.len() {
        let prepared = source.prepare(i, false)?;
        let batch = build_batch(&[&prepared], &pipeline.arch, pipeline.dtype(), pipeline.device())?;
        let preds = pipeline.predict(&batch, samples, &mut rng)?;
        out.push(kde_nll(&preds[0].trajectories, &source.window(i).future, cfg)?);
    }
    Ok(Some(out))
}

/// Mean best-of-`k` ADE and FDE over `source`.
pub fn displacement_summary(
    pipeline: &TrajectoryPipeline,
    source: &dyn SampleSource,
    k: usize,
    select: SelectMode,
    batch_size: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let records = predict_records(pipeline, source, k, batch_size, seed)?;
    if records.is_empty() {
        return Err(Error::Data("no windows to evaluate".into()));
    }
    let (mut a, mut f) = (0.0, 0.0);
    for r in &records {
        let m = min_of_k(&r.predictions, &r.ground_truth, select)?;
        a += m.ade;
        f += m.fde;
    }
    Ok((a / records.len() as f64, f / records.len() as f64))
}

/// Full report over `source` plus the raw predictions.
pub fn evaluate_model(
    pipeline: &TrajectoryPipeline,
    source: &dyn SampleSource,
    cfg: &EvalConfig,
    fingerprint: &str,
) -> Result<(MetricsReport, Vec<PredictionRecord>)> {
    cfg.validate()?;
    let records = predict_records(pipeline, source, cfg.k, cfg.batch_size, cfg.seed)?;
    let kde = if cfg.kde_samples > 0 {
        kde_values(pipeline, source, cfg.kde_samples, &cfg.kde, cfg.seed ^ 0x6de)?
    } else {
        None
    };
    let kde_source = kde.as_deref().map_or(KdeSource::None, KdeSource::Precomputed);
    let (per_scene, aggregate) = evaluate_records(&records, kde_source, cfg.select)?;
    Ok((
        MetricsReport {
            per_scene,
            aggregate,
            robustness: None,
            k: pipeline.effective_k(cfg.k),
            select: cfg.select,
            kde_samples: kde.is_some().then_some(cfg.kde_samples),
            config_fingerprint: fingerprint.to_string(),
        },
        records,
    ))
}

/// Same windows as `clean`, observed in copies of `scenes` whose every
/// position got Gaussian noise of `sigma`. Map geometry and the ground-truth
/// futures stay those of the clean data.
#[allow(clippy::too_many_arguments)]
pub fn perturbed_source(
    scenes: &[&SceneData],
    clean: &[SequenceSample],
    ae: Option<&Autoencoder>,
    sigma_map: f64,
    sigma: f64,
    seed: u64,
) -> Result<WindowSource> {
    let mut noisy_scenes = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let recording = perturb_recording(&scene.recording, sigma, &mut rng)?;
        let (tau, horizon) = clean
            .iter()
            .find(|w| w.scene_id == scene.recording.scene_id)
            .map_or((1, 1), |w| (w.tau(), w.horizon()));
        let windows = build_windows(&recording, tau, horizon, 1)?;
        noisy_scenes.push(SceneData {
            recording,
            geometry: scene.geometry.clone(),
            windows,
        });
    }
    let mut index: HashMap<(&str, i64, i64), &SequenceSample> = HashMap::new();
    for s in &noisy_scenes {
        for w in &s.windows {
            index.insert((w.scene_id.as_str(), w.agent_id, w.t0), w);
        }
    }
    let picked = clean
        .iter()
        .map(|c| {
            index
                .get(&(c.scene_id.as_str(), c.agent_id, c.t0))
                .map(|w| (*w).clone())
                .ok_or_else(|| crate::error::contract(format!("window {}/{}/{} missing after perturbation", c.scene_id, c.agent_id, c.t0)))
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&SceneData> = noisy_scenes.iter().collect();
    WindowSource::new(picked, &refs, ae, sigma_map)?.with_futures_from(clean)
}

/// Best-of-K errors on clean and perturbed observations of the same windows.
pub fn robustness(
    pipeline: &TrajectoryPipeline,
    clean: &dyn SampleSource,
    perturbed: &dyn SampleSource,
    cfg: &EvalConfig,
) -> Result<Robustness> {
    let eval = |src: &dyn SampleSource| -> Result<SceneMetrics> {
        let records = predict_records(pipeline, src, cfg.k, cfg.batch_size, cfg.seed)?;
        Ok(evaluate_records(&records, KdeSource::None, cfg.select)?.1)
    };
    Ok(Robustness::new(cfg.perturb_sigma, eval(clean)?, eval(perturbed)?))
}
