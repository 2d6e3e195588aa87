use candle_core::{DType, Device, Tensor};
use candle_nn::VarMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{batch_loss, kl_weight, learning_rate, Adam, TrainConfig};
use crate::density::render_density_frame;
use crate::error::{Error, Result};
use crate::eval::{displacement_summary, SelectMode};
use crate::model::{build_batch, Mode, PreparedSample, TrajectoryPipeline};
use crate::nn::{seeded_init, snapshot, var_builder};
use crate::relation::{reconstruction_loss, Autoencoder, AutoencoderArch};
use crate::source::{SampleSource, SceneData};

/// Seed offsets separating the random streams of the two stages.
const AE_STREAM: u64 = 0xae;
const VALIDATION_SEED: u64 = 0x7a11d;

fn diverged(epoch: usize, err: Error) -> Error {
    match err {
        Error::Contract(detail) => Error::Diverged { epoch, detail },
        other => other,
    }
}

/// Renders every annotated frame of `scenes` (evenly thinned to
/// `max_frames` when given) into one host buffer of `[N, H, W]` maps.
pub fn render_training_maps(
    scenes: &[&SceneData],
    sigma_map: f64,
    max_frames: Option<usize>,
) -> Result<(Vec<f32>, usize, (usize, usize))> {
    let mut frames = Vec::new();
    for (s, scene) in scenes.iter().enumerate() {
        frames.extend(scene.recording.frame_ids().into_iter().map(|f| (s, f)));
    }
    if let Some(max) = max_frames {
        if max > 0 && frames.len() > max {
            let n = frames.len();
            frames = (0..max).map(|i| frames[i * n / max]).collect();
        }
    }
    let size = scenes.first().map(|s| s.geometry.map_size).ok_or_else(|| Error::Data("no training scenes".into()))?;
    let mut data = Vec::with_capacity(frames.len() * size.0 * size.1);
    for (s, f) in &frames {
        let scene = scenes[*s];
        if scene.geometry.map_size != size {
            return Err(Error::Config("training scenes use different map sizes".into()));
        }
        let map = render_density_frame(&scene.recording.positions_at(*f), &scene.geometry, sigma_map)?;
        data.extend(map.data.iter().map(|v| *v as f32));
    }
    Ok((data, frames.len(), size))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderHistory {
    /// Mean reconstruction loss per epoch.
    pub losses: Vec<f64>,
}

pub struct AutoencoderOutputs {
    pub autoencoder: Autoencoder,
    pub vars: VarMap,
    pub optimizer: Adam,
    pub history: AutoencoderHistory,
}

/// Fits the map autoencoder on reconstruction error. `maps` holds `count`
/// maps of `size` as produced by [`render_training_maps`]. `on_epoch`
/// receives the epoch index and its mean loss.
#[allow(clippy::too_many_arguments)]
pub fn train_autoencoder(
    maps: &[f32],
    count: usize,
    arch: &AutoencoderArch,
    cfg: &TrainConfig,
    dtype: DType,
    device: &Device,
    on_epoch: &mut dyn FnMut(usize, f64, &Autoencoder, &VarMap, &Adam) -> Result<()>,
) -> Result<AutoencoderOutputs> {
    arch.validate()?;
    let (h, w) = arch.map_size;
    if count == 0 || maps.len() != count * h * w {
        return Err(Error::Data(format!(
            "expected {count} maps of {h}x{w}, got {} values",
            maps.len()
        )));
    }
    let vars = VarMap::new();
    let autoencoder = Autoencoder::new(arch, var_builder(&vars, dtype, device))?;
    seeded_init(&vars, cfg.seed ^ AE_STREAM)?;
    let mut optimizer = Adam::new(&vars, cfg.grad_clip)?;
    let mut history = AutoencoderHistory::default();
    let per = h * w;
    for epoch in 0..cfg.ae_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ AE_STREAM);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..count).collect();
        order.shuffle(&mut rng);
        let lr = learning_rate(epoch, cfg);
        let (mut total, mut seen) = (0.0, 0usize);
        for chunk in order.chunks(cfg.ae_batch_size) {
            let mut data = Vec::with_capacity(chunk.len() * per);
            for i in chunk {
                data.extend_from_slice(&maps[i * per..(i + 1) * per]);
            }
            let x = Tensor::from_vec(data, (chunk.len(), 1, h, w), device)?.to_dtype(dtype)?;
            let recon = autoencoder.decode(&autoencoder.encode(&x)?)?;
            let loss = reconstruction_loss(&x, &recon)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("reconstruction loss {value}"),
                });
            }
            optimizer.step(&loss.backward()?, lr).map_err(|e| diverged(epoch, e))?;
            total += value * chunk.len() as f64;
            seen += chunk.len();
        }
        let mean = total / seen as f64;
        log::info!("autoencoder epoch {epoch}: loss {mean:.6e}");
        history.losses.push(mean);
        on_epoch(epoch, mean, &autoencoder, &vars, &optimizer)?;
    }
    Ok(AutoencoderOutputs {
        autoencoder,
        vars,
        optimizer,
        history,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub beta: f64,
    pub loss_total: f64,
    pub loss_goal: f64,
    pub loss_traj: f64,
    pub loss_kld: f64,
    #[serde(rename = "val_minADE")]
    pub val_min_ade: Option<f64>,
    #[serde(rename = "val_minFDE")]
    pub val_min_fde: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r).map_err(|e| Error::Data(format!("serializing training log: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(format!("serializing training log: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
    }
}

/// Where to pick up an interrupted run.
pub struct Resume {
    /// First epoch still to run.
    pub start_epoch: usize,
    pub optimizer: Adam,
}

pub struct TrainOutputs {
    pub history: TrainHistory,
    pub optimizer: Adam,
    /// Epoch with the lowest validation minADE and its parameters.
    pub best: Option<(usize, Vec<(String, Tensor)>)>,
}

/// Trains everything but the frozen autoencoder. Each epoch shuffles and
/// draws latent noise from its own seeded stream, so a resumed run repeats
/// the epochs it skips exactly. `on_epoch` sees the finished epoch's
/// record, the model and the optimizer (for checkpointing).
pub fn train_full(
    pipeline: &TrajectoryPipeline,
    train: &dyn SampleSource,
    validation: Option<&dyn SampleSource>,
    cfg: &TrainConfig,
    resume: Option<Resume>,
    on_epoch: &mut dyn FnMut(&EpochRecord, &TrajectoryPipeline, &Adam) -> Result<()>,
) -> Result<TrainOutputs> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("no training windows".into()));
    }
    let prepared: Vec<PreparedSample> = (0..train.len()).map(|i| train.prepare(i, true)).collect::<Result<_>>()?;
    let (start, mut optimizer) = match resume {
        Some(r) => (r.start_epoch, r.optimizer),
        None => (0, Adam::new(&pipeline.vars, cfg.grad_clip)?),
    };
    let k = pipeline.effective_k(cfg.k);
    let arch = pipeline.arch.clone();
    let mut history = TrainHistory::default();
    let mut best: Option<(usize, f64, Vec<(String, Tensor)>)> = None;
    for epoch in start..cfg.epochs {
        let lr = learning_rate(epoch, cfg);
        let beta = kl_weight(epoch, cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        for chunk in order.chunks(cfg.batch_size) {
            let samples: Vec<&PreparedSample> = chunk.iter().map(|i| &prepared[*i]).collect();
            let batch = build_batch(&samples, &arch, pipeline.dtype(), pipeline.device())?;
            let noise = if arch.use_goal {
                Some(pipeline.draw_noise(&mut rng, batch.len(), k)?)
            } else {
                None
            };
            let out = pipeline.forward(&batch, Mode::Train, noise.as_ref())?;
            let future = batch
                .future
                .as_ref()
                .ok_or_else(|| crate::error::contract("training batch has no future"))?;
            let loss = batch_loss(&out, future, beta, cfg.loss_min_mode, arch.use_goal)?;
            if !loss.parts.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("loss {} (goal {}, traj {}, kl {})", loss.parts.total, loss.parts.goal, loss.parts.traj, loss.parts.kld),
                });
            }
            optimizer.step(&loss.total.backward()?, lr).map_err(|e| diverged(epoch, e))?;
            let n = chunk.len() as f64;
            for (s, v) in sums.iter_mut().zip([loss.parts.total, loss.parts.goal, loss.parts.traj, loss.parts.kld]) {
                *s += v * n;
            }
        }
        let n = prepared.len() as f64;
        let (val_min_ade, val_min_fde) = match validation {
            Some(v) if !v.is_empty() => {
                let (a, f) = displacement_summary(pipeline, v, cfg.val_k, SelectMode::MinAde, cfg.batch_size, VALIDATION_SEED)?;
                (Some(a), Some(f))
            }
            _ => (None, None),
        };
        let record = EpochRecord {
            epoch,
            lr,
            beta,
            loss_total: sums[0] / n,
            loss_goal: sums[1] / n,
            loss_traj: sums[2] / n,
            loss_kld: sums[3] / n,
            val_min_ade,
            val_min_fde,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} (goal {:.4}, traj {:.4}, kl {:.4}) val minADE {:?}",
            record.loss_total,
            record.loss_goal,
            record.loss_traj,
            record.loss_kld,
            record.val_min_ade
        );
        if let Some(a) = val_min_ade {
            if best.as_ref().map_or(true, |b| a < b.1) {
                best = Some((epoch, a, snapshot(&pipeline.vars)?));
            }
        }
        on_epoch(&record, pipeline, &optimizer)?;
        history.records.push(record);
    }
    Ok(TrainOutputs {
        history,
        optimizer,
        best: best.map(|(e, _, v)| (e, v)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synthetic::{simulate_crowd, CrowdSimConfig};
    use crate::model::ModelArch;
    use crate::nn::tensor_to_vec;
    use crate::source::WindowSource;

    fn scene() -> SceneData {
        let rec = simulate_crowd(
            &CrowdSimConfig {
                duration_s: 40.0,
                ..Default::default()
            },
            "plaza",
        )
        .unwrap();
        SceneData::new(rec, (16, 16), 1.0, 4, 3, 4).unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 16,
            k: 3,
            val_k: 3,
            ae_epochs: 2,
            ..Default::default()
        }
    }

    #[test]
    fn autoencoder_loss_history_is_finite() {
        let s = scene();
        let (maps, n, _) = render_training_maps(&[&s], 2.0, Some(40)).unwrap();
        assert_eq!(n, 40);
        let out = train_autoencoder(&maps, n, &AutoencoderArch::tiny(), &tiny_cfg(), DType::F32, &Device::Cpu, &mut |_, _, _, _, _| Ok(())).unwrap();
        assert_eq!(out.history.losses.len(), 2);
        assert!(out.history.losses.iter().all(|l| l.is_finite()));
    }

    fn run(cfg: &TrainConfig, resume_at: Option<usize>) -> (Vec<f64>, TrainHistory) {
        let s = scene();
        let arch = ModelArch::tiny();
        let pipeline = TrajectoryPipeline::new(&arch, 3, DType::F32, &Device::Cpu).unwrap();
        let windows: Vec<_> = s.windows.iter().take(24).cloned().collect();
        let src = WindowSource::new(windows, &[&s], Some(&pipeline.autoencoder), 2.0).unwrap();
        let mut saved = None;
        let first_cfg = TrainConfig {
            epochs: resume_at.unwrap_or(cfg.epochs),
            ..cfg.clone()
        };
        let out = train_full(&pipeline, &src, Some(&src), &first_cfg, None, &mut |_, _, _| Ok(())).unwrap();
        let mut history = out.history;
        if resume_at.is_some() {
            // Round-trip the state through fresh objects as a checkpoint would.
            let snap = snapshot(&pipeline.vars).unwrap();
            let state: std::collections::HashMap<String, Tensor> = out.optimizer.state().into_iter().collect();
            let step = out.optimizer.step_count();
            let fresh = TrajectoryPipeline::new(&arch, 99, DType::F32, &Device::Cpu).unwrap();
            for (name, t) in &snap {
                crate::nn::set_var(&fresh.vars, name, t).unwrap();
            }
            crate::nn::copy_vars(&pipeline.autoencoder_vars, &fresh.autoencoder_vars).unwrap();
            let mut opt = Adam::new(&fresh.vars, cfg.grad_clip).unwrap();
            opt.restore(&state, step).unwrap();
            let rest = train_full(
                &fresh,
                &src,
                Some(&src),
                cfg,
                Some(Resume {
                    start_epoch: resume_at.unwrap(),
                    optimizer: opt,
                }),
                &mut |_, _, _| Ok(()),
            )
            .unwrap();
            history.records.extend(rest.history.records);
            saved = Some(fresh);
        }
        let final_vars = saved.as_ref().map_or(&pipeline.vars, |p| &p.vars);
        let flat: Vec<f64> = snapshot(final_vars)
            .unwrap()
            .iter()
            .flat_map(|(_, t)| tensor_to_vec(t).unwrap())
            .collect();
        (flat, history)
    }

    #[test]
    fn resumed_training_matches_uninterrupted() {
        let cfg = TrainConfig { epochs: 3, ..tiny_cfg() };
        let (a, ha) = run(&cfg, None);
        let (b, hb) = run(&cfg, Some(1));
        assert_eq!(ha, hb);
        assert_eq!(a, b);
        assert_eq!(ha.records.len(), 3);
        let csv = ha.to_csv().unwrap();
        assert!(csv.starts_with("epoch,lr,beta,loss_total,loss_goal,loss_traj,loss_kld,val_minADE,val_minFDE"));
    }
}
