use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::Serialize;

use super::config::RunConfig;
use super::experiment::{assemble, prepare_cache};
use super::{Cli, EvalSplit};
use crate::dataset::cache::verify_cache;
use crate::dataset::synthetic::{simulate_crowd, CrowdSimConfig};
use crate::dataset::write_ethucy_file;
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_model, evaluate_records, perturbed_source, predict_records, render_table, write_dump, KdeSource,
    MetricsReport, Robustness,
};
use crate::model::TrajectoryPipeline;
use crate::nn::{copy_vars, set_var, snapshot};
use crate::source::WindowSource;
use crate::train::{
    load_autoencoder, load_pipeline, render_training_maps, save_autoencoder, save_pipeline, train_autoencoder,
    train_full, Adam, EpochRecord, LoadedPipeline, Resume, TrainHistory,
};

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn copy(from: &Path, to: &Path) -> Result<()> {
    std::fs::copy(from, to)
        .map(|_| ())
        .map_err(|e| Error::io(format!("copying {} to {}", from.display(), to.display()), e))
}

#[derive(Serialize)]
struct RunInfo<'a> {
    command: &'a str,
    args: Vec<String>,
    deterministic: bool,
    version: &'a str,
    config_fingerprint: String,
}

/// `--run-dir` as given, or `<out>/<UTC timestamp>-<config hash>-<command>`.
/// Holds `config.toml` (the resolved config) and `run.json`.
pub fn create_run_dir(cfg: &RunConfig, cli: &Cli, command: &str) -> Result<PathBuf> {
    let fingerprint = cfg.fingerprint()?;
    let dir = match &cli.run_dir {
        Some(d) => d.clone(),
        None => {
            let stamp = chrono::Utc::now().format("%Y%m%d-%H%M%S");
            let base = cfg.run.out_dir.join(format!("{stamp}-{}-{command}", &fingerprint[..8]));
            let mut dir = base.clone();
            let mut n = 1;
            while dir.exists() {
                dir = PathBuf::from(format!("{}-{n}", base.display()));
                n += 1;
            }
            dir
        }
    };
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    write(&dir.join("config.toml"), cfg.to_toml()?)?;
    let info = RunInfo {
        command,
        args: std::env::args().collect(),
        deterministic: cli.deterministic,
        version: env!("CARGO_PKG_VERSION"),
        config_fingerprint: fingerprint,
    };
    write(&dir.join("run.json"), serde_json::to_vec_pretty(&info)?)?;
    Ok(dir)
}

pub fn synth_scene(output: &Path, name: &str, duration: f64, seed: u64) -> Result<()> {
    if !(duration > 0.0) {
        return Err(Error::Config(format!("duration must be positive, got {duration}")));
    }
    let rec = simulate_crowd(
        &CrowdSimConfig {
            duration_s: duration,
            seed,
            ..Default::default()
        },
        name,
    )?;
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
    }
    write_ethucy_file(&rec, output)?;
    println!(
        "wrote {} agents, {} annotations to {}",
        rec.tracks.len(),
        rec.num_annotations(),
        output.display()
    );
    Ok(())
}

pub fn prepare_data(cfg: &RunConfig, scenes: Option<&[String]>, verify: bool) -> Result<()> {
    let dir = &cfg.data.cache_dir;
    if verify {
        let manifest = verify_cache(dir)?;
        println!("cache {} verified: {} scenes", dir.display(), manifest.scenes.len());
        return Ok(());
    }
    let manifest = prepare_cache(cfg, scenes)?;
    for s in &manifest.scenes {
        log::info!("{}: {} windows, {} frames", s.scene_id, s.num_windows, s.num_frames);
    }
    println!("cache written to {} ({} scenes)", dir.display(), manifest.scenes.len());
    Ok(())
}

pub fn pretrain_ae(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let exp = assemble(cfg)?;
    let (maps, count, _) = render_training_maps(&exp.ae_scene_refs(), cfg.density.sigma_map, cfg.train.ae_max_frames)?;
    log::info!("pretraining the autoencoder on {count} maps");
    let config_text = cfg.to_toml()?;
    let ckpt = dir.join("autoencoder.safetensors");
    let mut log_rows = String::from("epoch,loss\n");
    let out = train_autoencoder(
        &maps,
        count,
        &cfg.model.autoencoder,
        &cfg.train,
        cfg.run.precision.dtype(),
        &Device::Cpu,
        &mut |epoch, loss, ae, vars, opt| {
            log_rows.push_str(&format!("{epoch},{loss:e}\n"));
            write(&dir.join("ae_log.csv"), &log_rows)?;
            save_autoencoder(&ckpt, ae, vars, epoch, Some(opt), &config_text)
        },
    )?;
    std::fs::create_dir_all(&cfg.run.out_dir).map_err(|e| Error::io(format!("creating {}", cfg.run.out_dir.display()), e))?;
    copy(&ckpt, &cfg.run.out_dir.join("autoencoder.safetensors"))?;
    if let (Some(first), Some(last)) = (out.history.losses.first(), out.history.losses.last()) {
        println!("autoencoder loss {first:.4e} -> {last:.4e}; checkpoint {}", ckpt.display());
    }
    Ok(())
}

fn rng_state(cfg: &RunConfig, next_epoch: usize) -> String {
    serde_json::json!({ "seed": cfg.train.seed, "next_epoch": next_epoch }).to_string()
}

fn require(path: &Path, what: &str, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Checkpoint(format!("{what} not found at {} ({hint})", path.display())))
    }
}

fn previous_records(resume: &Path, before: usize) -> Result<Vec<EpochRecord>> {
    let log = resume.parent().map(|p| p.join("train_log.csv"));
    let Some(log) = log.filter(|p| p.exists()) else {
        return Ok(Vec::new());
    };
    let mut reader = csv::Reader::from_path(&log).map_err(|e| Error::Data(format!("{}: {e}", log.display())))?;
    let mut out = Vec::new();
    for row in reader.deserialize::<EpochRecord>() {
        let r = row.map_err(|e| Error::Data(format!("{}: {e}", log.display())))?;
        if r.epoch < before {
            out.push(r);
        }
    }
    Ok(out)
}

pub fn train(cfg: &RunConfig, dir: &Path, ae_checkpoint: Option<&Path>, resume: Option<&Path>) -> Result<()> {
    let dtype = cfg.run.precision.dtype();
    let (pipeline, resume_state, mut history) = match resume {
        Some(path) => {
            require(path, "resume checkpoint", "pass the last.safetensors of an earlier run")?;
            let LoadedPipeline { pipeline, meta, tensors } = load_pipeline(path, dtype, &Device::Cpu)?;
            if pipeline.arch != cfg.model {
                return Err(Error::Config(format!(
                    "{} was trained with a different model architecture than the config",
                    path.display()
                )));
            }
            let mut opt = Adam::new(&pipeline.vars, cfg.train.grad_clip)?;
            let state: std::collections::HashMap<String, Tensor> = tensors
                .into_iter()
                .filter_map(|(k, v)| k.strip_prefix("adam.").map(|s| (s.to_string(), v)))
                .collect();
            opt.restore(&state, meta.optimizer_step)?;
            let start = meta.epoch + 1;
            let records = previous_records(path, start)?;
            (
                pipeline,
                Some(Resume {
                    start_epoch: start,
                    optimizer: opt,
                }),
                TrainHistory { records },
            )
        }
        None => {
            let pipeline = TrajectoryPipeline::new(&cfg.model, cfg.train.seed, dtype, &Device::Cpu)?;
            if cfg.model.use_relation {
                let path = ae_checkpoint
                    .map(Path::to_path_buf)
                    .unwrap_or_else(|| cfg.run.out_dir.join("autoencoder.safetensors"));
                require(&path, "autoencoder checkpoint", "run pretrain-ae first or pass --ae-checkpoint")?;
                let ae = load_autoencoder(&path, dtype, &Device::Cpu)?;
                if ae.autoencoder.arch() != &cfg.model.autoencoder {
                    return Err(Error::Config(format!(
                        "{} has autoencoder architecture {:?}, the config asks for {:?}",
                        path.display(),
                        ae.autoencoder.arch(),
                        cfg.model.autoencoder
                    )));
                }
                copy_vars(&ae.vars, &pipeline.autoencoder_vars)?;
            }
            (pipeline, None, TrainHistory::default())
        }
    };
    let exp = assemble(cfg)?;
    let ae = cfg.model.use_relation.then_some(&pipeline.autoencoder);
    let sigma = cfg.density.sigma_map;
    let train_src = WindowSource::new(exp.train_windows.clone(), &exp.scenes_of(&exp.train_windows), ae, sigma)?;
    let val_src = WindowSource::new(exp.val_windows.clone(), &exp.scenes_of(&exp.val_windows), ae, sigma)?;
    let config_text = cfg.to_toml()?;
    let last = dir.join("last.safetensors");
    let out = train_full(
        &pipeline,
        &train_src,
        Some(&val_src),
        &cfg.train,
        resume_state,
        &mut |record, p, opt| {
            history.records.push(record.clone());
            write(&dir.join("train_log.csv"), history.to_csv()?)?;
            save_pipeline(&last, p, record.epoch, Some(opt), Some(rng_state(cfg, record.epoch + 1)), &config_text)
        },
    )?;
    let final_epoch = cfg.train.epochs.saturating_sub(1);
    let model = dir.join("model.safetensors");
    save_pipeline(&model, &pipeline, final_epoch, None, None, &config_text)?;
    if let Some((epoch, vars)) = &out.best {
        let current = snapshot(&pipeline.vars)?;
        for (name, t) in vars {
            set_var(&pipeline.vars, name, t)?;
        }
        save_pipeline(&dir.join("model_best.safetensors"), &pipeline, *epoch, None, None, &config_text)?;
        for (name, t) in &current {
            set_var(&pipeline.vars, name, t)?;
        }
    }
    std::fs::create_dir_all(&cfg.run.out_dir).map_err(|e| Error::io(format!("creating {}", cfg.run.out_dir.display()), e))?;
    copy(&model, &cfg.run.out_dir.join("model.safetensors"))?;
    if let Some(r) = history.records.last() {
        println!(
            "epoch {}: loss {:.4}, val minADE {}, checkpoint {}",
            r.epoch,
            r.loss_total,
            r.val_min_ade.map_or("-".into(), |v| format!("{v:.4}")),
            model.display()
        );
    }
    Ok(())
}

fn load_model(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<TrajectoryPipeline> {
    let path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.run.out_dir.join("model.safetensors"));
    require(&path, "model checkpoint", "run train first or pass --checkpoint")?;
    let loaded = load_pipeline(&path, cfg.run.precision.dtype(), &Device::Cpu)?;
    let arch = &loaded.pipeline.arch;
    if (arch.tau, arch.horizon, &arch.autoencoder.map_size) != (cfg.model.tau, cfg.model.horizon, &cfg.model.autoencoder.map_size) {
        return Err(Error::Config(format!(
            "{} expects tau {}, horizon {} and {:?} maps, which differs from the config",
            path.display(),
            arch.tau,
            arch.horizon,
            arch.autoencoder.map_size
        )));
    }
    Ok(loaded.pipeline)
}

pub fn evaluate(cfg: &RunConfig, dir: &Path, checkpoint: Option<&Path>, split: EvalSplit) -> Result<()> {
    let pipeline = load_model(cfg, checkpoint)?;
    let exp = assemble(cfg)?;
    let windows = match split {
        EvalSplit::Test => exp.test_windows.clone(),
        EvalSplit::Val => exp.val_windows.clone(),
    };
    let ae = pipeline.arch.use_relation.then_some(&pipeline.autoencoder);
    let src = WindowSource::new(windows.clone(), &exp.scenes_of(&windows), ae, cfg.density.sigma_map)?;
    let (report, records) = evaluate_model(&pipeline, &src, &cfg.eval, &cfg.fingerprint()?)?;
    write(&dir.join("metrics.json"), serde_json::to_vec_pretty(&report)?)?;
    write_dump(&dir.join("predictions.jsonl"), &records)?;
    print!("{}", render_table(&report));
    Ok(())
}

pub fn perturb_eval(cfg: &RunConfig, dir: &Path, checkpoint: Option<&Path>) -> Result<()> {
    let pipeline = load_model(cfg, checkpoint)?;
    let exp = assemble(cfg)?;
    let windows = exp.test_windows.clone();
    let scenes = exp.scenes_of(&windows);
    let ae = pipeline.arch.use_relation.then_some(&pipeline.autoencoder);
    let e = &cfg.eval;
    let clean = WindowSource::new(windows.clone(), &scenes, ae, cfg.density.sigma_map)?;
    let noisy = perturbed_source(&scenes, &windows, ae, cfg.density.sigma_map, e.perturb_sigma, e.seed)?;
    let clean_records = predict_records(&pipeline, &clean, e.k, e.batch_size, e.seed)?;
    let noisy_records = predict_records(&pipeline, &noisy, e.k, e.batch_size, e.seed)?;
    let (per_scene, aggregate) = evaluate_records(&clean_records, KdeSource::None, e.select)?;
    let (_, noisy_aggregate) = evaluate_records(&noisy_records, KdeSource::None, e.select)?;
    let robustness = Robustness::new(e.perturb_sigma, aggregate.clone(), noisy_aggregate);
    let report = MetricsReport {
        per_scene,
        aggregate,
        robustness: Some(robustness.clone()),
        k: pipeline.effective_k(e.k),
        select: e.select,
        kde_samples: None,
        config_fingerprint: cfg.fingerprint()?,
    };
    write(&dir.join("robustness.json"), serde_json::to_vec_pretty(&robustness)?)?;
    write(&dir.join("metrics.json"), serde_json::to_vec_pretty(&report)?)?;
    write_dump(&dir.join("predictions_perturbed.jsonl"), &noisy_records)?;
    print!("{}", render_table(&report));
    Ok(())
}
