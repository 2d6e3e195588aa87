//! Full predictor: relation module, history/future encoders, multi-goal
//! estimation and a goal-conditioned recurrent future decoder.
//!
//! All positions inside the network are relative to the agent's last
//! observed position; [`TrajectoryPipeline::predict`] adds it back.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{linear, linear_no_bias, Linear, VarBuilder, VarMap};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Point, SceneRecording, SequenceSample};
use crate::density::{render_density_frame, render_positions, SceneGeometry};
use crate::error::{contract, Error, Result};
use crate::goal::{sample_latent, standard_normal, GoalModule, LatentDistribution};
use crate::nn::{seeded_init, var_builder, GruCell};
use crate::relation::{
    agent_region_path, encode_maps, path_cell_sequences, Autoencoder, AutoencoderArch, RelationModule,
};

pub const HISTORY_FEATURES: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelArch {
    pub autoencoder: AutoencoderArch,
    pub tau: usize,
    pub horizon: usize,
    pub temporal_hidden: usize,
    pub relation_hidden: usize,
    pub encoder_hidden: usize,
    pub latent_dim: usize,
    pub mlp_hidden: usize,
    pub decoder_hidden: usize,
    pub use_relation: bool,
    pub use_goal: bool,
}

impl Default for ModelArch {
    fn default() -> Self {
        Self {
            autoencoder: AutoencoderArch::default(),
            tau: 8,
            horizon: 12,
            temporal_hidden: 64,
            relation_hidden: 64,
            encoder_hidden: 64,
            latent_dim: 32,
            mlp_hidden: 64,
            decoder_hidden: 64,
            use_relation: true,
            use_goal: true,
        }
    }
}

impl ModelArch {
    /// Small widths for gradient checks and fast tests.
    pub fn tiny() -> Self {
        Self {
            autoencoder: AutoencoderArch::tiny(),
            tau: 4,
            horizon: 3,
            temporal_hidden: 5,
            relation_hidden: 4,
            encoder_hidden: 6,
            latent_dim: 3,
            mlp_hidden: 5,
            decoder_hidden: 6,
            use_relation: true,
            use_goal: true,
        }
    }

    pub fn conditioning_size(&self) -> usize {
        self.relation_hidden + 2 + self.encoder_hidden
    }

    pub fn validate(&self) -> Result<()> {
        self.autoencoder.validate()?;
        let dims = [
            self.tau,
            self.horizon,
            self.temporal_hidden,
            self.relation_hidden,
            self.encoder_hidden,
            self.latent_dim,
            self.mlp_hidden,
            self.decoder_hidden,
        ];
        if dims.iter().any(|d| *d == 0) {
            return Err(crate::Error::Config(format!("model widths must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// GRU decoder conditioned on `[R, goal, h_X]`. The conditioning vector
/// sets the initial hidden state and is fed at every step together with
/// the previous step's output.
pub struct FutureDecoder {
    init: Linear,
    conditioning: Linear,
    cell: GruCell,
    head: Linear,
    horizon: usize,
}

impl FutureDecoder {
    pub fn new(cond: usize, hidden: usize, horizon: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            init: linear(cond, hidden, vb.pp("init"))?,
            conditioning: linear_no_bias(cond, 3 * hidden, vb.pp("cond"))?,
            cell: GruCell::new(2, hidden, vb.pp("gru"))?,
            head: linear(hidden, 2, vb.pp("head"))?,
            horizon,
        })
    }

    /// `cond: [N, C]` to relative positions `[N, T, 2]`.
    pub fn decode(&self, cond: &Tensor) -> Result<Tensor> {
        let n = cond.dim(0)?;
        let mut h = self.init.forward(cond)?.tanh()?;
        let gc = self.conditioning.forward(cond)?;
        let mut prev = Tensor::zeros((n, 2), cond.dtype(), cond.device())?;
        let mut out = Vec::with_capacity(self.horizon);
        for _ in 0..self.horizon {
            let gi = (self.cell.project_input(&prev)? + &gc)?;
            h = self.cell.step_projected(&gi, &h)?;
            prev = self.head.forward(&h)?;
            out.push(prev.clone());
        }
        Ok(Tensor::stack(&out, 1)?)
    }
}

/// Frozen-autoencoder latents of every rendered scene frame, stored on the
/// host as `[c_f, h, w]` per frame.
#[derive(Clone, Debug)]
pub struct SceneLatents {
    pub geometry: SceneGeometry,
    pub channels: usize,
    pub grid: (usize, usize),
    pub frames: BTreeMap<i64, Vec<f32>>,
}

impl SceneLatents {
    /// Renders and encodes the given frames of `rec`.
    pub fn encode(
        rec: &SceneRecording,
        frame_ids: &[i64],
        geometry: &SceneGeometry,
        sigma_map: f64,
        ae: &Autoencoder,
    ) -> Result<Self> {
        let per_frame: Vec<Vec<Point>> = frame_ids.iter().map(|f| rec.positions_at(*f)).collect();
        Self::encode_positions(&per_frame, frame_ids, geometry, sigma_map, ae)
    }

    pub fn encode_positions(
        per_frame: &[Vec<Point>],
        frame_ids: &[i64],
        geometry: &SceneGeometry,
        sigma_map: f64,
        ae: &Autoencoder,
    ) -> Result<Self> {
        let arch = ae.arch();
        if geometry.map_size != arch.map_size {
            return Err(contract(format!(
                "scene maps are {:?} but the autoencoder expects {:?}",
                geometry.map_size, arch.map_size
            )));
        }
        let (h, w) = geometry.map_size;
        let channels = arch.latent_channels();
        let grid = arch.latent_grid();
        let per = channels * grid.0 * grid.1;
        let mut frames = BTreeMap::new();
        const CHUNK: usize = 64;
        for (ids, positions) in frame_ids.chunks(CHUNK).zip(per_frame.chunks(CHUNK)) {
            let mut data = Vec::with_capacity(ids.len() * h * w);
            for ps in positions {
                let f = render_density_frame(ps, geometry, sigma_map)?;
                data.extend(f.data.iter().map(|v| *v as f32));
            }
            let maps = Tensor::from_vec(data, (ids.len(), 1, h, w), &Device::Cpu)?;
            let z = ae.encode_to_host(&maps, CHUNK)?;
            for (i, id) in ids.iter().enumerate() {
                frames.insert(*id, z[i * per..(i + 1) * per].to_vec());
            }
        }
        Ok(Self {
            geometry: geometry.clone(),
            channels,
            grid,
            frames,
        })
    }

    /// Concatenated latents of `frame_ids`, `[tau, c_f, h, w]`.
    pub fn window(&self, frame_ids: &[i64]) -> Result<Vec<f32>> {
        let mut out = Vec::new();
        for f in frame_ids {
            let z = self
                .frames
                .get(f)
                .ok_or_else(|| contract(format!("frame {f} was not encoded")))?;
            out.extend_from_slice(z);
        }
        Ok(out)
    }
}

/// Network inputs for one window, in coordinates relative to the last
/// observed position.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub origin: Point,
    pub history: Vec<[f64; 6]>,
    pub future: Option<Vec<Point>>,
    /// `[tau, tau, c_f]` latent sequences of the cells on the agent's path.
    pub cells: Option<Vec<f32>>,
}

/// Relative-coordinate inputs for a sample. `latents` are the sample's
/// window latents with their geometry; they are required when the model
/// uses the relation module.
pub fn prepare_sample(
    sample: &SequenceSample,
    latents: Option<(&[f32], &SceneLatents)>,
    with_future: bool,
) -> Result<PreparedSample> {
    let origin = sample.last_observed();
    let history = sample
        .history
        .iter()
        .map(|r| [r[0] - origin[0], r[1] - origin[1], r[2], r[3], r[4], r[5]])
        .collect();
    let future = with_future.then(|| sample.future.iter().map(|p| [p[0] - origin[0], p[1] - origin[1]]).collect());
    let cells = match latents {
        Some((window, scene)) => {
            let (path, _) = agent_region_path(&sample.observed_positions(), &scene.geometry, scene.grid);
            Some(path_cell_sequences(window, scene.channels, scene.grid, &path))
        }
        None => None,
    };
    Ok(PreparedSample {
        origin,
        history,
        future,
        cells,
    })
}

pub struct Batch {
    pub history: Tensor,
    pub future: Option<Tensor>,
    pub cells: Option<Tensor>,
    pub origins: Vec<Point>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }
}

pub fn build_batch(samples: &[&PreparedSample], arch: &ModelArch, dtype: DType, device: &Device) -> Result<Batch> {
    let b = samples.len();
    if b == 0 {
        return Err(contract("empty batch"));
    }
    let tau = samples[0].history.len();
    let horizon = samples[0].future.as_ref().map(|f| f.len());
    if tau != arch.tau || horizon.is_some_and(|h| h != arch.horizon) {
        return Err(Error::Config(format!(
            "windows have {tau} observed and {horizon:?} future steps but the model expects {} and {}",
            arch.tau, arch.horizon
        )));
    }
    let mut hist: Vec<f64> = Vec::with_capacity(b * tau * HISTORY_FEATURES);
    let mut fut: Vec<f64> = Vec::new();
    let mut cells: Vec<f32> = Vec::new();
    let with_cells = arch.use_relation;
    for s in samples {
        if s.history.len() != tau || s.future.as_ref().map(|f| f.len()) != horizon {
            return Err(contract("samples in a batch must share tau and horizon"));
        }
        hist.extend(s.history.iter().flatten());
        if let Some(f) = &s.future {
            fut.extend(f.iter().flatten());
        }
        if with_cells {
            let c = s
                .cells
                .as_ref()
                .ok_or_else(|| contract("relation model needs latent cell sequences"))?;
            cells.extend_from_slice(c);
        }
    }
    let history = Tensor::from_vec(hist, (b, tau, HISTORY_FEATURES), device)?.to_dtype(dtype)?;
    let future = match horizon {
        Some(t) => Some(Tensor::from_vec(fut, (b, t, 2), device)?.to_dtype(dtype)?),
        None => None,
    };
    let cells = if with_cells {
        let c_f = cells.len() / (b * tau * tau);
        Some(Tensor::from_vec(cells, (b * tau, tau, c_f), device)?.to_dtype(dtype)?)
    } else {
        None
    };
    Ok(Batch {
        history,
        future,
        cells,
        origins: samples.iter().map(|s| s.origin).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Latents from the posterior; reads the future.
    Train,
    /// Latents from the prior; never reads the future.
    Infer,
}

/// Network outputs in relative coordinates.
pub struct ForwardOutput {
    /// `[B, K, 2]`; zeros when the goal module is disabled.
    pub goals: Tensor,
    /// `[B, K, T, 2]`.
    pub trajectories: Tensor,
    /// `[B, c_r]`.
    pub relation: Tensor,
    pub posterior: Option<LatentDistribution>,
    pub prior: Option<LatentDistribution>,
}

/// Absolute-coordinate predictions for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub goals: Vec<Point>,
    /// `K x T` positions.
    pub trajectories: Vec<Vec<Point>>,
}

pub struct TrajectoryPipeline {
    pub arch: ModelArch,
    /// Frozen; never part of the optimizer's parameters.
    pub autoencoder_vars: VarMap,
    pub autoencoder: Autoencoder,
    pub vars: VarMap,
    relation: Option<RelationModule>,
    goal: GoalModule,
    decoder: FutureDecoder,
    dtype: DType,
    device: Device,
}

impl TrajectoryPipeline {
    /// Builds every component with parameters drawn from `seed`.
    pub fn new(arch: &ModelArch, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        arch.validate()?;
        let autoencoder_vars = VarMap::new();
        let autoencoder = Autoencoder::new(&arch.autoencoder, var_builder(&autoencoder_vars, dtype, device))?;
        seeded_init(&autoencoder_vars, seed ^ 0x5eed_ae)?;
        let vars = VarMap::new();
        let vb = var_builder(&vars, dtype, device);
        let relation = if arch.use_relation {
            Some(RelationModule::new(
                arch.autoencoder.latent_channels(),
                arch.temporal_hidden,
                arch.relation_hidden,
                vb.pp("relation"),
            )?)
        } else {
            None
        };
        let goal = GoalModule::new(
            HISTORY_FEATURES,
            arch.encoder_hidden,
            arch.latent_dim,
            arch.mlp_hidden,
            vb.pp("goal"),
        )?;
        let decoder = FutureDecoder::new(arch.conditioning_size(), arch.decoder_hidden, arch.horizon, vb.pp("decoder"))?;
        seeded_init(&vars, seed)?;
        Ok(Self {
            arch: arch.clone(),
            autoencoder_vars,
            autoencoder,
            vars,
            relation,
            goal,
            decoder,
            dtype,
            device: device.clone(),
        })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn goal_module(&self) -> &GoalModule {
        &self.goal
    }

    pub fn decoder(&self) -> &FutureDecoder {
        &self.decoder
    }

    pub fn relation_module(&self) -> Option<&RelationModule> {
        self.relation.as_ref()
    }

    /// Candidates drawn per sample: `k`, or 1 without the goal module.
    pub fn effective_k(&self, k: usize) -> usize {
        if self.arch.use_goal {
            k
        } else {
            1
        }
    }

    /// Standard normal latent noise `[B, K, d_z]`.
    pub fn draw_noise(&self, rng: &mut impl Rng, batch: usize, k: usize) -> Result<Tensor> {
        standard_normal(rng, (batch, k, self.arch.latent_dim), self.dtype, &self.device)
    }

    /// Relation vectors `[B, c_r]` from a batch's path cell sequences, or
    /// zeros when the relation module is disabled.
    pub fn relation(&self, batch: &Batch) -> Result<Tensor> {
        match (&self.relation, &batch.cells) {
            (Some(rel), Some(cells)) => rel.relate_cell_sequences(cells),
            (Some(_), None) => Err(contract("relation model needs latent cell sequences")),
            (None, _) => Ok(Tensor::zeros((batch.len(), self.arch.relation_hidden), self.dtype, &self.device)?),
        }
    }

    /// Relation vector `[1, c_r]` through the full route: encode the maps,
    /// run the temporal encoder over every cell, mask along the path and
    /// relate.
    pub fn relation_from_maps(&self, maps: &Tensor, geometry: &SceneGeometry, positions: &[Point]) -> Result<Tensor> {
        let Some(rel) = &self.relation else {
            return Ok(Tensor::zeros((1, self.arch.relation_hidden), self.dtype, &self.device)?);
        };
        let latents = encode_maps(&maps.to_dtype(self.dtype)?, &self.autoencoder)?;
        let dynamics = rel.temporal_encode(&latents)?;
        let (path, _) = agent_region_path(positions, geometry, latents.grid_shape());
        Ok(rel.mask_and_relate(&dynamics, &path)?.unsqueeze(0)?)
    }

    /// `noise: [B, K, d_z]` is ignored (and may be `None`) without the goal
    /// module.
    pub fn forward(&self, batch: &Batch, mode: Mode, noise: Option<&Tensor>) -> Result<ForwardOutput> {
        let relation = self.relation(batch)?;
        self.forward_with_relation(batch, relation, mode, noise)
    }

    pub fn forward_with_relation(
        &self,
        batch: &Batch,
        relation: Tensor,
        mode: Mode,
        noise: Option<&Tensor>,
    ) -> Result<ForwardOutput> {
        let b = batch.len();
        let h_x = self.goal.encode_history(&batch.history)?;
        let (goals, posterior, prior) = if self.arch.use_goal {
            let noise = noise.ok_or_else(|| contract("goal sampling needs latent noise"))?;
            let prior = self.goal.prior(&h_x)?;
            match mode {
                Mode::Train => {
                    let future = batch
                        .future
                        .as_ref()
                        .ok_or_else(|| contract("training forward pass needs the future"))?;
                    let h_y = self.goal.encode_future(future)?;
                    let posterior = self.goal.joint_posterior(&h_x, &h_y)?;
                    let z = sample_latent(&posterior, noise)?;
                    (self.goal.decode_goals(&z, &h_x)?.goals, Some(posterior), Some(prior))
                }
                Mode::Infer => {
                    let z = sample_latent(&prior, noise)?;
                    (self.goal.decode_goals(&z, &h_x)?.goals, None, Some(prior))
                }
            }
        } else {
            if mode == Mode::Train && batch.future.is_none() {
                return Err(contract("training forward pass needs the future"));
            }
            (Tensor::zeros((b, 1, 2), self.dtype, &self.device)?, None, None)
        };
        let k = goals.dim(1)?;
        let rep = |t: &Tensor| -> Result<Tensor> {
            let c = t.dim(D::Minus1)?;
            Ok(t.unsqueeze(1)?.broadcast_as((b, k, c))?.reshape((b * k, c))?)
        };
        let cond = Tensor::cat(&[rep(&relation)?, goals.reshape((b * k, 2))?, rep(&h_x)?], D::Minus1)?;
        let trajectories = self.decoder.decode(&cond)?.reshape((b, k, self.arch.horizon, 2))?;
        Ok(ForwardOutput {
            goals,
            trajectories,
            relation,
            posterior,
            prior,
        })
    }

    /// Inference on a batch, returning absolute predictions per sample.
    pub fn predict(&self, batch: &Batch, k: usize, rng: &mut impl Rng) -> Result<Vec<PredictionSet>> {
        let k = self.effective_k(k);
        let noise = if self.arch.use_goal {
            Some(self.draw_noise(rng, batch.len(), k)?)
        } else {
            None
        };
        let out = self.forward(batch, Mode::Infer, noise.as_ref())?;
        Ok(to_predictions(&out, &batch.origins)?)
    }
}

/// Converts relative network outputs into absolute per-sample predictions.
pub fn to_predictions(out: &ForwardOutput, origins: &[Point]) -> Result<Vec<PredictionSet>> {
    let (b, k, t, _) = out.trajectories.dims4()?;
    let trajs = out.trajectories.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let goals = out.goals.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok((0..b)
        .map(|i| {
            let o = origins[i];
            PredictionSet {
                goals: (0..k)
                    .map(|j| {
                        let g = &goals[(i * k + j) * 2..];
                        [g[0] + o[0], g[1] + o[1]]
                    })
                    .collect(),
                trajectories: (0..k)
                    .map(|j| {
                        (0..t)
                            .map(|s| {
                                let p = &trajs[((i * k + j) * t + s) * 2..];
                                [p[0] + o[0], p[1] + o[1]]
                            })
                            .collect()
                    })
                    .collect(),
            }
        })
        .collect())
}

/// Renders a window's density maps from explicit per-frame positions and
/// returns them as `[tau, 1, H, W]`.
pub fn window_maps(per_frame: &[Vec<Point>], frame_ids: &[i64], geometry: &SceneGeometry, sigma_map: f64, dtype: DType, device: &Device) -> Result<Tensor> {
    render_positions(per_frame, frame_ids, geometry, sigma_map)?.to_tensor(dtype, device)
}
