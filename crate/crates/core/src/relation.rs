//! Region-based relation learning.
//!
//! Stage one is a convolutional autoencoder trained to reconstruct density
//! maps; each cell of its latent grid summarizes the crowd inside one
//! receptive-field patch of the scene. Stage two runs a shared LSTM along
//! every cell's latent sequence (intra-regional dynamics), selects for each
//! observed step the hidden state of the cell the target agent occupied,
//! and relates that masked sequence with a second LSTM whose final state is
//! the agent's relation vector.

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{conv2d, Conv2d, Conv2dConfig, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::dataset::Point;
use crate::density::SceneGeometry;
use crate::error::{contract, Result};
use crate::nn::LstmCell;

/// `2 pi sigma^2` for the default 2-cell kernel.
pub const DEFAULT_INPUT_SCALE: f64 = 8.0 * std::f64::consts::PI;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoencoderArch {
    pub map_size: (usize, usize),
    /// Maps are multiplied by this before encoding and reconstructions
    /// divided by it, so a lone agent's peak is near 1.
    pub input_scale: f64,
    /// Output channels of each stride-2 encoder block; the last entry is
    /// the latent channel count.
    pub channels: Vec<usize>,
}

impl Default for AutoencoderArch {
    fn default() -> Self {
        Self {
            map_size: (80, 80),
            input_scale: DEFAULT_INPUT_SCALE,
            channels: vec![16, 32, 32],
        }
    }
}

impl AutoencoderArch {
    /// Four latent channels on 16x16 maps; used by gradient checks.
    pub fn tiny() -> Self {
        Self {
            map_size: (16, 16),
            input_scale: DEFAULT_INPUT_SCALE,
            channels: vec![4, 4, 4],
        }
    }

    pub fn total_stride(&self) -> usize {
        1 << self.channels.len()
    }

    pub fn latent_channels(&self) -> usize {
        *self.channels.last().expect("validated architecture has channels")
    }

    pub fn latent_grid(&self) -> (usize, usize) {
        let s = self.total_stride();
        (self.map_size.0 / s, self.map_size.1 / s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.iter().any(|c| *c == 0) {
            return Err(crate::Error::Config(format!(
                "autoencoder channels must be non-empty and positive, got {:?}",
                self.channels
            )));
        }
        let s = self.total_stride();
        let (h, w) = self.map_size;
        if !(self.input_scale > 0.0) || !self.input_scale.is_finite() {
            return Err(crate::Error::Config(format!(
                "autoencoder input scale must be positive, got {}",
                self.input_scale
            )));
        }
        if h % s != 0 || w % s != 0 || h == 0 || w == 0 {
            return Err(crate::Error::Config(format!(
                "map size {h}x{w} is not divisible by the encoder stride {s}"
            )));
        }
        Ok(())
    }
}

pub struct Autoencoder {
    arch: AutoencoderArch,
    encoder: Vec<Conv2d>,
    decoder: Vec<Conv2d>,
}

impl Autoencoder {
    pub fn new(arch: &AutoencoderArch, vb: VarBuilder) -> Result<Self> {
        arch.validate()?;
        let down = Conv2dConfig {
            padding: 1,
            stride: 2,
            ..Default::default()
        };
        let same = Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        let mut encoder = Vec::new();
        let mut c_in = 1;
        for (i, &c) in arch.channels.iter().enumerate() {
            encoder.push(conv2d(c_in, c, 3, down, vb.pp(format!("enc{i}")))?);
            c_in = c;
        }
        let mut outs: Vec<usize> = arch.channels.iter().rev().skip(1).copied().collect();
        outs.push(1);
        let mut decoder = Vec::new();
        for (i, &c) in outs.iter().enumerate() {
            decoder.push(conv2d(c_in, c, 3, same, vb.pp(format!("dec{i}")))?);
            c_in = c;
        }
        Ok(Self {
            arch: arch.clone(),
            encoder,
            decoder,
        })
    }

    pub fn arch(&self) -> &AutoencoderArch {
        &self.arch
    }

    /// `[N, 1, H, W]` maps to `[N, c_f, h, w]` latents.
    pub fn encode(&self, maps: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = maps.dims4().map_err(|_| contract(format!("maps must be 4-D, got {:?}", maps.dims())))?;
        if c != 1 || (h, w) != self.arch.map_size {
            return Err(contract(format!(
                "maps of shape {:?} do not match the autoencoder input [N, 1, {}, {}]",
                maps.dims(),
                self.arch.map_size.0,
                self.arch.map_size.1
            )));
        }
        let mut x = (maps.to_dtype(self.encoder[0].weight().dtype())? * self.arch.input_scale)?;
        let last = self.encoder.len() - 1;
        for (i, conv) in self.encoder.iter().enumerate() {
            x = conv.forward(&x)?;
            if i < last {
                x = x.relu()?;
            }
        }
        Ok(x)
    }

    pub fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = latents
            .dims4()
            .map_err(|_| contract(format!("latents must be 4-D, got {:?}", latents.dims())))?;
        if c != self.arch.latent_channels() || (h, w) != self.arch.latent_grid() {
            return Err(contract(format!(
                "latents of shape {:?} do not match [N, {}, {}, {}]",
                latents.dims(),
                self.arch.latent_channels(),
                self.arch.latent_grid().0,
                self.arch.latent_grid().1
            )));
        }
        let mut x = latents.clone();
        let last = self.decoder.len() - 1;
        for (i, conv) in self.decoder.iter().enumerate() {
            let (_, _, h, w) = x.dims4()?;
            x = conv.forward(&x.upsample_nearest2d(2 * h, 2 * w)?)?;
            if i < last {
                x = x.relu()?;
            }
        }
        Ok((x / self.arch.input_scale)?)
    }

    /// Encodes a batch in chunks of `chunk` frames and returns the latents
    /// as host `f32` values, frame-major.
    pub fn encode_to_host(&self, maps: &Tensor, chunk: usize) -> Result<Vec<f32>> {
        let n = maps.dim(0)?;
        let mut out = Vec::new();
        let mut start = 0;
        while start < n {
            let len = chunk.min(n - start);
            let z = self.encode(&maps.narrow(0, start, len)?)?;
            out.extend(z.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?);
            start += len;
        }
        Ok(out)
    }
}

/// Per-frame encoder latents `f_s` with shape `[tau, c_f, h, w]`.
#[derive(Clone, Debug)]
pub struct LatentGridSequence {
    pub f_s: Tensor,
}

impl LatentGridSequence {
    pub fn channels(&self) -> usize {
        self.f_s.dims()[1]
    }

    pub fn grid_shape(&self) -> (usize, usize) {
        (self.f_s.dims()[2], self.f_s.dims()[3])
    }

    pub fn len(&self) -> usize {
        self.f_s.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn encode_maps(maps: &Tensor, ae: &Autoencoder) -> Result<LatentGridSequence> {
    Ok(LatentGridSequence { f_s: ae.encode(maps)? })
}

pub fn decode_maps(latents: &LatentGridSequence, ae: &Autoencoder) -> Result<Tensor> {
    ae.decode(&latents.f_s)
}

/// Mean squared error over every element.
pub fn reconstruction_loss(maps: &Tensor, reconstructed: &Tensor) -> Result<Tensor> {
    if maps.dims() != reconstructed.dims() {
        return Err(contract(format!(
            "reconstruction shape {:?} differs from input {:?}",
            reconstructed.dims(),
            maps.dims()
        )));
    }
    Ok((maps - reconstructed)?.sqr()?.mean_all()?)
}

/// Hidden states of the temporal encoder, `[tau, h, w, c_h]`.
#[derive(Clone, Debug)]
pub struct IntraRegionalDynamics {
    pub h_st: Tensor,
}

/// Latent-grid cell `(row, col)` occupied by the target agent at each
/// observed step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionPath {
    pub cells: Vec<(usize, usize)>,
}

/// Maps observed world positions to latent cells: continuous map
/// coordinates divided by the cells-per-latent-cell ratio, floored and
/// clamped into the grid. The flag reports whether any step was clamped.
pub fn agent_region_path(positions: &[Point], geometry: &SceneGeometry, grid_shape: (usize, usize)) -> (RegionPath, bool) {
    let (gh, gw) = grid_shape;
    let row_scale = geometry.map_size.0 as f64 / gh as f64;
    let col_scale = geometry.map_size.1 as f64 / gw as f64;
    let mut clamped = false;
    let cells = positions
        .iter()
        .map(|p| {
            let mc = geometry.world_to_map(*p);
            let r = (mc.row / row_scale).floor();
            let c = (mc.col / col_scale).floor();
            let rc = r.clamp(0.0, (gh - 1) as f64);
            let cc = c.clamp(0.0, (gw - 1) as f64);
            if rc != r || cc != c || !mc.in_bounds {
                clamped = true;
            }
            (rc as usize, cc as usize)
        })
        .collect();
    (RegionPath { cells }, clamped)
}

/// Selects `h_st[t, path[t]]` for every step: `[tau, c_h]`.
pub fn gather_path(dynamics: &IntraRegionalDynamics, path: &RegionPath) -> Result<Tensor> {
    let (tau, h, w, c) = dynamics.h_st.dims4()?;
    if path.cells.len() != tau {
        return Err(contract(format!("path has {} steps, dynamics have {tau}", path.cells.len())));
    }
    let mut idx = Vec::with_capacity(tau);
    for (t, &(r, col)) in path.cells.iter().enumerate() {
        if r >= h || col >= w {
            return Err(contract(format!("path cell ({r}, {col}) outside the {h}x{w} grid")));
        }
        idx.push((t * h * w + r * w + col) as u32);
    }
    let flat = dynamics.h_st.reshape((tau * h * w, c))?;
    let idx = Tensor::from_vec(idx, tau, flat.device())?;
    Ok(flat.index_select(&idx, 0)?)
}

/// For each observed step `t`, the full latent sequence of the cell the
/// agent occupies at `t`: host values laid out `[tau (row), tau (step), c_f]`.
/// `latents` holds `[tau, c_f, h, w]` frame-major.
pub fn path_cell_sequences(latents: &[f32], channels: usize, grid: (usize, usize), path: &RegionPath) -> Vec<f32> {
    let hw = grid.0 * grid.1;
    let tau = path.cells.len();
    let mut out = Vec::with_capacity(tau * tau * channels);
    for &(r, c) in &path.cells {
        let k = r * grid.1 + c;
        for j in 0..tau {
            let base = j * channels * hw;
            out.extend((0..channels).map(|ch| latents[base + ch * hw + k]));
        }
    }
    out
}

pub struct RelationModule {
    temporal: LstmCell,
    extractor: LstmCell,
}

impl RelationModule {
    pub fn new(latent_channels: usize, temporal_hidden: usize, relation_hidden: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            temporal: LstmCell::new(latent_channels, temporal_hidden, vb.pp("temporal"))?,
            extractor: LstmCell::new(temporal_hidden, relation_hidden, vb.pp("extractor"))?,
        })
    }

    pub fn relation_size(&self) -> usize {
        self.extractor.hidden_size()
    }

    /// Runs the shared temporal LSTM independently along every cell.
    pub fn temporal_encode(&self, latents: &LatentGridSequence) -> Result<IntraRegionalDynamics> {
        let (tau, c, h, w) = latents.f_s.dims4()?;
        let seqs = latents.f_s.permute((2, 3, 0, 1))?.reshape((h * w, tau, c))?;
        let states = self.temporal.run(&seqs)?;
        let stacked = Tensor::stack(&states, 1)?; // [hw, tau, c_h]
        let c_h = self.temporal.hidden_size();
        let h_st = stacked.reshape((h, w, tau, c_h))?.permute((2, 0, 1, 3))?.contiguous()?;
        Ok(IntraRegionalDynamics { h_st })
    }

    /// Final hidden state of the extractor over `[B, tau, c_h]`: `[B, c_r]`.
    pub fn extract(&self, gathered: &Tensor) -> Result<Tensor> {
        let states = self.extractor.run(gathered)?;
        Ok(states.last().cloned().ok_or_else(|| contract("empty masked sequence"))?)
    }

    /// Masks the dynamics along `path` and relates them into `R_st: [c_r]`.
    pub fn mask_and_relate(&self, dynamics: &IntraRegionalDynamics, path: &RegionPath) -> Result<Tensor> {
        let gathered = gather_path(dynamics, path)?.unsqueeze(0)?;
        Ok(self.extract(&gathered)?.squeeze(0)?)
    }

    /// Batched equivalent of `temporal_encode` + `mask_and_relate` that only
    /// runs the cells on each agent's path. `sequences` is
    /// `[B * tau, tau, c_f]` as built by [`path_cell_sequences`]; returns
    /// `[B, c_r]`.
    pub fn relate_cell_sequences(&self, sequences: &Tensor) -> Result<Tensor> {
        let (n, tau, _) = sequences.dims3()?;
        if n % tau != 0 {
            return Err(contract(format!("{n} cell sequences is not a multiple of tau = {tau}")));
        }
        let b = n / tau;
        let states = Tensor::stack(&self.temporal.run(sequences)?, 1)?; // [n, tau, c_h]
        let c_h = self.temporal.hidden_size();
        let flat = states.reshape((n * tau, c_h))?;
        let idx: Vec<u32> = (0..n).map(|row| (row * tau + row % tau) as u32).collect();
        let idx = Tensor::from_vec(idx, n, flat.device())?;
        let gathered = flat.index_select(&idx, 0)?.reshape((b, tau, c_h))?;
        self.extract(&gathered)
    }
}

pub fn host_tensor(values: Vec<f32>, shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, shape, device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{fill_vars, seeded_init, tensor_to_vec, var_builder};
    use candle_nn::VarMap;

    fn dev() -> Device {
        Device::Cpu
    }

    fn ae(arch: &AutoencoderArch, dtype: DType) -> (VarMap, Autoencoder) {
        let vm = VarMap::new();
        let ae = Autoencoder::new(arch, var_builder(&vm, dtype, &dev())).unwrap();
        seeded_init(&vm, 1).unwrap();
        (vm, ae)
    }

    #[test]
    fn encode_shape_default_arch() {
        let arch = AutoencoderArch::default();
        assert_eq!(arch.total_stride(), 8);
        let (_, ae) = ae(&arch, DType::F32);
        let maps = Tensor::zeros((8, 1, 80, 80), DType::F32, &dev()).unwrap();
        let z = encode_maps(&maps, &ae).unwrap();
        assert_eq!(z.f_s.dims(), &[8, 32, 10, 10]);
        let one = encode_maps(&maps.narrow(0, 0, 1).unwrap(), &ae).unwrap();
        assert_eq!(one.f_s.dims(), &[1, 32, 10, 10]);
        let back = decode_maps(&z, &ae).unwrap();
        assert_eq!(back.dims(), &[8, 1, 80, 80]);
        assert!(tensor_to_vec(&back).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_bias_encoder_is_deterministic() {
        let arch = AutoencoderArch::default();
        let (vm, ae) = ae(&arch, DType::F32);
        fill_vars(&vm, 0.0, |n| n.ends_with("bias")).unwrap();
        let maps = Tensor::zeros((2, 1, 80, 80), DType::F32, &dev()).unwrap();
        let a = tensor_to_vec(&ae.encode(&maps).unwrap()).unwrap();
        let b = tensor_to_vec(&ae.encode(&maps).unwrap()).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn frame_by_frame_equals_batched() {
        let arch = AutoencoderArch::tiny();
        let (_, ae) = ae(&arch, DType::F64);
        let maps = Tensor::rand(0f64, 1.0, (3, 1, 16, 16), &dev()).unwrap();
        let batched = tensor_to_vec(&ae.encode(&maps).unwrap()).unwrap();
        let single: Vec<f64> = (0..3)
            .flat_map(|i| tensor_to_vec(&ae.encode(&maps.narrow(0, i, 1).unwrap()).unwrap()).unwrap())
            .collect();
        for (a, b) in batched.iter().zip(&single) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let (_, ae) = ae(&AutoencoderArch::tiny(), DType::F32);
        let bad = Tensor::zeros((1, 1, 80, 80), DType::F32, &dev()).unwrap();
        assert!(matches!(ae.encode(&bad), Err(crate::Error::Contract(_))));
        let bad_latent = Tensor::zeros((1, 3, 2, 2), DType::F32, &dev()).unwrap();
        assert!(matches!(ae.decode(&bad_latent), Err(crate::Error::Contract(_))));
        assert!(AutoencoderArch { map_size: (20, 20), ..AutoencoderArch::tiny() }.validate().is_err());
    }

    #[test]
    fn reconstruction_loss_cases() {
        let m = Tensor::rand(0f64, 1.0, (2, 1, 8, 8), &dev()).unwrap();
        let zero = tensor_to_vec(&reconstruction_loss(&m, &m).unwrap()).unwrap()[0];
        assert_eq!(zero, 0.0);
        let plus = (&m + 1.0).unwrap();
        let one = tensor_to_vec(&reconstruction_loss(&m, &plus).unwrap()).unwrap()[0];
        assert!((one - 1.0).abs() < 1e-12);
        let other = Tensor::rand(0f64, 1.0, (2, 1, 8, 8), &dev()).unwrap();
        let got = tensor_to_vec(&reconstruction_loss(&m, &other).unwrap()).unwrap()[0];
        let (a, b) = (tensor_to_vec(&m).unwrap(), tensor_to_vec(&other).unwrap());
        let oracle = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
        assert!((got - oracle).abs() < 1e-6);
        assert!(reconstruction_loss(&m, &m.narrow(0, 0, 1).unwrap()).is_err());
    }

    #[test]
    fn region_paths() {
        let g = SceneGeometry::new([0.0, 0.0], [10.0, 10.0], (80, 80), 0.0).unwrap();
        let (p, clamped) = agent_region_path(&[g.world_min; 8], &g, (10, 10));
        assert_eq!(p.cells, vec![(0, 0); 8]);
        assert!(!clamped);
        let (p, _) = agent_region_path(&[[5.0, 5.0]], &g, (10, 10));
        assert_eq!(p.cells, vec![(4, 4)]);
        let (p, clamped) = agent_region_path(&[[10.0, 10.0], [12.0, -1.0]], &g, (10, 10));
        assert_eq!(p.cells, vec![(9, 9), (0, 9)]);
        assert!(clamped);
        let walk: Vec<Point> = (0..8).map(|i| [1.0 + i as f64 * 1.2, 5.0]).collect();
        let (p, _) = agent_region_path(&walk, &g, (10, 10));
        let cols: Vec<usize> = p.cells.iter().map(|c| c.1).collect();
        assert!(cols.windows(2).all(|w| w[1] >= w[0]));
        assert!(cols[0] < 5 && *cols.last().unwrap() >= 5);
    }

    #[test]
    fn gather_hand_set_values() {
        // 2x2 grid, tau = 3, c_h = 1, value = 100 t + 10 r + c
        let mut v = Vec::new();
        for t in 0..3 {
            for r in 0..2 {
                for c in 0..2 {
                    v.push((100 * t + 10 * r + c) as f64);
                }
            }
        }
        let dyn_ = IntraRegionalDynamics {
            h_st: Tensor::from_vec(v, (3, 2, 2, 1), &dev()).unwrap(),
        };
        let path = RegionPath {
            cells: vec![(0, 0), (1, 1), (0, 1)],
        };
        let g = tensor_to_vec(&gather_path(&dyn_, &path).unwrap()).unwrap();
        assert_eq!(g, vec![0.0, 111.0, 201.0]);
        let bad = RegionPath {
            cells: vec![(0, 0), (2, 0), (0, 0)],
        };
        assert!(gather_path(&dyn_, &bad).is_err());
    }
}
