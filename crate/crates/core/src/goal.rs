//! Multi-goal estimation with a conditional VAE.
//!
//! A GRU encodes the observed history into `h_X` and another encodes the
//! ground-truth future into `h_Y` (training only). The posterior network
//! maps `[h_X, h_Y]` to a diagonal Gaussian, the prior maps `h_X` alone.
//! Latents are drawn by reparameterization with caller-provided standard
//! normal noise and decoded together with `h_X` into candidate endpoints.

use candle_core::{DType, Device, Tensor, D};
use candle_nn::VarBuilder;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{contract, Result};
use crate::nn::{GruCell, Mlp};

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

/// Diagonal Gaussian parameters, each `[B, d_z]`.
#[derive(Clone, Debug)]
pub struct LatentDistribution {
    pub mean: Tensor,
    pub log_var: Tensor,
}

/// Candidate endpoints `[B, K, 2]` and the latents `[B, K, d_z]` that
/// produced them.
#[derive(Clone, Debug)]
pub struct GoalSet {
    pub goals: Tensor,
    pub latents: Tensor,
}

pub struct GoalModule {
    history: GruCell,
    future: GruCell,
    posterior: Mlp,
    prior: Mlp,
    decoder: Mlp,
    latent_dim: usize,
}

fn ensure_finite(x: &Tensor, what: &str) -> Result<()> {
    let s = x.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !s.is_finite() {
        return Err(contract(format!("{what} contains non-finite values")));
    }
    Ok(())
}

fn split_distribution(out: &Tensor, d_z: usize) -> Result<LatentDistribution> {
    Ok(LatentDistribution {
        mean: out.narrow(D::Minus1, 0, d_z)?,
        log_var: out.narrow(D::Minus1, d_z, d_z)?.clamp(LOG_VAR_MIN, LOG_VAR_MAX)?,
    })
}

impl GoalModule {
    pub fn new(
        history_features: usize,
        encoder_hidden: usize,
        latent_dim: usize,
        mlp_hidden: usize,
        vb: VarBuilder,
    ) -> Result<Self> {
        Ok(Self {
            history: GruCell::new(history_features, encoder_hidden, vb.pp("history"))?,
            future: GruCell::new(2, encoder_hidden, vb.pp("future"))?,
            posterior: Mlp::new(2 * encoder_hidden, mlp_hidden, 2 * latent_dim, vb.pp("posterior"))?,
            prior: Mlp::new(encoder_hidden, mlp_hidden, 2 * latent_dim, vb.pp("prior"))?,
            decoder: Mlp::new(latent_dim + encoder_hidden, mlp_hidden, 2, vb.pp("goal_decoder"))?,
            latent_dim,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    /// Final GRU state over `x: [B, tau, F]`.
    pub fn encode_history(&self, x: &Tensor) -> Result<Tensor> {
        ensure_finite(x, "history")?;
        let states = self.history.run(x, None)?;
        states.last().cloned().ok_or_else(|| contract("empty history"))
    }

    /// Final GRU state over `y: [B, T, 2]`.
    pub fn encode_future(&self, y: &Tensor) -> Result<Tensor> {
        ensure_finite(y, "future")?;
        let states = self.future.run(y, None)?;
        states.last().cloned().ok_or_else(|| contract("empty future"))
    }

    pub fn joint_posterior(&self, h_x: &Tensor, h_y: &Tensor) -> Result<LatentDistribution> {
        let out = self.posterior.forward(&Tensor::cat(&[h_x, h_y], D::Minus1)?)?;
        split_distribution(&out, self.latent_dim)
    }

    pub fn prior(&self, h_x: &Tensor) -> Result<LatentDistribution> {
        split_distribution(&self.prior.forward(h_x)?, self.latent_dim)
    }

    /// `z: [B, K, d_z]`, `h_x: [B, c]` to goals `[B, K, 2]`.
    pub fn decode_goals(&self, z: &Tensor, h_x: &Tensor) -> Result<GoalSet> {
        let (b, k, _) = z.dims3()?;
        let c = h_x.dim(D::Minus1)?;
        let h = h_x.unsqueeze(1)?.broadcast_as((b, k, c))?;
        let goals = self.decoder.forward(&Tensor::cat(&[z, &h], D::Minus1)?)?;
        Ok(GoalSet {
            goals,
            latents: z.clone(),
        })
    }
}

/// `z_k = mean + exp(log_var / 2) * eps_k` with `eps: [B, K, d_z]`.
pub fn sample_latent(dist: &LatentDistribution, eps: &Tensor) -> Result<Tensor> {
    let (b, _, d) = eps.dims3()?;
    if dist.mean.dims() != [b, d] {
        return Err(contract(format!(
            "noise {:?} does not match distribution {:?}",
            eps.dims(),
            dist.mean.dims()
        )));
    }
    let std = (&dist.log_var * 0.5)?.exp()?.unsqueeze(1)?;
    Ok(dist.mean.unsqueeze(1)?.broadcast_add(&std.broadcast_mul(eps)?)?)
}

/// Standard normal noise drawn from `rng`, returned as a `[B, K, d_z]`
/// tensor.
pub fn standard_normal(rng: &mut impl Rng, shape: (usize, usize, usize), dtype: DType, device: &Device) -> Result<Tensor> {
    let n = shape.0 * shape.1 * shape.2;
    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
}

/// Closed-form `KL(q || p)` per batch row, summed over latent dimensions:
/// `[B]`.
pub fn kld(q: &LatentDistribution, p: &LatentDistribution) -> Result<Tensor> {
    let var_q = q.log_var.exp()?;
    let var_p = p.log_var.exp()?;
    let diff2 = (&q.mean - &p.mean)?.sqr()?;
    let ratio = ((var_q + diff2)? / var_p)?;
    let terms = ((ratio - 1.0)? + (&p.log_var - &q.log_var)?)?;
    Ok((terms.sum(D::Minus1)? * 0.5)?)
}

/// Host oracle for [`kld`] over one row.
pub fn kld_host(mean_q: &[f64], log_var_q: &[f64], mean_p: &[f64], log_var_p: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..mean_q.len() {
        let (vq, vp) = (log_var_q[i].exp(), log_var_p[i].exp());
        let d = mean_q[i] - mean_p[i];
        s += (vq + d * d) / vp - 1.0 + log_var_p[i] - log_var_q[i];
    }
    0.5 * s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{fill_vars, seeded_init, set_var, tensor_to_vec, var_builder};
    use candle_nn::VarMap;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dev() -> Device {
        Device::Cpu
    }

    fn module(d_z: usize) -> (VarMap, GoalModule) {
        let vm = VarMap::new();
        let m = GoalModule::new(6, 8, d_z, 8, var_builder(&vm, DType::F64, &dev())).unwrap();
        seeded_init(&vm, 3).unwrap();
        (vm, m)
    }

    fn t(v: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::from_vec(v, shape, &dev()).unwrap()
    }

    fn dist(mq: f64, lq: f64) -> LatentDistribution {
        LatentDistribution {
            mean: t(vec![mq], &[1, 1]),
            log_var: t(vec![lq], &[1, 1]),
        }
    }

    #[test]
    fn kld_closed_form_cases() {
        let zero = tensor_to_vec(&kld(&dist(0.0, 0.0), &dist(0.0, 0.0)).unwrap()).unwrap()[0];
        assert_eq!(zero, 0.0);
        let half = tensor_to_vec(&kld(&dist(0.0, 0.0), &dist(1.0, 0.0)).unwrap()).unwrap()[0];
        assert!((half - 0.5).abs() < 1e-9);
        let e = tensor_to_vec(&kld(&dist(0.0, 1.0), &dist(0.0, 0.0)).unwrap()).unwrap()[0];
        // 0.5 * (e - 1 - 1)
        assert!((e - 0.5 * (std::f64::consts::E - 2.0)).abs() < 1e-9);
        assert!((e - 0.3591).abs() < 1e-4);
    }

    proptest! {
        #[test]
        fn kld_nonnegative_and_matches_host(
            mq in prop::collection::vec(-3.0f64..3.0, 4),
            lq in prop::collection::vec(-3.0f64..3.0, 4),
            mp in prop::collection::vec(-3.0f64..3.0, 4),
            lp in prop::collection::vec(-3.0f64..3.0, 4),
        ) {
            let q = LatentDistribution { mean: t(mq.clone(), &[1, 4]), log_var: t(lq.clone(), &[1, 4]) };
            let p = LatentDistribution { mean: t(mp.clone(), &[1, 4]), log_var: t(lp.clone(), &[1, 4]) };
            let got = tensor_to_vec(&kld(&q, &p).unwrap()).unwrap()[0];
            let host = kld_host(&mq, &lq, &mp, &lp);
            prop_assert!(host >= -1e-12);
            prop_assert!((got - host).abs() <= 1e-9 * host.abs().max(1.0));
            let self_kl = tensor_to_vec(&kld(&q, &q).unwrap()).unwrap()[0];
            prop_assert_eq!(self_kl, 0.0);
        }
    }

    #[test]
    fn degenerate_variance_sampling() {
        let d = LatentDistribution {
            mean: t(vec![0.3, -1.2], &[1, 2]),
            log_var: t(vec![-40.0, -40.0], &[1, 2]),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let eps = standard_normal(&mut rng, (1, 50, 2), DType::F64, &dev()).unwrap();
        let z = tensor_to_vec(&sample_latent(&d, &eps).unwrap()).unwrap();
        for pair in z.chunks(2) {
            assert!((pair[0] - 0.3).abs() < 1e-8 && (pair[1] + 1.2).abs() < 1e-8);
        }
    }

    #[test]
    fn seeded_noise_reproducible() {
        let a = standard_normal(&mut ChaCha8Rng::seed_from_u64(9), (2, 3, 4), DType::F64, &dev()).unwrap();
        let b = standard_normal(&mut ChaCha8Rng::seed_from_u64(9), (2, 3, 4), DType::F64, &dev()).unwrap();
        assert_eq!(tensor_to_vec(&a).unwrap(), tensor_to_vec(&b).unwrap());
    }

    #[test]
    fn zero_networks_give_unit_gaussians_and_bias_goals() {
        let (vm, m) = module(4);
        fill_vars(&vm, 0.0, |n| n.starts_with("posterior") || n.starts_with("prior")).unwrap();
        let h = t(vec![0.5; 16], &[2, 8]);
        for d in [m.joint_posterior(&h, &h).unwrap(), m.prior(&h).unwrap()] {
            assert!(tensor_to_vec(&d.mean).unwrap().iter().all(|v| *v == 0.0));
            assert!(tensor_to_vec(&d.log_var).unwrap().iter().all(|v| *v == 0.0));
        }
        fill_vars(&vm, 0.0, |n| n.starts_with("goal_decoder")).unwrap();
        set_var(&vm, "goal_decoder.fc2.bias", &t(vec![1.5, -2.0], &[2])).unwrap();
        let z = Tensor::randn(0f64, 1.0, (2, 5, 4), &dev()).unwrap();
        let g = tensor_to_vec(&m.decode_goals(&z, &h).unwrap().goals).unwrap();
        for pair in g.chunks(2) {
            assert_eq!(pair, &[1.5, -2.0]);
        }
    }

    #[test]
    fn hand_set_prior_matches_matrix_arithmetic() {
        let vm = VarMap::new();
        let m = GoalModule::new(6, 2, 2, 2, var_builder(&vm, DType::F64, &dev())).unwrap();
        let w1 = [[1.0, 2.0], [-1.0, 0.5]];
        let b1 = [0.1, 0.2];
        let w2 = [[1.0, 0.0], [0.5, -1.0], [2.0, 1.0], [0.0, 3.0]];
        let b2 = [0.0, 0.1, -0.2, 0.3];
        set_var(&vm, "prior.fc1.weight", &t(w1.concat(), &[2, 2])).unwrap();
        set_var(&vm, "prior.fc1.bias", &t(b1.to_vec(), &[2])).unwrap();
        set_var(&vm, "prior.fc2.weight", &t(w2.concat(), &[4, 2])).unwrap();
        set_var(&vm, "prior.fc2.bias", &t(b2.to_vec(), &[4])).unwrap();
        let hx = [0.7, -0.4];
        let d = m.prior(&t(hx.to_vec(), &[1, 2])).unwrap();
        let hidden: Vec<f64> = (0..2).map(|i| (w1[i][0] * hx[0] + w1[i][1] * hx[1] + b1[i]).max(0.0)).collect();
        let out: Vec<f64> = (0..4).map(|i| w2[i][0] * hidden[0] + w2[i][1] * hidden[1] + b2[i]).collect();
        let got: Vec<f64> = tensor_to_vec(&d.mean).unwrap().into_iter().chain(tensor_to_vec(&d.log_var).unwrap()).collect();
        for (a, b) in got.iter().zip(&out) {
            assert!((a - b).abs() < 1e-12, "{got:?} vs {out:?}");
        }
    }

    #[test]
    fn log_var_is_clamped_at_output() {
        let (vm, m) = module(2);
        fill_vars(&vm, 0.0, |n| n.starts_with("prior")).unwrap();
        set_var(&vm, "prior.fc2.bias", &t(vec![0.0, 0.0, 50.0, -50.0], &[4])).unwrap();
        let d = m.prior(&t(vec![0.0; 8], &[1, 8])).unwrap();
        assert_eq!(tensor_to_vec(&d.log_var).unwrap(), vec![LOG_VAR_MAX, LOG_VAR_MIN]);
    }

    #[test]
    fn encoders_are_deterministic_and_causal() {
        let (_, m) = module(4);
        let x = Tensor::randn(0f64, 1.0, (1, 9, 6), &dev()).unwrap();
        let short = x.narrow(1, 0, 8).unwrap();
        let a = tensor_to_vec(&m.encode_history(&short).unwrap()).unwrap();
        let b = tensor_to_vec(&m.encode_history(&short).unwrap()).unwrap();
        assert_eq!(a, b);
        let all = m.history.run(&x, None).unwrap();
        assert_eq!(tensor_to_vec(&all[7]).unwrap(), a);
        let one = m.encode_history(&x.narrow(1, 0, 1).unwrap()).unwrap();
        assert_eq!(one.dims(), &[1, 8]);
        let nan = t(vec![f64::NAN; 12], &[1, 2, 6]);
        assert!(matches!(m.encode_history(&nan), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn identical_latents_give_identical_goals() {
        let (_, m) = module(4);
        let z = t([0.1, -0.3, 0.7, 0.2].repeat(6), &[1, 6, 4]);
        let h = Tensor::randn(0f64, 1.0, (1, 8), &dev()).unwrap();
        let g = tensor_to_vec(&m.decode_goals(&z, &h).unwrap().goals).unwrap();
        assert!(g.chunks(2).all(|p| p == &g[0..2]));
    }
}
