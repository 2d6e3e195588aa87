use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use candle_nn::VarMap;

use crate::error::{contract, Result};
use crate::nn::sorted_vars;

/// Adam with global gradient-norm clipping. Moments are kept per parameter
/// name so they can be checkpointed.
pub struct Adam {
    params: Vec<(String, Var)>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
    clip: f64,
}

impl Adam {
    pub fn new(vars: &VarMap, clip: f64) -> Result<Self> {
        let params = sorted_vars(vars);
        let first = params
            .iter()
            .map(|(_, v)| Ok(v.as_tensor().zeros_like()?))
            .collect::<Result<Vec<_>>>()?;
        let second = first.clone();
        Ok(Self {
            params,
            first,
            second,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Applies one update and returns the pre-clipping gradient norm.
    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<f64> {
        let gs: Vec<Option<&Tensor>> = self.params.iter().map(|(_, v)| grads.get(v.as_tensor())).collect();
        let mut norm2 = 0.0;
        for g in gs.iter().flatten() {
            norm2 += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        }
        let norm = norm2.sqrt();
        if !norm.is_finite() {
            return Err(contract(format!("non-finite gradient norm {norm}")));
        }
        let scale = if norm > self.clip { self.clip / norm } else { 1.0 };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, g) in gs.into_iter().enumerate() {
            let Some(g) = g else { continue };
            // Gradients can carry op history back into the forward graph;
            // moments built from them would keep every step's graph alive.
            let g = (g.detach() * scale)?;
            let m = ((&self.first[i] * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = ((&self.second[i] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let denom = ((&v / bc2)?.sqrt()? + self.eps)?;
            let update = ((&m / bc1)? / denom)?;
            let var = &self.params[i].1;
            var.set(&(var.as_tensor() - (update * lr)?)?)?;
            self.first[i] = m.detach();
            self.second[i] = v.detach();
        }
        Ok(norm)
    }

    /// Named moment tensors for checkpointing: `m.<name>` and `v.<name>`.
    pub fn state(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, (name, _)) in self.params.iter().enumerate() {
            out.push((format!("m.{name}"), self.first[i].clone()));
            out.push((format!("v.{name}"), self.second[i].clone()));
        }
        out
    }

    pub fn restore(&mut self, tensors: &std::collections::HashMap<String, Tensor>, step: usize) -> Result<()> {
        for (i, (name, var)) in self.params.iter().enumerate() {
            for (prefix, slot) in [("m", &mut self.first[i]), ("v", &mut self.second[i])] {
                let key = format!("{prefix}.{name}");
                let t = tensors
                    .get(&key)
                    .ok_or_else(|| crate::Error::Checkpoint(format!("optimizer state {key} missing")))?;
                if t.dims() != var.dims() {
                    return Err(crate::Error::Checkpoint(format!(
                        "optimizer state {key} has shape {:?}, expected {:?}",
                        t.dims(),
                        var.dims()
                    )));
                }
                *slot = t.to_dtype(var.dtype())?;
            }
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor_to_vec;
    use candle_core::{DType, Device};
    use candle_nn::Init;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let vm = VarMap::new();
        let w = vm
            .get((2,), "w", Init::Const(1.0), DType::F64, &Device::Cpu)
            .unwrap();
        let mut opt = Adam::new(&vm, 10.0).unwrap();
        let loss = (&w * Tensor::new(&[3.0f64, -0.5], &Device::Cpu).unwrap()).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let norm = opt.step(&grads, 0.1).unwrap();
        assert!((norm - (9.25f64).sqrt()).abs() < 1e-12);
        let after = tensor_to_vec(&w).unwrap();
        assert!((after[0] - 0.9).abs() < 1e-6 && (after[1] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn clipping_scales_gradient() {
        let vm = VarMap::new();
        let w = vm.get((1,), "w", Init::Const(0.0), DType::F64, &Device::Cpu).unwrap();
        let mut opt = Adam::new(&vm, 1.0).unwrap();
        let loss = (&w * 100.0).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        assert_eq!(opt.step(&grads, 0.01).unwrap(), 100.0);
        let m = tensor_to_vec(&opt.state()[0].1).unwrap();
        assert!((m[0] - 0.1).abs() < 1e-12);
    }
}
