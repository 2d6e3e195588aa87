//! Recurrent cells, MLPs and parameter utilities shared by the model
//! components.

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{linear, linear_no_bias, Linear, VarBuilder, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Logistic function built from `tanh` so it differentiates with the core
/// backprop ops.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? + 1.0)?.affine(0.5, 0.0)?)
}

fn gate(x: &Tensor, hidden: usize, i: usize) -> Result<Tensor> {
    Ok(x.narrow(D::Minus1, i * hidden, hidden)?)
}

/// Two affine layers with a ReLU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    first: Linear,
    second: Linear,
}

impl Mlp {
    pub fn new(input: usize, hidden: usize, output: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            first: linear(input, hidden, vb.pp("fc1"))?,
            second: linear(hidden, output, vb.pp("fc2"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.second.forward(&self.first.forward(x)?.relu()?)?)
    }
}

#[derive(Clone, Debug)]
pub struct GruCell {
    input: Linear,
    recurrent: Linear,
    hidden: usize,
}

impl GruCell {
    pub fn new(input: usize, hidden: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            input: linear(input, 3 * hidden, vb.pp("ih"))?,
            recurrent: linear(hidden, 3 * hidden, vb.pp("hh"))?,
            hidden,
        })
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden
    }

    /// Input-side gate pre-activations `[.., 3H]`; can be computed for a
    /// whole sequence at once.
    pub fn project_input(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.input.forward(x)?)
    }

    pub fn step(&self, x: &Tensor, h: &Tensor) -> Result<Tensor> {
        self.step_projected(&self.project_input(x)?, h)
    }

    pub fn step_projected(&self, gi: &Tensor, h: &Tensor) -> Result<Tensor> {
        let gh = self.recurrent.forward(h)?;
        let hs = self.hidden;
        let r = sigmoid(&(gate(gi, hs, 0)? + gate(&gh, hs, 0)?)?)?;
        let z = sigmoid(&(gate(gi, hs, 1)? + gate(&gh, hs, 1)?)?)?;
        let n = (gate(gi, hs, 2)? + (r * gate(&gh, hs, 2)?)?)?.tanh()?;
        // (1 - z) * n + z * h
        Ok((&n + (z * (h - &n)?)?)?)
    }

    /// Runs over `xs: [B, L, in]` from `h0` (zeros when `None`) and returns
    /// the hidden state after every step.
    pub fn run(&self, xs: &Tensor, h0: Option<&Tensor>) -> Result<Vec<Tensor>> {
        let (b, len, _) = xs.dims3()?;
        let gi = self.project_input(xs)?;
        let mut h = match h0 {
            Some(h) => h.clone(),
            None => Tensor::zeros((b, self.hidden), xs.dtype(), xs.device())?,
        };
        let mut out = Vec::with_capacity(len);
        for t in 0..len {
            h = self.step_projected(&gi.narrow(1, t, 1)?.squeeze(1)?, &h)?;
            out.push(h.clone());
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct LstmCell {
    input: Linear,
    recurrent: Linear,
    hidden: usize,
}

impl LstmCell {
    pub fn new(input: usize, hidden: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            input: linear(input, 4 * hidden, vb.pp("ih"))?,
            recurrent: linear_no_bias(hidden, 4 * hidden, vb.pp("hh"))?,
            hidden,
        })
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden
    }

    fn step_projected(&self, gi: &Tensor, h: &Tensor, c: &Tensor) -> Result<(Tensor, Tensor)> {
        let g = (gi + self.recurrent.forward(h)?)?;
        let hs = self.hidden;
        let i = sigmoid(&gate(&g, hs, 0)?)?;
        let f = sigmoid(&gate(&g, hs, 1)?)?;
        let cand = gate(&g, hs, 2)?.tanh()?;
        let o = sigmoid(&gate(&g, hs, 3)?)?;
        let c = ((f * c)? + (i * cand)?)?;
        let h = (o * c.tanh()?)?;
        Ok((h, c))
    }

    /// Runs over `xs: [B, L, in]` from a zero state and returns the hidden
    /// state after every step.
    pub fn run(&self, xs: &Tensor) -> Result<Vec<Tensor>> {
        let (b, len, _) = xs.dims3()?;
        let gi = self.input.forward(xs)?;
        let mut h = Tensor::zeros((b, self.hidden), xs.dtype(), xs.device())?;
        let mut c = h.clone();
        let mut out = Vec::with_capacity(len);
        for t in 0..len {
            (h, c) = self.step_projected(&gi.narrow(1, t, 1)?.squeeze(1)?, &h, &c)?;
            out.push(h.clone());
        }
        Ok(out)
    }
}

/// Sorted `(name, var)` pairs of a var map.
pub fn sorted_vars(varmap: &VarMap) -> Vec<(String, candle_core::Var)> {
    let data = varmap.data().lock().expect("var map lock poisoned");
    let mut vars: Vec<_> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    vars.sort_by(|a, b| a.0.cmp(&b.0));
    vars
}

/// Re-initializes every parameter from a seeded stream so that model
/// construction is reproducible: weights and biases are drawn from
/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, where a bias takes the fan-in of
/// the weight that shares its prefix.
pub fn seeded_init(varmap: &VarMap, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vars = sorted_vars(varmap);
    let fan_in_of = |name: &str| -> Option<usize> {
        let weight = format!("{}.weight", name.strip_suffix(".bias")?);
        vars.iter()
            .find(|(n, _)| *n == weight)
            .map(|(_, v)| v.dims()[1..].iter().product())
    };
    for (name, var) in &vars {
        let fan_in = if name.ends_with(".bias") {
            fan_in_of(name).unwrap_or(1)
        } else {
            var.dims()[1..].iter().product::<usize>().max(1)
        };
        let bound = 1.0 / (fan_in as f64).sqrt();
        let values: Vec<f64> = (0..var.elem_count()).map(|_| rng.gen_range(-bound..bound)).collect();
        let t = Tensor::from_vec(values, var.shape(), var.device())?.to_dtype(var.dtype())?;
        var.set(&t)?;
    }
    Ok(())
}

/// Fills every parameter whose name satisfies `select` with `value`.
pub fn fill_vars(varmap: &VarMap, value: f64, select: impl Fn(&str) -> bool) -> Result<()> {
    for (name, var) in sorted_vars(varmap) {
        if select(&name) {
            var.set(&var.ones_like()?.affine(value, 0.0)?)?;
        }
    }
    Ok(())
}

pub fn set_var(varmap: &VarMap, name: &str, values: &Tensor) -> Result<()> {
    let data = varmap.data().lock().expect("var map lock poisoned");
    let var = data
        .get(name)
        .ok_or_else(|| Error::Contract(format!("no parameter named {name:?}")))?;
    var.set(&values.to_dtype(var.dtype())?)?;
    Ok(())
}

/// Deep copy of a var map's values (for snapshots and comparisons).
pub fn snapshot(varmap: &VarMap) -> Result<Vec<(String, Tensor)>> {
    sorted_vars(varmap)
        .into_iter()
        .map(|(n, v)| Ok((n, v.as_tensor().copy()?)))
        .collect()
}

/// Copies every value of `src` into the same-named parameter of `dst`.
pub fn copy_vars(src: &VarMap, dst: &VarMap) -> Result<()> {
    let targets = sorted_vars(dst);
    let sources = sorted_vars(src);
    if targets.len() != sources.len() {
        return Err(Error::Contract(format!(
            "copying {} parameters into {}",
            sources.len(),
            targets.len()
        )));
    }
    for ((sn, sv), (dn, dv)) in sources.iter().zip(&targets) {
        if sn != dn || sv.dims() != dv.dims() {
            return Err(Error::Contract(format!("parameter {sn:?} does not match {dn:?}")));
        }
        dv.set(&sv.as_tensor().to_dtype(dv.dtype())?)?;
    }
    Ok(())
}

pub fn var_builder(varmap: &VarMap, dtype: DType, device: &Device) -> VarBuilder<'static> {
    VarBuilder::from_varmap(varmap, dtype, device)
}

pub fn tensor_to_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}
