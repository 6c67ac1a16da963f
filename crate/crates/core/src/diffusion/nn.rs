//! Minimal differentiable building blocks on top of candle tensors.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};

use crate::error::Result;
use crate::rng::{gaussian_vec, rng_for};

/// Named parameter arrays. Initialization of each array depends only on
/// (seed, name), so adding a parameter never perturbs the others.
#[derive(Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    seed: u64,
}

pub enum Init {
    /// Normal with the given standard deviation.
    Normal(f64),
    Zeros,
    Ones,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self { vars: BTreeMap::new(), dtype, seed }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn get_or_init(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            return Ok(v.clone());
        }
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let mut rng = rng_for(self.seed, name, 0);
                gaussian_vec(&mut rng, n).into_iter().map(|v| v * std as f32).collect()
            }
        };
        let t = Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let v = Var::from_tensor(&t)?;
        self.vars.insert(name.to_string(), v.clone());
        Ok(v)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.clone())
            .collect()
    }

    /// Deep copy with fresh storage.
    pub fn deep_clone(&self, dtype: DType) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (k, v) in &self.vars {
            let t = v.as_tensor().to_dtype(dtype)?.copy()?;
            vars.insert(k.clone(), Var::from_tensor(&t)?);
        }
        Ok(Self { vars, dtype, seed: self.seed })
    }

    pub fn insert(&mut self, name: &str, t: &Tensor) -> Result<()> {
        let t = t.to_dtype(self.dtype)?;
        match self.vars.get(name) {
            Some(v) => v.set(&t)?,
            None => {
                self.vars.insert(name.to_string(), Var::from_tensor(&t)?);
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }
}

#[derive(Clone)]
pub struct Linear {
    w: Var,
    b: Var,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let w = store.get_or_init(&format!("{name}.w"), &[fan_in, fan_out], Init::Normal(1.0 / (fan_in as f64).sqrt()))?;
        let b = store.get_or_init(&format!("{name}.b"), &[fan_out], Init::Zeros)?;
        Ok(Self { w, b })
    }

    /// Zero-initialized weight, for residual branches that should start as identity.
    pub fn zeroed(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let w = store.get_or_init(&format!("{name}.w"), &[fan_in, fan_out], Init::Zeros)?;
        let b = store.get_or_init(&format!("{name}.b"), &[fan_out], Init::Zeros)?;
        Ok(Self { w, b })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(self.w.as_tensor())?.broadcast_add(self.b.as_tensor())?)
    }
}

/// 3x3 convolution with zero padding 1, computed as shifted-slice im2col
/// followed by a matmul.
#[derive(Clone)]
pub struct Conv3 {
    w: Var,
    b: Var,
}

impl Conv3 {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, zero: bool) -> Result<Self> {
        let init = if zero { Init::Zeros } else { Init::Normal(1.0 / ((9 * c_in) as f64).sqrt()) };
        let w = store.get_or_init(&format!("{name}.w"), &[c_out, 9 * c_in], init)?;
        let b = store.get_or_init(&format!("{name}.b"), &[c_out], Init::Zeros)?;
        Ok(Self { w, b })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let xp = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
        let mut cols = Vec::with_capacity(9);
        for dy in 0..3 {
            for dx in 0..3 {
                cols.push(xp.narrow(2, dy, h)?.narrow(3, dx, w)?);
            }
        }
        let col = Tensor::cat(&cols, 1)?.reshape((b, 9 * c, h * w))?;
        let c_out = self.w.dim(0)?;
        let y = self.w.as_tensor().broadcast_left(b)?.contiguous()?.matmul(&col)?;
        let y = y.broadcast_add(&self.b.as_tensor().reshape((1, c_out, 1))?)?;
        Ok(y.reshape((b, c_out, h, w))?)
    }
}

#[derive(Clone)]
pub struct Conv1 {
    w: Var,
    b: Var,
}

impl Conv1 {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        let w = store.get_or_init(&format!("{name}.w"), &[c_out, c_in], Init::Normal(1.0 / (c_in as f64).sqrt()))?;
        let b = store.get_or_init(&format!("{name}.b"), &[c_out], Init::Zeros)?;
        Ok(Self { w, b })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let c_out = self.w.dim(0)?;
        let y = self.w.as_tensor().broadcast_left(b)?.contiguous()?.matmul(&x.reshape((b, c, h * w))?)?;
        let y = y.broadcast_add(&self.b.as_tensor().reshape((1, c_out, 1))?)?;
        Ok(y.reshape((b, c_out, h, w))?)
    }
}

#[derive(Clone)]
pub struct GroupNorm {
    gamma: Var,
    beta: Var,
    groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Result<Self> {
        let gamma = store.get_or_init(&format!("{name}.g"), &[channels], Init::Ones)?;
        let beta = store.get_or_init(&format!("{name}.b"), &[channels], Init::Zeros)?;
        Ok(Self { gamma, beta, groups: groups.min(channels) })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let g = self.groups;
        let xg = x.reshape((b, g, (c / g) * h * w))?;
        let mean = xg.mean_keepdim(2)?;
        let centered = xg.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(2)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?.reshape((b, c, h, w))?;
        let gamma = self.gamma.as_tensor().reshape((1, c, 1, 1))?;
        let beta = self.beta.as_tensor().reshape((1, c, 1, 1))?;
        Ok(normed.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
    }
}

#[derive(Clone)]
pub struct LayerNorm {
    gamma: Var,
    beta: Var,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.get_or_init(&format!("{name}.g"), &[dim], Init::Ones)?;
        let beta = store.get_or_init(&format!("{name}.b"), &[dim], Init::Zeros)?;
        Ok(Self { gamma, beta })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(normed.broadcast_mul(self.gamma.as_tensor())?.broadcast_add(self.beta.as_tensor())?)
    }
}

/// Numerically stable softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Nearest-neighbour 2x upsampling, expressed with broadcasts so that the
/// backward pass is a plain sum.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .reshape((b, c, 2 * h, 2 * w))?)
}

/// Sinusoidal features of shape (n, dim) for integer positions/timesteps.
pub fn sinusoidal(positions: &[f64], dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(positions.len() * dim);
    for &p in positions {
        for k in 0..dim {
            let freq = (-(10000f64.ln()) * (k % half) as f64 / half as f64).exp();
            let v = if k < half { (p * freq).sin() } else { (p * freq).cos() };
            out.push(v as f32);
        }
    }
    out
}

/// Plain Adam over a fixed set of variables. The moments are ordinary
/// tensors, so the optimizer can be cloned and its state inspected.
#[derive(Clone)]
pub struct Adam {
    vars: Vec<Var>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    steps: i32,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(vars: Vec<Var>, lr: f64) -> Result<Self> {
        let m = vars.iter().map(|v| v.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self { vars, m, v, steps: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 })
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Applies one update; variables without a gradient are left alone.
    pub fn step(&mut self, grads: &candle_core::backprop::GradStore) -> Result<()> {
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        for (i, var) in self.vars.iter().enumerate() {
            let Some(g) = grads.get(var) else { continue };
            let g = g.to_dtype(var.dtype())?;
            self.m[i] = ((&self.m[i] * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            self.v[i] = ((&self.v[i] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&self.m[i] / c1)?;
            let v_hat = (&self.v[i] / c2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            var.set(&(var.as_tensor() - (update * self.lr)?)?)?;
        }
        Ok(())
    }
}
