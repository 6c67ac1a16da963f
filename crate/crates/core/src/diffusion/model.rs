use std::collections::{BTreeMap, BTreeSet};

use candle_core::{DType, Device, Tensor};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::nn::ParamStore;
use super::schedule::{make_schedule, LatentState, NoiseSchedule};
use super::text::{placeholder_var_name, TextEmbedder, BASE_TABLE};
use super::unet::{AttnCapture, UNet, UNetConfig};
use crate::attention::AttentionStack;
use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

pub const MAX_TOKENS: usize = 24;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    /// Conditioning width d.
    pub cond_dim: usize,
    pub text_layers: usize,
    pub max_tokens: usize,
    pub timesteps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub unet: UNetConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            cond_dim: 64,
            text_layers: 2,
            max_tokens: MAX_TOKENS,
            timesteps: 100,
            beta_min: 1e-4,
            beta_max: 0.02,
            unet: UNetConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size % 4 != 0 {
            return Err(Error::Config("image_size must be divisible by 4".into()));
        }
        let g = self.unet.groups;
        if g == 0 || self.unet.channels.iter().any(|c| c % g != 0) {
            return Err(Error::Config("every channel width must be divisible by groups".into()));
        }
        if self.cond_dim % 2 != 0 || self.unet.channels[0] % 2 != 0 {
            return Err(Error::Config("sinusoidal widths must be even".into()));
        }
        if self.max_tokens == 0 || self.unet.heads == 0 || self.unet.head_dim == 0 {
            return Err(Error::Config("max_tokens, heads and head_dim must be positive".into()));
        }
        make_schedule(self.timesteps, self.beta_min, self.beta_max)?;
        Ok(())
    }
}

/// Denoiser, text embedder and the learnable placeholder rows.
#[derive(Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub schedule: NoiseSchedule,
    pub seed: u64,
    /// Placeholders whose rows were learned for a concept.
    pub registered: BTreeSet<String>,
    store: ParamStore,
    text: TextEmbedder,
    unet: UNet,
}

/// Encoded prompt f(y), padded to the model's token budget.
#[derive(Clone, Debug)]
pub struct PromptEncoding {
    pub tokens: Vec<usize>,
    /// (N, d)
    pub features: Tensor,
    /// Concept label or placeholder -> token index.
    pub token_positions: BTreeMap<String, usize>,
}

impl PromptEncoding {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn position(&self, key: &str) -> Result<usize> {
        self.token_positions
            .get(key)
            .copied()
            .ok_or_else(|| Error::MissingMask(key.to_string()))
    }
}

impl ModelParams {
    pub fn new(config: ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(dtype, seed);
        Self::assemble(config, Vocabulary::default(), store, seed)
    }

    pub(crate) fn assemble(config: ModelConfig, vocab: Vocabulary, mut store: ParamStore, seed: u64) -> Result<Self> {
        let schedule = make_schedule(config.timesteps, config.beta_min, config.beta_max)?;
        let text = TextEmbedder::new(&mut store, vocab.base_len(), config.cond_dim, config.text_layers, config.max_tokens)?;
        let unet = UNet::new(&mut store, &config.unet, config.cond_dim)?;
        Ok(Self { config, vocab, schedule, seed, registered: BTreeSet::new(), store, text, unet })
    }

    /// Independent copy (fresh storage) in the requested precision.
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let store = self.store.deep_clone(dtype)?;
        let mut out = Self::assemble(self.config.clone(), self.vocab.clone(), store, self.seed)?;
        out.registered = self.registered.clone();
        Ok(out)
    }

    pub fn deep_clone(&self) -> Result<Self> {
        self.to_dtype(self.dtype())
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn unet(&self) -> &UNet {
        &self.unet
    }

    pub fn num_timesteps(&self) -> usize {
        self.schedule.len()
    }

    /// Variables of the U-Net only.
    pub fn unet_vars(&self) -> Vec<candle_core::Var> {
        self.store.vars_with_prefix("unet.")
    }

    /// Everything trained during pretraining: U-Net and text embedder,
    /// excluding the placeholder rows.
    pub fn pretrain_vars(&self) -> Vec<candle_core::Var> {
        self.store
            .iter()
            .filter(|(k, _)| !k.starts_with("text.placeholder."))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn placeholder_var(&self, slot: usize) -> Result<candle_core::Var> {
        self.store
            .get(&placeholder_var_name(slot))
            .cloned()
            .ok_or_else(|| Error::UnknownPlaceholder(format!("slot {slot}")))
    }

    /// Current embedding row of any token id.
    pub fn token_row(&self, id: usize) -> Result<Vec<f64>> {
        Ok(self.text.lookup(&[id])?.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?)
    }

    pub fn set_placeholder_row(&self, slot: usize, row: &[f64]) -> Result<()> {
        let var = self.placeholder_var(slot)?;
        let t = Tensor::from_vec(row.to_vec(), (1, row.len()), &Device::Cpu)?.to_dtype(self.dtype())?;
        var.set(&t)?;
        Ok(())
    }

    /// Mean and standard deviation of the ordinary token-row norms.
    pub fn row_norm_stats(&self) -> Result<(f64, f64)> {
        let table = self
            .store
            .get(BASE_TABLE)
            .ok_or_else(|| Error::Checkpoint("missing token table".into()))?
            .as_tensor()
            .to_dtype(DType::F64)?;
        let norms: Vec<f64> = table.sqr()?.sum(1)?.sqrt()?.to_vec1()?;
        let m = norms.iter().sum::<f64>() / norms.len() as f64;
        let v = norms.iter().map(|n| (n - m).powi(2)).sum::<f64>() / norms.len() as f64;
        Ok((m, v.sqrt()))
    }

    pub fn pad_tokens(&self, tokens: &[usize]) -> Result<Vec<usize>> {
        let n = self.config.max_tokens;
        if tokens.len() > n {
            return Err(Error::Config(format!("prompt has {} tokens, limit {n}", tokens.len())));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab.len()) {
            return Err(Error::Vocabulary(format!("token id {bad}")));
        }
        let mut out = tokens.to_vec();
        out.resize(n, self.vocab.pad_id());
        Ok(out)
    }

    /// f(y) for a batch of token sequences, padded to the token budget: (B, N, d).
    pub fn encode_tokens(&self, tokens: &[Vec<usize>]) -> Result<Tensor> {
        let padded = tokens.iter().map(|t| self.pad_tokens(t)).collect::<Result<Vec<_>>>()?;
        self.text.forward(&padded)
    }

    pub fn encode_prompt(&self, tokens: &[usize], positions: BTreeMap<String, usize>) -> Result<PromptEncoding> {
        if let Some(&p) = positions.values().find(|&&p| p >= tokens.len()) {
            return Err(Error::TokenIndex { index: p, len: tokens.len() });
        }
        let padded = self.pad_tokens(tokens)?;
        let features = self.text.forward(std::slice::from_ref(&padded))?.squeeze(0)?.detach();
        Ok(PromptEncoding { tokens: padded, features, token_positions: positions })
    }

    /// Encodes a space-separated prompt such as `a photo of a [v1]`.
    pub fn encode_text(&self, text: &str) -> Result<PromptEncoding> {
        let words: Vec<&str> = text.split_whitespace().collect();
        let mut positions = BTreeMap::new();
        for (i, w) in words.iter().enumerate() {
            if w.starts_with("[v") {
                self.vocab.placeholder_slot(w)?;
                positions.insert(w.to_string(), i);
            }
        }
        let tokens = self.vocab.encode(&words)?;
        self.encode_prompt(&tokens, positions)
    }

    pub fn latents_to_tensor(&self, states: &[&Array3<f64>]) -> Result<Tensor> {
        let (h, w, c) = states[0].dim();
        let mut data = Vec::with_capacity(states.len() * h * w * c);
        for s in states {
            if s.dim() != (h, w, c) {
                return Err(Error::Shape("latents in a batch must share a shape".into()));
            }
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(s[[y, x, ch]]);
                    }
                }
            }
        }
        Ok(Tensor::from_vec(data, (states.len(), c, h, w), &Device::Cpu)?.to_dtype(self.dtype())?)
    }

    /// (B, C, H, W) -> B arrays of H x W x C.
    pub fn tensor_to_latents(t: &Tensor) -> Result<Vec<Array3<f64>>> {
        let (b, c, h, w) = t.dims4()?;
        let flat: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        Ok((0..b)
            .map(|n| Array3::from_shape_fn((h, w, c), |(y, x, ch)| flat[((n * c + ch) * h + y) * w + x]))
            .collect())
    }

    /// Raw U-Net pass on tensors.
    pub fn forward(&self, x: &Tensor, t: &[usize], ctx: &Tensor) -> Result<(Tensor, Vec<AttnCapture>)> {
        let out = self.unet.forward(x, t, ctx, false)?;
        Ok((out.eps, out.attention))
    }

    /// Per-item scalars sqrt(alpha_bar_t) and sqrt(1 - alpha_bar_t) as (B,1,1,1) tensors.
    pub fn noise_coefficients(&self, t: &[usize]) -> Result<(Tensor, Tensor)> {
        let mut a = Vec::with_capacity(t.len());
        let mut b = Vec::with_capacity(t.len());
        for &ti in t {
            let ab = *self
                .schedule
                .alpha_bars
                .get(ti)
                .ok_or_else(|| Error::Config(format!("timestep {ti} >= {}", self.schedule.len())))?;
            a.push(ab.sqrt());
            b.push((1.0 - ab).sqrt());
        }
        let n = t.len();
        let mk = |v: Vec<f64>| -> Result<Tensor> {
            Ok(Tensor::from_vec(v, (n, 1, 1, 1), &Device::Cpu)?.to_dtype(self.dtype())?)
        };
        Ok((mk(a)?, mk(b)?))
    }

    /// Z_t = sqrt(ab) Z_0 + sqrt(1 - ab) eps on tensors.
    pub fn q_sample_tensor(&self, z0: &Tensor, eps: &Tensor, t: &[usize]) -> Result<Tensor> {
        let (a, b) = self.noise_coefficients(t)?;
        Ok((z0.broadcast_mul(&a)? + eps.broadcast_mul(&b)?)?)
    }
}

/// eps_theta(Z_t, t, y). With `probe`, the cross-attention probabilities of
/// every layer are returned as well; capture never alters the prediction.
pub fn predict_noise(
    params: &ModelParams,
    state: &LatentState,
    prompt: &PromptEncoding,
    probe: bool,
) -> Result<(Array3<f64>, Option<AttentionStack>)> {
    if state.t >= params.num_timesteps() {
        return Err(Error::Config(format!("timestep {} >= {}", state.t, params.num_timesteps())));
    }
    let (h, w, c) = state.z.dim();
    if h != params.config.image_size || w != params.config.image_size || c != 3 {
        return Err(Error::Shape(format!("latent {:?} vs model size {}", state.z.dim(), params.config.image_size)));
    }
    let x = params.latents_to_tensor(&[&state.z])?;
    let ctx = prompt.features.unsqueeze(0)?;
    let out = params.unet.forward(&x, &[state.t], &ctx, false)?;
    let eps = ModelParams::tensor_to_latents(&out.eps)?.remove(0);
    if eps.iter().any(|v| !v.is_finite()) {
        // rerun with per-stage checks to name the offending layer
        params.unet.forward(&x, &[state.t], &ctx, true)?;
        return Err(Error::Numeric { location: "unet output".into(), detail: "non-finite prediction".into() });
    }
    let attn = if probe {
        let mut stacks = AttentionStack::from_captures(&out.attention, state.t)?;
        Some(stacks.remove(0))
    } else {
        None
    };
    Ok((eps, attn))
}

/// Plain denoising objective: mean of (eps - eps_hat)^2 over every pixel and
/// channel of the batch. Reduction runs in f64.
pub fn ldm_loss_tensor(eps_hat: &Tensor, eps: &Tensor) -> Result<Tensor> {
    let diff = (eps.to_dtype(DType::F64)? - eps_hat.to_dtype(DType::F64)?)?;
    Ok(diff.sqr()?.mean_all()?)
}

/// Noises each clean latent with its own timestep and noise, runs the model
/// and returns the mean squared error against the noise.
pub fn ldm_loss(
    params: &ModelParams,
    batch: &[(&LatentState, &PromptEncoding)],
    t: &[usize],
    eps: &[Array3<f64>],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    if t.len() != batch.len() || eps.len() != batch.len() {
        return Err(Error::Shape("batch, timesteps and noise must have equal length".into()));
    }
    let z0 = params.latents_to_tensor(&batch.iter().map(|(s, _)| &s.z).collect::<Vec<_>>())?;
    let e = params.latents_to_tensor(&eps.iter().collect::<Vec<_>>())?;
    let zt = params.q_sample_tensor(&z0, &e, t)?;
    let ctx = Tensor::stack(&batch.iter().map(|(_, p)| &p.features).collect::<Vec<_>>(), 0)?;
    let (eps_hat, _) = params.forward(&zt, t, &ctx)?;
    Ok(ldm_loss_tensor(&eps_hat, &e)?.to_scalar::<f64>()?)
}
