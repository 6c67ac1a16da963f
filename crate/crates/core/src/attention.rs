//! Cross-attention capture and aggregation into one soft map per token.
//!
//! Coarse layers are bilinearly upsampled (half-pixel centers, clamped
//! edges) to the working resolution, then averaged over heads and then over
//! layers. The upsampling is a fixed linear operator, so the same matrices
//! serve both the array path used for mask extraction and the tensor path
//! that carries gradients for the attention loss.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use ndarray::{s, Array2, Array4};
use rand::seq::index::sample as sample_indices;

use crate::diffusion::{AttnCapture, LatentState, ModelParams, PromptEncoding};
use crate::error::{Error, Result};
use crate::rng::{gaussian_vec, rng_for};
use crate::scene::io::soft_to_png;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayer {
    pub layer_id: String,
    pub height: usize,
    pub width: usize,
    /// (heads, H_l, W_l, N); sums to 1 over the last axis.
    pub maps: Array4<f64>,
}

impl AttentionLayer {
    pub fn heads(&self) -> usize {
        self.maps.dim().0
    }

    pub fn tokens(&self) -> usize {
        self.maps.dim().3
    }
}

/// All cross-attention maps of one forward pass for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStack {
    pub t: usize,
    pub layers: Vec<AttentionLayer>,
}

impl AttentionStack {
    /// Splits batched captures into one stack per batch item.
    pub fn from_captures(captures: &[AttnCapture], t: usize) -> Result<Vec<AttentionStack>> {
        let b = captures.first().map(|c| c.probs.dim(0)).transpose()?.unwrap_or(0);
        let mut stacks: Vec<AttentionStack> = (0..b).map(|_| AttentionStack { t, layers: vec![] }).collect();
        for cap in captures {
            let (bb, heads, hw, n) = cap.probs.dims4()?;
            debug_assert_eq!(bb, b);
            let flat: Vec<f64> = cap.probs.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
            for (i, stack) in stacks.iter_mut().enumerate() {
                let chunk = &flat[i * heads * hw * n..(i + 1) * heads * hw * n];
                let maps = Array4::from_shape_vec((heads, cap.height, cap.width, n), chunk.to_vec())
                    .map_err(|e| Error::Shape(e.to_string()))?;
                stack.layers.push(AttentionLayer {
                    layer_id: cap.layer_id.to_string(),
                    height: cap.height,
                    width: cap.width,
                    maps,
                });
            }
        }
        Ok(stacks)
    }

    pub fn tokens(&self) -> usize {
        self.layers.first().map_or(0, |l| l.tokens())
    }

    /// Largest deviation of any per-pixel token sum from 1.
    pub fn normalization_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for layer in &self.layers {
            let (heads, h, w, _) = layer.maps.dim();
            for k in 0..heads {
                for y in 0..h {
                    for x in 0..w {
                        let s: f64 = layer.maps.slice(s![k, y, x, ..]).sum();
                        worst = worst.max((s - 1.0).abs());
                    }
                }
            }
        }
        worst
    }
}

/// 1-D bilinear interpolation weights from `src` samples to `dst` samples:
/// a (dst, src) matrix with rows summing to 1.
pub fn interp_matrix_1d(src: usize, dst: usize) -> Array2<f64> {
    let mut m = Array2::zeros((dst, src));
    let scale = src as f64 / dst as f64;
    for i in 0..dst {
        let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(src - 1);
        let frac = pos - lo as f64;
        m[[i, lo]] += 1.0 - frac;
        m[[i, hi]] += frac;
    }
    m
}

pub fn upsample_bilinear(map: &Array2<f64>, target: (usize, usize)) -> Array2<f64> {
    let (h, w) = map.dim();
    if (h, w) == target {
        return map.clone();
    }
    let r = interp_matrix_1d(h, target.0);
    let c = interp_matrix_1d(w, target.1);
    r.dot(map).dot(&c.t())
}

/// Soft map C_attn for token `p`: upsample each layer's slice to `target`,
/// average heads, then layers.
pub fn aggregate_token_map(stack: &AttentionStack, p: usize, target: (usize, usize)) -> Result<Array2<f64>> {
    let n = stack.tokens();
    if p >= n {
        return Err(Error::TokenIndex { index: p, len: n });
    }
    if stack.layers.is_empty() {
        return Err(Error::Shape("empty attention stack".into()));
    }
    let mut acc = Array2::<f64>::zeros(target);
    for layer in &stack.layers {
        let heads = layer.heads();
        let mut head_mean = Array2::<f64>::zeros((layer.height, layer.width));
        for k in 0..heads {
            head_mean += &layer.maps.slice(s![k, .., .., p]);
        }
        head_mean /= heads as f64;
        acc += &upsample_bilinear(&head_mean, target);
    }
    acc /= stack.layers.len() as f64;
    Ok(acc)
}

/// Rescales to [0, 1]; a constant map becomes all zeros.
pub fn min_max_normalize(map: &Array2<f64>) -> Array2<f64> {
    let lo = map.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo > 1e-12) {
        return Array2::zeros(map.dim());
    }
    map.mapv(|v| (v - lo) / (hi - lo))
}

/// Differentiable counterpart of [`aggregate_token_map`] for a batch.
/// Returns (B, H*W, K) for the K token positions, row-major spatial order.
pub struct TensorAggregator {
    target: (usize, usize),
    ops: Vec<((usize, usize), Tensor)>,
}

impl TensorAggregator {
    pub fn new(target: (usize, usize)) -> Self {
        Self { target, ops: Vec::new() }
    }

    fn operator(&mut self, h: usize, w: usize, dtype: DType) -> Result<Tensor> {
        if let Some((_, t)) = self.ops.iter().find(|(k, t)| *k == (h, w) && t.dtype() == dtype) {
            return Ok(t.clone());
        }
        let r = interp_matrix_1d(h, self.target.0);
        let c = interp_matrix_1d(w, self.target.1);
        let (th, tw) = self.target;
        // kron(R, C): (th*tw, h*w)
        let mut data = Vec::with_capacity(th * tw * h * w);
        for i in 0..th {
            for j in 0..tw {
                for y in 0..h {
                    for x in 0..w {
                        data.push(r[[i, y]] * c[[j, x]]);
                    }
                }
            }
        }
        let t = Tensor::from_vec(data, (th * tw, h * w), &Device::Cpu)?.to_dtype(dtype)?;
        self.ops.push(((h, w), t.clone()));
        Ok(t)
    }

    pub fn aggregate(&mut self, captures: &[AttnCapture], positions: &[usize]) -> Result<Tensor> {
        let idx = Tensor::from_vec(positions.iter().map(|&p| p as u32).collect::<Vec<_>>(), positions.len(), &Device::Cpu)?;
        let mut acc: Option<Tensor> = None;
        for cap in captures {
            let n = cap.probs.dim(3)?;
            if let Some(&bad) = positions.iter().find(|&&p| p >= n) {
                return Err(Error::TokenIndex { index: bad, len: n });
            }
            let sel = cap.probs.index_select(&idx, 3)?.mean(1)?; // (B, hw, K)
            let op = self.operator(cap.height, cap.width, sel.dtype())?;
            let up = op.broadcast_left(sel.dim(0)?)?.contiguous()?.matmul(&sel)?;
            acc = Some(match acc {
                None => up,
                Some(a) => (a + up)?,
            });
        }
        let acc = acc.ok_or_else(|| Error::Shape("no attention layers captured".into()))?;
        Ok((acc / captures.len() as f64)?)
    }
}

/// Mean soft maps for several token positions at once, over `n_timesteps`
/// distinct timesteps drawn without replacement, each noised with fresh
/// noise. Every returned map is min-max normalized.
pub fn average_maps_over_timesteps(
    params: &ModelParams,
    z0: &LatentState,
    prompt: &PromptEncoding,
    positions: &[usize],
    n_timesteps: usize,
    seed: u64,
) -> Result<Vec<Array2<f64>>> {
    let total = params.num_timesteps();
    if n_timesteps == 0 || n_timesteps > total {
        return Err(Error::Config(format!("n_timesteps must be in 1..={total}, got {n_timesteps}")));
    }
    if let Some(&bad) = positions.iter().find(|&&p| p >= prompt.len()) {
        return Err(Error::TokenIndex { index: bad, len: prompt.len() });
    }
    let mut rng = rng_for(seed, "attn-timesteps", 0);
    let mut ts: Vec<usize> = sample_indices(&mut rng, total, n_timesteps).into_vec();
    ts.sort_unstable();
    let (h, w, c) = z0.z.dim();
    let target = (h, w);
    let mut sums = vec![Array2::<f64>::zeros(target); positions.len()];
    const CHUNK: usize = 10;
    for chunk in ts.chunks(CHUNK) {
        let b = chunk.len();
        let noise: Vec<f32> = chunk
            .iter()
            .flat_map(|&t| gaussian_vec(&mut rng_for(seed, "attn-noise", t as u64), c * h * w))
            .collect();
        let eps = Tensor::from_vec(noise, (b, c, h, w), &Device::Cpu)?.to_dtype(params.dtype())?;
        let x0 = params.latents_to_tensor(&vec![&z0.z; b])?;
        let zt = params.q_sample_tensor(&x0, &eps, chunk)?;
        let ctx = prompt.features.unsqueeze(0)?.broadcast_as((b, prompt.features.dim(0)?, prompt.features.dim(1)?))?;
        let (_, caps) = params.forward(&zt, chunk, &ctx.contiguous()?)?;
        for (i, &t) in chunk.iter().enumerate() {
            let single: Vec<AttnCapture> = caps
                .iter()
                .map(|cap| -> Result<AttnCapture> {
                    Ok(AttnCapture { probs: cap.probs.narrow(0, i, 1)?, ..cap.clone() })
                })
                .collect::<Result<_>>()?;
            let stack = AttentionStack::from_captures(&single, t)?.remove(0);
            for (k, &p) in positions.iter().enumerate() {
                sums[k] += &aggregate_token_map(&stack, p, target)?;
            }
        }
    }
    Ok(sums
        .into_iter()
        .map(|m| min_max_normalize(&(m / n_timesteps as f64)))
        .collect())
}

/// Timestep-averaged, normalized soft map for a single token position.
pub fn average_over_timesteps(
    params: &ModelParams,
    z0: &LatentState,
    prompt: &PromptEncoding,
    p: usize,
    n_timesteps: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    Ok(average_maps_over_timesteps(params, z0, prompt, &[p], n_timesteps, seed)?.remove(0))
}

/// Writes each layer's head-averaged map for the given token positions as
/// `attn_<layer>_tok<p>.png`, min-max normalized, at native resolution.
pub fn dump_attention(stack: &AttentionStack, positions: &[usize], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for layer in &stack.layers {
        for &p in positions {
            if p >= layer.tokens() {
                return Err(Error::TokenIndex { index: p, len: layer.tokens() });
            }
            let mut m = Array2::<f64>::zeros((layer.height, layer.width));
            for k in 0..layer.heads() {
                m += &layer.maps.slice(s![k, .., .., p]);
            }
            soft_to_png(&min_max_normalize(&m)).save(dir.join(format!("attn_{}_tok{p}.png", layer.layer_id)))?;
        }
    }
    Ok(())
}
