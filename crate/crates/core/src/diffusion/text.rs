use candle_core::{Device, Tensor, D};

use super::nn::{sinusoidal, softmax_last, Init, LayerNorm, Linear, ParamStore};
use crate::error::Result;
use crate::vocab::NUM_PLACEHOLDERS;

pub const BASE_TABLE: &str = "text.tokens";

pub fn placeholder_var_name(slot: usize) -> String {
    format!("text.placeholder.{slot}")
}

#[derive(Clone)]
struct MixingLayer {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl MixingLayer {
    fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d)?,
            q: Linear::new(store, &format!("{name}.q"), d, d)?,
            k: Linear::new(store, &format!("{name}.k"), d, d)?,
            v: Linear::new(store, &format!("{name}.v"), d, d)?,
            o: Linear::new(store, &format!("{name}.o"), d, d)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d)?,
            fc1: Linear::new(store, &format!("{name}.fc1"), d, 2 * d)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), 2 * d, d)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let d = x.dim(D::Minus1)?;
        let h = self.ln1.forward(x)?;
        let q = self.q.forward(&h)?;
        let k = self.k.forward(&h)?;
        let v = self.v.forward(&h)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (d as f64).sqrt())?;
        let attn = softmax_last(&scores)?;
        let x = (x + self.o.forward(&attn.matmul(&v)?)?)?;
        let h = self.ln2.forward(&x)?;
        Ok((&x + self.fc2.forward(&self.fc1.forward(&h)?.silu()?)?)?)
    }
}

/// Token table + sinusoidal positions + self-attention mixing. Produces the
/// conditioning features f(y) consumed by the U-Net cross-attention.
#[derive(Clone)]
pub struct TextEmbedder {
    base: candle_core::Var,
    placeholders: Vec<candle_core::Var>,
    positions: Tensor,
    layers: Vec<MixingLayer>,
    ln_out: LayerNorm,
}

impl TextEmbedder {
    pub fn new(store: &mut ParamStore, base_words: usize, d: usize, layers: usize, max_tokens: usize) -> Result<Self> {
        let base = store.get_or_init(BASE_TABLE, &[base_words, d], Init::Normal(1.0))?;
        let placeholders = (0..NUM_PLACEHOLDERS)
            .map(|k| store.get_or_init(&placeholder_var_name(k), &[1, d], Init::Normal(1.0)))
            .collect::<Result<Vec<_>>>()?;
        let pos: Vec<f64> = (0..max_tokens).map(|p| p as f64).collect();
        let positions = Tensor::from_vec(sinusoidal(&pos, d), (max_tokens, d), &Device::Cpu)?.to_dtype(store.dtype())?;
        let layers = (0..layers)
            .map(|l| MixingLayer::new(store, &format!("text.mix{l}"), d))
            .collect::<Result<Vec<_>>>()?;
        let ln_out = LayerNorm::new(store, "text.ln_out", d)?;
        Ok(Self { base, placeholders, positions, layers, ln_out })
    }

    /// Raw embedding rows for token ids (no positions, no mixing).
    pub fn lookup(&self, ids: &[usize]) -> Result<Tensor> {
        let mut rows: Vec<&Tensor> = vec![self.base.as_tensor()];
        rows.extend(self.placeholders.iter().map(|v| v.as_tensor()));
        let table = Tensor::cat(&rows, 0)?;
        let idx = Tensor::from_vec(ids.iter().map(|&i| i as u32).collect::<Vec<_>>(), ids.len(), &Device::Cpu)?;
        Ok(table.index_select(&idx, 0)?)
    }

    /// `tokens` holds B sequences, each already padded to the same length
    /// N <= max_tokens. Returns (B, N, d).
    pub fn forward(&self, tokens: &[Vec<usize>]) -> Result<Tensor> {
        let b = tokens.len();
        let n = tokens[0].len();
        let flat: Vec<usize> = tokens.iter().flatten().copied().collect();
        let d = self.base.dim(1)?;
        let x = self.lookup(&flat)?.reshape((b, n, d))?;
        let mut x = x.broadcast_add(&self.positions.narrow(0, 0, n)?)?;
        for layer in &self.layers {
            x = layer.forward(&x)?;
        }
        self.ln_out.forward(&x)
    }
}
