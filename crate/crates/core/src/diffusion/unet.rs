use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::nn::{sinusoidal, softmax_last, upsample2, Conv1, Conv3, GroupNorm, Linear, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    /// Channel widths at full, 1/2 and 1/4 resolution.
    pub channels: [usize; 3],
    pub time_dim: usize,
    pub groups: usize,
    pub heads: usize,
    /// Width of each head's query/key space.
    pub head_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self { channels: [32, 64, 64], time_dim: 128, groups: 8, heads: 2, head_dim: 32 }
    }
}

#[derive(Clone)]
struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv3,
    temb: Linear,
    gn2: GroupNorm,
    conv2: Conv3,
    skip: Option<Conv1>,
}

impl ResBlock {
    fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, cfg: &UNetConfig) -> Result<Self> {
        Ok(Self {
            gn1: GroupNorm::new(store, &format!("{name}.gn1"), c_in, cfg.groups)?,
            conv1: Conv3::new(store, &format!("{name}.conv1"), c_in, c_out, false)?,
            temb: Linear::new(store, &format!("{name}.temb"), cfg.time_dim, c_out)?,
            gn2: GroupNorm::new(store, &format!("{name}.gn2"), c_out, cfg.groups)?,
            conv2: Conv3::new(store, &format!("{name}.conv2"), c_out, c_out, true)?,
            skip: if c_in != c_out { Some(Conv1::new(store, &format!("{name}.skip"), c_in, c_out)?) } else { None },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.gn1.forward(x)?.silu()?)?;
        let (b, c) = (h.dim(0)?, h.dim(1)?);
        let t = self.temb.forward(&temb.silu()?)?.reshape((b, c, 1, 1))?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&self.gn2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Probabilities of one cross-attention layer: (B, heads, H*W, N).
#[derive(Clone, Debug)]
pub struct AttnCapture {
    pub layer_id: &'static str,
    pub height: usize,
    pub width: usize,
    pub probs: Tensor,
}

#[derive(Clone)]
struct CrossAttention {
    id: &'static str,
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    head_dim: usize,
}

impl CrossAttention {
    fn new(store: &mut ParamStore, id: &'static str, c: usize, cond_dim: usize, cfg: &UNetConfig) -> Result<Self> {
        let inner = cfg.heads * cfg.head_dim;
        let name = format!("unet.attn_{id}");
        Ok(Self {
            id,
            norm: GroupNorm::new(store, &format!("{name}.norm"), c, cfg.groups)?,
            q: Linear::new(store, &format!("{name}.q"), c, inner)?,
            k: Linear::new(store, &format!("{name}.k"), cond_dim, inner)?,
            v: Linear::new(store, &format!("{name}.v"), cond_dim, inner)?,
            o: Linear::zeroed(store, &format!("{name}.o"), inner, c)?,
            heads: cfg.heads,
            head_dim: cfg.head_dim,
        })
    }

    /// softmax(Q K^T / sqrt(d)) V, with Q from image features and K, V from
    /// the prompt features.
    fn forward(&self, x: &Tensor, ctx: &Tensor) -> Result<(Tensor, AttnCapture)> {
        let (b, c, h, w) = x.dims4()?;
        let n = ctx.dim(1)?;
        let (heads, dh) = (self.heads, self.head_dim);
        let hn = self.norm.forward(x)?.reshape((b, c, h * w))?.transpose(1, 2)?;
        let q = self.q.forward(&hn)?.reshape((b, h * w, heads, dh))?.transpose(1, 2)?.contiguous()?;
        let k = self.k.forward(ctx)?.reshape((b, n, heads, dh))?.transpose(1, 2)?.contiguous()?;
        let v = self.v.forward(ctx)?.reshape((b, n, heads, dh))?.transpose(1, 2)?.contiguous()?;
        let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (dh as f64).sqrt())?;
        let probs = softmax_last(&scores)?;
        let out = probs.matmul(&v)?.transpose(1, 2)?.reshape((b, h * w, heads * dh))?;
        let out = self.o.forward(&out)?.transpose(1, 2)?.reshape((b, c, h, w))?;
        let capture = AttnCapture { layer_id: self.id, height: h, width: w, probs };
        Ok(((x + out)?, capture))
    }
}

#[derive(Clone)]
pub struct UNet {
    time_fc1: Linear,
    time_fc2: Linear,
    conv_in: Conv3,
    down1: ResBlock,
    down2: ResBlock,
    mid: ResBlock,
    attn_mid: CrossAttention,
    up2: ResBlock,
    attn_up: CrossAttention,
    up1: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv3,
    cfg: UNetConfig,
}

pub struct UNetOutput {
    pub eps: Tensor,
    pub attention: Vec<AttnCapture>,
}

/// Features of the first two U-Net levels, used as a frozen image embedder.
pub struct TrunkFeatures {
    pub half: Tensor,
    pub quarter: Tensor,
}

fn check_finite(t: &Tensor, location: &str) -> Result<()> {
    let s = t.abs()?.flatten_all()?.max(0)?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    if !s.is_finite() {
        return Err(Error::Numeric { location: location.to_string(), detail: "non-finite activation".into() });
    }
    Ok(())
}

impl UNet {
    pub fn new(store: &mut ParamStore, cfg: &UNetConfig, cond_dim: usize) -> Result<Self> {
        let [c1, c2, c3] = cfg.channels;
        let td = cfg.time_dim;
        Ok(Self {
            time_fc1: Linear::new(store, "unet.time1", c1, td)?,
            time_fc2: Linear::new(store, "unet.time2", td, td)?,
            conv_in: Conv3::new(store, "unet.conv_in", 3, c1, false)?,
            down1: ResBlock::new(store, "unet.down1", c1, c1, cfg)?,
            down2: ResBlock::new(store, "unet.down2", c1, c2, cfg)?,
            mid: ResBlock::new(store, "unet.mid", c2, c3, cfg)?,
            attn_mid: CrossAttention::new(store, "mid", c3, cond_dim, cfg)?,
            up2: ResBlock::new(store, "unet.up2", c3 + c2, c2, cfg)?,
            attn_up: CrossAttention::new(store, "up", c2, cond_dim, cfg)?,
            up1: ResBlock::new(store, "unet.up1", c2 + c1, c1, cfg)?,
            norm_out: GroupNorm::new(store, "unet.norm_out", c1, cfg.groups)?,
            conv_out: Conv3::new(store, "unet.conv_out", c1, 3, true)?,
            cfg: cfg.clone(),
        })
    }

    fn time_embedding(&self, t: &[usize], dtype: candle_core::DType) -> Result<Tensor> {
        let c1 = self.cfg.channels[0];
        let ts: Vec<f64> = t.iter().map(|&v| v as f64).collect();
        let feats = Tensor::from_vec(sinusoidal(&ts, c1), (t.len(), c1), &Device::Cpu)?.to_dtype(dtype)?;
        self.time_fc2.forward(&self.time_fc1.forward(&feats)?.silu()?)
    }

    /// `x`: (B, 3, H, W); `ctx`: (B, N, d). With `checked`, every stage is
    /// validated for finiteness and the first failing one is reported.
    pub fn forward(&self, x: &Tensor, t: &[usize], ctx: &Tensor, checked: bool) -> Result<UNetOutput> {
        let check = |t: &Tensor, loc: &str| if checked { check_finite(t, loc) } else { Ok(()) };
        let temb = self.time_embedding(t, x.dtype())?;
        check(&temb, "time embedding")?;
        let h0 = self.conv_in.forward(x)?;
        let h1 = self.down1.forward(&h0, &temb)?;
        check(&h1, "unet.down1")?;
        let h2 = self.down2.forward(&h1.avg_pool2d(2)?, &temb)?;
        check(&h2, "unet.down2")?;
        let h3 = self.mid.forward(&h2.avg_pool2d(2)?, &temb)?;
        check(&h3, "unet.mid")?;
        let (h3, cap_mid) = self.attn_mid.forward(&h3, ctx)?;
        check(&h3, "unet.attn_mid")?;
        let h4 = self.up2.forward(&Tensor::cat(&[&upsample2(&h3)?, &h2], 1)?, &temb)?;
        check(&h4, "unet.up2")?;
        let (h4, cap_up) = self.attn_up.forward(&h4, ctx)?;
        check(&h4, "unet.attn_up")?;
        let h5 = self.up1.forward(&Tensor::cat(&[&upsample2(&h4)?, &h1], 1)?, &temb)?;
        check(&h5, "unet.up1")?;
        let eps = self.conv_out.forward(&self.norm_out.forward(&h5)?.silu()?)?;
        check(&eps, "unet.conv_out")?;
        Ok(UNetOutput { eps, attention: vec![cap_mid, cap_up] })
    }

    /// Encoder trunk (down path) at the given timestep, without conditioning.
    pub fn trunk(&self, x: &Tensor, t: usize) -> Result<TrunkFeatures> {
        let b = x.dim(0)?;
        let temb = self.time_embedding(&vec![t; b], x.dtype())?;
        let h1 = self.down1.forward(&self.conv_in.forward(x)?, &temb)?;
        let h2 = self.down2.forward(&h1.avg_pool2d(2)?, &temb)?;
        let h3 = self.mid.forward(&h2.avg_pool2d(2)?, &temb)?;
        Ok(TrunkFeatures { half: h2, quarter: h3 })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }
}
