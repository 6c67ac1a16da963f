use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use ndarray::{s, Array3};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::model::{ldm_loss_tensor, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::rng::{derive, gaussian_vec, rng_for};
use crate::scene::{caption_for, SceneSample, NUM_TEMPLATES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    /// Final learning rate as a fraction of `lr` after cosine decay.
    pub lr_floor: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub hflip: bool,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 8,
            lr: 2e-3,
            warmup: 100,
            lr_floor: 0.1,
            weight_decay: 0.0,
            grad_clip: 1.0,
            hflip: true,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..=1.0).contains(&self.lr_floor) {
            return Err(Error::Config("invalid learning-rate settings".into()));
        }
        Ok(())
    }

    /// Linear warmup followed by cosine decay to `lr * lr_floor`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.steps.saturating_sub(self.warmup).max(1) as f64;
        let p = ((step - self.warmup) as f64 / span).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
        self.lr * (self.lr_floor + (1.0 - self.lr_floor) * cos)
    }
}

pub struct TrainReport {
    pub params: ModelParams,
    /// Batch loss at every step.
    pub losses: Vec<f64>,
}

/// Rescales gradients in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub(crate) fn clip_grad_norm(grads: &mut GradStore, vars: &[Var], max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v) {
            sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
        }
    }
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for v in vars {
            if let Some(g) = grads.remove(v) {
                grads.insert(v, (g * scale)?);
            }
        }
    }
    Ok(norm)
}

fn flip_horizontal(img: &Array3<f32>) -> Array3<f32> {
    img.slice(s![.., ..;-1, ..]).to_owned()
}

/// Pretrains denoiser and text embedder on captioned scenes with the plain
/// denoising objective. Every batch (items, caption templates, timesteps,
/// noise, flips) is a pure function of `(seed, step)`.
pub fn pretrain(
    corpus: &[SceneSample],
    model: &ModelConfig,
    train: &TrainConfig,
    seed: u64,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    model.validate()?;
    train.validate()?;
    let params = ModelParams::new(model.clone(), derive(seed, "model-init", 0), DType::F32)?;
    if train.steps == 0 {
        return Ok(TrainReport { params, losses: vec![] });
    }
    if corpus.is_empty() {
        return Err(Error::Config("cannot pretrain on an empty corpus".into()));
    }
    let size = model.image_size;
    if let Some(bad) = corpus.iter().find(|s| s.height() != size || s.width() != size) {
        return Err(Error::Shape(format!("{} is not {size}x{size}", bad.sample_id)));
    }
    let captions = corpus
        .iter()
        .map(|scene| {
            (0..NUM_TEMPLATES)
                .map(|k| caption_for(scene, k, &params.vocab).map(|c| c.tokens))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let vars = params.pretrain_vars();
    let mut opt = AdamW::new(
        vars.clone(),
        ParamsAdamW { lr: train.lr_at(0), weight_decay: train.weight_decay, ..Default::default() },
    )?;
    let per_item = 3 * size * size;
    let mut losses = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let mut rng = rng_for(seed, "pretrain-batch", step as u64);
        let b = train.batch_size;
        let mut z0 = Vec::with_capacity(b * per_item);
        let mut tokens = Vec::with_capacity(b);
        let mut ts = Vec::with_capacity(b);
        for _ in 0..b {
            let i = rng.random_range(0..corpus.len());
            let template = rng.random_range(0..NUM_TEMPLATES);
            let flip = train.hflip && rng.random_bool(0.5);
            let img = if flip { flip_horizontal(&corpus[i].image) } else { corpus[i].image.clone() };
            // NCHW, z = 2I - 1
            for c in 0..3 {
                z0.extend(img.slice(s![.., .., c]).iter().map(|&v| 2.0 * v - 1.0));
            }
            tokens.push(captions[i][template].clone());
            ts.push(rng.random_range(0..params.num_timesteps()));
        }
        let eps = gaussian_vec(&mut rng, b * per_item);
        let z0 = Tensor::from_vec(z0, (b, 3, size, size), &Device::Cpu)?;
        let eps = Tensor::from_vec(eps, (b, 3, size, size), &Device::Cpu)?;
        let zt = params.q_sample_tensor(&z0, &eps, &ts)?;
        let ctx = params.encode_tokens(&tokens)?;
        let (eps_hat, _) = params.forward(&zt, &ts, &ctx)?;
        let loss = ldm_loss_tensor(&eps_hat, &eps)?;
        let value = loss.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::Divergence { step, loss: value });
        }
        let mut grads = loss.backward()?;
        clip_grad_norm(&mut grads, &vars, train.grad_clip)?;
        opt.set_learning_rate(train.lr_at(step));
        opt.step(&grads)?;
        losses.push(value);
        on_step(step, value);
        if train.log_every > 0 && (step + 1) % train.log_every == 0 {
            let recent = &losses[losses.len().saturating_sub(train.log_every)..];
            log::info!("pretrain step {}/{}: loss {:.4}", step + 1, train.steps, recent.iter().sum::<f64>() / recent.len() as f64);
        }
    }
    Ok(TrainReport { params, losses })
}
