use candle_core::{Device, Tensor};
use ndarray::Array3;

use super::model::{ModelParams, PromptEncoding};
use crate::error::{Error, Result};
use crate::rng::{gaussian_vec, rng_for, Rng};

/// Evenly spaced subset of `0..total` with `n` entries, ascending, always
/// containing both ends.
fn respaced(total: usize, n: usize) -> Vec<usize> {
    if n == 1 {
        return vec![total - 1];
    }
    (0..n)
        .map(|i| ((i as f64) * (total - 1) as f64 / (n - 1) as f64).round() as usize)
        .collect()
}

fn noise(rngs: &mut [Rng], per_item: usize, shape: (usize, usize, usize, usize)) -> Result<Tensor> {
    let data: Vec<f32> = rngs.iter_mut().flat_map(|r| gaussian_vec(r, per_item)).collect();
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?)
}

/// Ancestral DDPM sampling of one image per seed. With `n_steps < T` the
/// chain runs on an evenly respaced subset of timesteps. The output is
/// decoded with the fixed pixel decoder and clipped to [0, 1]. Each image
/// depends only on its own seed.
pub fn sample_batch(params: &ModelParams, prompt: &PromptEncoding, n_steps: usize, seeds: &[u64]) -> Result<Vec<Array3<f32>>> {
    let total = params.num_timesteps();
    if n_steps == 0 || n_steps > total {
        return Err(Error::Config(format!("n_steps must be in 1..={total}, got {n_steps}")));
    }
    if seeds.is_empty() {
        return Ok(vec![]);
    }
    let b = seeds.len();
    let size = params.config.image_size;
    let shape = (b, 3, size, size);
    let per_item = 3 * size * size;
    let mut rngs: Vec<Rng> = seeds.iter().map(|&s| rng_for(s, "sample", 0)).collect();
    let ctx = prompt.features.to_dtype(params.dtype())?.unsqueeze(0)?.repeat((b, 1, 1))?.detach();
    let taus = respaced(total, n_steps);
    let ab = &params.schedule.alpha_bars;
    let mut x = noise(&mut rngs, per_item, shape)?.to_dtype(params.dtype())?;
    for i in (0..taus.len()).rev() {
        let t = taus[i];
        let ab_t = ab[t];
        let ab_prev = if i > 0 { ab[taus[i - 1]] } else { 1.0 };
        let beta = 1.0 - ab_t / ab_prev;
        let (eps_hat, _) = params.forward(&x, &vec![t; b], &ctx)?;
        let x0 = ((&x - (eps_hat * (1.0 - ab_t).sqrt())?)? / ab_t.sqrt())?.clamp(-1.0, 1.0)?;
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab_t);
        let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
        let mean = ((x0 * c0)? + (&x * ct)?)?;
        x = if i > 0 {
            let var = beta * (1.0 - ab_prev) / (1.0 - ab_t);
            let z = noise(&mut rngs, per_item, shape)?.to_dtype(params.dtype())?;
            (mean + (z * var.sqrt())?)?
        } else {
            mean
        };
        // The weights are tracked variables; without this every step would
        // keep the whole chain of forward passes alive.
        x = x.detach();
    }
    let images = ModelParams::tensor_to_latents(&x)?
        .into_iter()
        .map(|z| z.mapv(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0) as f32))
        .collect::<Vec<_>>();
    if images.iter().any(|im| im.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numeric { location: "sampler".into(), detail: "non-finite sample".into() });
    }
    Ok(images)
}

pub fn sample(params: &ModelParams, prompt: &PromptEncoding, n_steps: usize, seed: u64) -> Result<Array3<f32>> {
    Ok(sample_batch(params, prompt, n_steps, &[seed])?.remove(0))
}
