use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear-beta DDPM schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }
}

pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::Config(format!("schedule needs at least 2 timesteps, got {steps}")));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::Config(format!("invalid beta bounds [{beta_min}, {beta_max}]")));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|t| beta_min + (beta_max - beta_min) * t as f64 / (steps - 1) as f64)
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule { betas, alphas, alpha_bars })
}

/// A (possibly noised) image in model space, H x W x C.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub z: Array3<f64>,
    pub t: usize,
}

impl LatentState {
    /// The fixed pixel encoder: `z = 2 I - 1`.
    pub fn from_image(image: &Array3<f32>) -> Self {
        Self { z: image.mapv(|v| 2.0 * f64::from(v) - 1.0), t: 0 }
    }

    pub fn to_image(&self) -> Array3<f32> {
        self.z.mapv(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0) as f32)
    }
}

pub fn q_sample(z0: &LatentState, t: usize, eps: &Array3<f64>, schedule: &NoiseSchedule) -> Result<LatentState> {
    if eps.dim() != z0.z.dim() {
        return Err(Error::Shape(format!("noise {:?} vs latent {:?}", eps.dim(), z0.z.dim())));
    }
    let ab = *schedule
        .alpha_bars
        .get(t)
        .ok_or_else(|| Error::Config(format!("timestep {t} >= {}", schedule.len())))?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut z = z0.z.clone();
    z.zip_mut_with(eps, |zv, &e| *zv = a * *zv + b * e);
    Ok(LatentState { z, t })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_vec, rng_for};

    #[test]
    fn two_step_closed_form() {
        let s = make_schedule(2, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars, vec![0.5, 0.25]);
    }

    #[test]
    fn invalid_bounds() {
        assert!(make_schedule(1, 0.1, 0.2).is_err());
        assert!(make_schedule(10, 0.0, 0.2).is_err());
        assert!(make_schedule(10, 0.3, 0.2).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn hundred_step_product_matches_loop() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let mut prod = 1.0f64;
        for t in 0..100 {
            let beta = 1e-4 + (0.02 - 1e-4) * (t as f64) / 99.0;
            prod *= 1.0 - beta;
        }
        assert!((s.alpha_bars[99] - prod).abs() < 1e-12);
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        assert!(s.betas.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn q_sample_limits_and_oracle() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let mut rng = rng_for(1, "q", 0);
        let z0 = LatentState {
            z: Array3::from_shape_vec((4, 5, 3), gaussian_vec(&mut rng, 60).iter().map(|&v| v as f64).collect())
                .unwrap(),
            t: 0,
        };
        let eps = Array3::from_shape_vec((4, 5, 3), gaussian_vec(&mut rng, 60).iter().map(|&v| v as f64).collect())
            .unwrap();

        let zero = Array3::zeros((4, 5, 3));
        let zt = q_sample(&z0, 30, &zero, &s).unwrap();
        let scale = s.alpha_bars[30].sqrt();
        assert!(zt.z.iter().zip(z0.z.iter()).all(|(a, b)| *a == scale * *b));

        let near = q_sample(&z0, 0, &eps, &s).unwrap();
        assert!(near.z.iter().zip(z0.z.iter()).all(|(a, b)| (a - b).abs() < 0.05));

        let zt = q_sample(&z0, 57, &eps, &s).unwrap();
        let zs = z0.z.as_slice().unwrap();
        let es = eps.as_slice().unwrap();
        let ab = s.alpha_bars[57];
        for i in 0..zs.len() {
            let oracle = ab.sqrt() * zs[i] + (1.0 - ab).sqrt() * es[i];
            assert!((zt.z.as_slice().unwrap()[i] - oracle).abs() < 1e-12);
        }
        assert!(q_sample(&z0, 0, &Array3::zeros((4, 4, 3)), &s).is_err());
    }
}
