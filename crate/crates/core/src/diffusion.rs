//! DDPM machinery over latent codes: beta schedules, forward noising, the
//! denoising training step, ancestral sampling, latent scaling.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::denoising_objective;
use crate::rng::fill_standard_normal;
use crate::tensor::Tensor;
use crate::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum DiffusionError {
    #[error("schedule needs T >= 2, got {0}")]
    TooFewSteps(usize),
    #[error("timestep {t} out of range [0, {max})")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("invalid scale {0}")]
    InvalidScale(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    ScaledLinear,
}

const BETA_MIN: f64 = 1e-4;
const BETA_MAX: f64 = 0.02;

/// Noise schedule: per-step betas and cumulative alpha-bar products.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    pub kind: ScheduleKind,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    /// Linear: betas evenly spaced 1e-4 to 0.02; scaled-linear: evenly spaced
    /// in sqrt space over the same endpoints.
    pub fn new(timesteps: usize, kind: ScheduleKind) -> Result<Self, DiffusionError> {
        if timesteps < 2 {
            return Err(DiffusionError::TooFewSteps(timesteps));
        }
        let betas: Vec<f64> = (0..timesteps)
            .map(|i| {
                let f = i as f64 / (timesteps - 1) as f64;
                match kind {
                    ScheduleKind::Linear => BETA_MIN + (BETA_MAX - BETA_MIN) * f,
                    ScheduleKind::ScaledLinear => {
                        let s = BETA_MIN.sqrt() + (BETA_MAX.sqrt() - BETA_MIN.sqrt()) * f;
                        s * s
                    }
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(timesteps);
        let mut prod = 1.0;
        for &b in &betas {
            prod *= 1.0 - b;
            alpha_bars.push(prod);
        }
        Ok(Self { kind, betas, alpha_bars })
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_t(&self, t: usize) -> Result<(), DiffusionError> {
        if t >= self.timesteps() {
            return Err(DiffusionError::TimestepOutOfRange { t, max: self.timesteps() });
        }
        Ok(())
    }
}

/// Forward noising: `z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps`.
pub fn q_sample<T: Scalar>(
    z0: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    sched: &DiffusionSchedule,
) -> Result<Tensor<T>, DiffusionError> {
    sched.check_t(t)?;
    assert_eq!(z0.shape(), eps.shape(), "noise shape mismatch");
    let ab = sched.alpha_bars()[t];
    let (sa, sb) = (T::of_f64(ab.sqrt()), T::of_f64((1.0 - ab).sqrt()));
    Ok(z0.zip_map(eps, |z, e| sa * z + sb * e))
}

/// One-step estimate of `z0` from `z_t` and a noise prediction.
pub fn predict_z0<T: Scalar>(
    z_t: &Tensor<T>,
    eps: &Tensor<T>,
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<Tensor<T>, DiffusionError> {
    sched.check_t(t)?;
    let ab = sched.alpha_bars()[t];
    let inv_sa = T::of_f64(1.0 / ab.sqrt());
    let sb = T::of_f64((1.0 - ab).sqrt());
    Ok(z_t.zip_map(eps, |z, e| (z - sb * e) * inv_sa))
}

/// A noise predictor: `eps_hat = model(z_t, t)`. Conditioning is closed over.
pub trait EpsModel<T: Scalar> {
    fn predict(&self, z_t: &Tensor<T>, t: usize) -> Tensor<T>;
}

impl<T: Scalar, F: Fn(&Tensor<T>, usize) -> Tensor<T>> EpsModel<T> for F {
    fn predict(&self, z_t: &Tensor<T>, t: usize) -> Tensor<T> {
        self(z_t, t)
    }
}

/// One denoising training step on a single latent: draw `t` and `eps`, noise
/// the latent, return the mean-squared prediction error.
pub fn training_step<T: Scalar>(
    z0: &Tensor<T>,
    model: &impl EpsModel<T>,
    sched: &DiffusionSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<T, DiffusionError> {
    let t = crate::rng::uniform_usize(rng, sched.timesteps());
    let mut eps = Tensor::zeros(z0.shape());
    fill_standard_normal(rng, eps.data_mut());
    let z_t = q_sample(z0, t, &eps, sched)?;
    let pred = model.predict(&z_t, t);
    Ok(denoising_objective(&eps, &pred).expect("model output shape"))
}

/// Posterior mean/noise coefficients of the ancestral step at `t > 0`:
/// `z_{t-1} = c0 * z0_hat + ct * z_t + sigma * noise`.
pub fn posterior_coefficients(t: usize, sched: &DiffusionSchedule) -> (f64, f64, f64) {
    assert!(t > 0 && t < sched.timesteps());
    let ab_t = sched.alpha_bars()[t];
    let ab_prev = sched.alpha_bars()[t - 1];
    let beta_t = sched.betas()[t];
    let alpha_t = 1.0 - beta_t;
    let c0 = ab_prev.sqrt() * beta_t / (1.0 - ab_t);
    let ct = alpha_t.sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
    let sigma = ((1.0 - ab_prev) / (1.0 - ab_t) * beta_t).sqrt();
    (c0, ct, sigma)
}

/// Ancestral reverse diffusion from pure noise; no noise is added at the
/// final step, and with T = 1 the output equals the one-step z0 estimate.
pub fn ddpm_sample<T: Scalar>(
    model: &impl EpsModel<T>,
    sched: &DiffusionSchedule,
    rng: &mut ChaCha8Rng,
    shape: &[usize],
) -> Tensor<T> {
    let mut z = Tensor::zeros(shape);
    fill_standard_normal(rng, z.data_mut());
    let timesteps = sched.timesteps();
    for t in (0..timesteps).rev() {
        let eps = model.predict(&z, t);
        let z0 = predict_z0(&z, &eps, t, sched).expect("t in range");
        if t == 0 {
            z = z0;
            break;
        }
        let (c0, ct, sigma) = posterior_coefficients(t, sched);
        let (c0t, ctt, st) = (T::of_f64(c0), T::of_f64(ct), T::of_f64(sigma));
        let mut noise = Tensor::zeros(shape);
        fill_standard_normal(rng, noise.data_mut());
        let mut next = Tensor::zeros(shape);
        for i in 0..next.numel() {
            next.data_mut()[i] = c0t * z0.data()[i] + ctt * z.data()[i] + st * noise.data()[i];
        }
        z = next;
    }
    z
}

/// Latent normalization: reciprocal of the latent standard deviation measured
/// on a calibration batch, frozen into the stage-2 checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentScaler {
    pub scale: f64,
}

impl LatentScaler {
    pub fn identity() -> Self {
        Self { scale: 1.0 }
    }

    /// Fit on a calibration batch of latents.
    pub fn calibrate<T: Scalar>(latents: &[Tensor<T>]) -> Result<Self, DiffusionError> {
        let mut n = 0usize;
        let mut sum = 0.0f64;
        for l in latents {
            for &v in l.data() {
                sum += v.as_f64();
                n += 1;
            }
        }
        if n == 0 {
            return Err(DiffusionError::InvalidScale(f64::NAN));
        }
        let mean = sum / n as f64;
        let mut var = 0.0f64;
        for l in latents {
            for &v in l.data() {
                let d = v.as_f64() - mean;
                var += d * d;
            }
        }
        let std = (var / n as f64).sqrt();
        if !std.is_finite() || std <= 0.0 {
            return Err(DiffusionError::InvalidScale(std));
        }
        Ok(Self { scale: 1.0 / std })
    }

    pub fn validate(&self) -> Result<(), DiffusionError> {
        if !self.scale.is_finite() || self.scale <= 0.0 {
            return Err(DiffusionError::InvalidScale(self.scale));
        }
        Ok(())
    }
}

pub fn scale_latent<T: Scalar>(z: &Tensor<T>, scaler: &LatentScaler) -> Tensor<T> {
    let s = T::of_f64(scaler.scale);
    z.map(|v| v * s)
}

pub fn unscale_latent<T: Scalar>(z: &Tensor<T>, scaler: &LatentScaler) -> Tensor<T> {
    let s = T::of_f64(1.0 / scaler.scale);
    z.map(|v| v * s)
}
