//! Trainable networks: template-conditioned encoder, deformation decoder,
//! template decoder, patch discriminator, diffusion UNet, attribute predictor.

mod blocks;
mod decoder;
mod discriminator;
mod encoder;
mod predictor;
mod template;
mod unet;

pub use blocks::{ConvLayer, CrossAttention, Init, LinearLayer, NormLayer, ResBlock};
pub use decoder::{Decoder, DecoderHead};
pub use discriminator::PatchDiscriminator;
pub use encoder::Encoder;
pub use predictor::{AttributePredictor, PredictorOutput};
pub use template::TemplateDecoder;
pub use unet::{timestep_embedding, UNet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid condition: {0}")]
    InvalidCondition(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Gaussian posterior over the latent code: mean and log-variance grids.
/// Log-variance is clamped to [-30, 20] at construction.
#[derive(Clone, Debug, PartialEq)]
pub struct Latent<T> {
    mu: Tensor<T>,
    logvar: Tensor<T>,
}

pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;

impl<T: Scalar> Latent<T> {
    pub fn new(mu: Tensor<T>, logvar: Tensor<T>) -> Self {
        assert_eq!(mu.shape(), logvar.shape(), "latent mu/logvar shape mismatch");
        let lo = T::of_f64(LOGVAR_MIN);
        let hi = T::of_f64(LOGVAR_MAX);
        Self { mu, logvar: logvar.map(|v| v.max(lo).min(hi)) }
    }

    pub fn mu(&self) -> &Tensor<T> {
        &self.mu
    }

    pub fn logvar(&self) -> &Tensor<T> {
        &self.logvar
    }

    /// `z = mu + exp(0.5 logvar) * noise`.
    pub fn reparameterize(&self, noise: &Tensor<T>) -> Tensor<T> {
        assert_eq!(noise.shape(), self.mu.shape(), "noise shape mismatch");
        let half = T::of_f64(0.5);
        let mut out = self.mu.clone();
        for ((o, &lv), &n) in out.data_mut().iter_mut().zip(self.logvar.data()).zip(noise.data()) {
            *o += (lv * half).exp() * n;
        }
        out
    }
}

/// Subject sex, encoded 0 = female, 1 = male.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sex {
    Female,
    Male,
}

impl Sex {
    pub fn from_index(v: u8) -> Result<Self, NetError> {
        match v {
            0 => Ok(Sex::Female),
            1 => Ok(Sex::Male),
            other => Err(NetError::InvalidCondition(format!("sex index {other} not in {{0,1}}"))),
        }
    }

    pub fn index(self) -> u8 {
        match self {
            Sex::Female => 0,
            Sex::Male => 1,
        }
    }
}

/// Conditioning attributes: age in years, binary sex.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub age_years: f64,
    pub sex: Sex,
}

impl Condition {
    pub fn new(age_years: f64, sex: Sex) -> Result<Self, NetError> {
        if !(0.0..=120.0).contains(&age_years) || !age_years.is_finite() {
            return Err(NetError::InvalidCondition(format!("age {age_years} outside [0, 120]")));
        }
        Ok(Self { age_years, sex })
    }

    /// Age normalized over [0, 100] years.
    pub fn age_norm(&self) -> f64 {
        self.age_years / 100.0
    }

    pub fn sex_value(&self) -> f64 {
        self.sex.index() as f64
    }

    /// `[B, 2]` tensor of (age_norm, sex) rows.
    pub fn to_rows<T: Scalar>(conds: &[Condition]) -> Tensor<T> {
        let mut data = Vec::with_capacity(conds.len() * 2);
        for c in conds {
            data.push(T::of_f64(c.age_norm()));
            data.push(T::of_f64(c.sex_value()));
        }
        Tensor::new(&[conds.len(), 2], data)
    }

    /// Constant condition channels repeated over the spatial grid:
    /// `[B, 2, spatial...]`.
    pub fn to_channels<T: Scalar>(conds: &[Condition], spatial: &[usize]) -> Tensor<T> {
        let vox: usize = spatial.iter().product();
        let mut shape = vec![conds.len(), 2];
        shape.extend_from_slice(spatial);
        let mut data = vec![T::zero(); conds.len() * 2 * vox];
        for (i, c) in conds.iter().enumerate() {
            data[i * 2 * vox..i * 2 * vox + vox].fill(T::of_f64(c.age_norm()));
            data[i * 2 * vox + vox..(i + 1) * 2 * vox].fill(T::of_f64(c.sex_value()));
        }
        Tensor::new(&shape, data)
    }
}

/// Number of conditioning attributes (age, sex).
pub const COND_DIM: usize = 2;

/// Architecture hyperparameters shared by all networks.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct NetConfig {
    pub image_channels: usize,
    pub spatial_rank: usize,
    pub latent_channels: usize,
    pub encoder_levels: usize,
    pub base_width: usize,
    pub unet_channels: Vec<usize>,
    /// Cross-attention on this many of the deepest UNet levels.
    pub cross_attention_levels: usize,
    pub condition_embed_dim: usize,
    pub time_embed_dim: usize,
    pub predictor_widths: Vec<usize>,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            image_channels: 1,
            spatial_rank: 2,
            latent_channels: 8,
            encoder_levels: 3,
            base_width: 16,
            unet_channels: vec![64, 96, 96],
            cross_attention_levels: 2,
            condition_embed_dim: 32,
            time_embed_dim: 128,
            predictor_widths: vec![16, 32, 48, 64],
        }
    }
}

impl NetConfig {
    /// Channel plan matching the full-resolution setting.
    pub fn full_scale() -> Self {
        Self {
            base_width: 64,
            unet_channels: vec![384, 512, 512],
            condition_embed_dim: 128,
            time_embed_dim: 512,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.encoder_levels < 1 {
            return Err(NetError::InvalidConfig("encoder_levels must be >= 1".into()));
        }
        if self.unet_channels.len() < 2 {
            return Err(NetError::InvalidConfig("unet_channels needs length >= 2".into()));
        }
        if self.cross_attention_levels > self.unet_channels.len() {
            return Err(NetError::InvalidConfig(
                "cross_attention_levels exceeds unet levels".into(),
            ));
        }
        if !(2..=3).contains(&self.spatial_rank) {
            return Err(NetError::InvalidConfig("spatial_rank must be 2 or 3".into()));
        }
        if self.latent_channels == 0 || self.base_width == 0 {
            return Err(NetError::InvalidConfig("zero channel count".into()));
        }
        Ok(())
    }

    /// Encoder widths per level, doubling and capped at 4x base.
    pub fn widths(&self) -> Vec<usize> {
        (0..self.encoder_levels).map(|i| self.base_width << i.min(2)).collect()
    }

    pub fn downsample_factor(&self) -> usize {
        1 << self.encoder_levels
    }

    /// Check that spatial dims are divisible by `2^levels`.
    pub fn check_spatial(&self, spatial: &[usize]) -> Result<(), NetError> {
        let f = self.downsample_factor();
        if spatial.len() != self.spatial_rank {
            return Err(NetError::ShapeMismatch(format!(
                "spatial rank {} != configured {}",
                spatial.len(),
                self.spatial_rank
            )));
        }
        if spatial.iter().any(|&s| s % f != 0 || s / f == 0) {
            return Err(NetError::ShapeMismatch(format!(
                "spatial dims {spatial:?} not divisible by {f}"
            )));
        }
        Ok(())
    }
}

/// Identifier of one named parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    /// Handle for the i-th parameter in registration order.
    pub fn from_index(i: usize) -> Self {
        ParamId(i)
    }

    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered registry of named parameter tensors for one model.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T: Scalar> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.entries.iter().any(|(n, _)| *n == name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, tensor));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Insert every parameter into a tape as a leaf.
    pub fn register(&self, tape: &mut Tape<T>) -> RegisteredParams {
        RegisteredParams { vars: self.entries.iter().map(|(_, t)| tape.leaf(t.clone())).collect() }
    }
}

/// Tape handles of a registered [`ParamSet`], index-aligned with it.
pub struct RegisteredParams {
    vars: Vec<Var>,
}

impl RegisteredParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
