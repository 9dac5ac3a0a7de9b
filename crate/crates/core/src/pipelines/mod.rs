//! Two-stage training orchestration, sample generation, checkpointing.

pub mod checkpoint;
pub mod optim;
pub mod predictor_train;
pub mod sample;
pub mod stage1;
pub mod stage2;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{DiffusionError, ScheduleKind};
use crate::fields::{FieldError, LabelMap, Volume};
use crate::losses::{LossError, Stage1Weights};
use crate::nets::{
    Decoder, DecoderHead, Encoder, NetConfig, NetError, ParamSet, PatchDiscriminator, TemplateDecoder,
};
use crate::phantoms::DataError;
use crate::rng::substream;
use crate::Scalar;
use checkpoint::CheckpointError;

pub use checkpoint::{CheckpointMeta, TensorStore};
pub use predictor_train::{train_predictor, PredictorCheckpoint, PredictorTrainConfig};
pub use sample::{generate_samples, SamplePlan};
pub use stage1::{train_stage1, Stage1Checkpoint};
pub use stage2::{train_stage2, Stage2Checkpoint};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step}: {dump}")]
    NanAbort { step: usize, dump: String },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Model family: plain latent-diffusion reconstruction, or the
/// template-plus-deformation design; the `-c` variants also inject the
/// conditions into the autoencoder (condition channels on the latent, and a
/// conditional template where applicable).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Ldm,
    LdmC,
    Morphldm,
    MorphldmC,
}

impl Variant {
    /// Conditions concatenated to the latent (the `-c` variants).
    pub fn conditional_autoencoder(self) -> bool {
        matches!(self, Variant::LdmC | Variant::MorphldmC)
    }

    /// Decodes a deformation field applied to a learned template.
    pub fn uses_template(self) -> bool {
        matches!(self, Variant::Morphldm | Variant::MorphldmC)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Ldm => "ldm",
            Variant::LdmC => "ldm_c",
            Variant::Morphldm => "morphldm",
            Variant::MorphldmC => "morphldm_c",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub steps: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Stage1Config {
    pub optim: OptimConfig,
    pub weights: Stage1Weights,
    /// Trailing fraction of the dataset held out for validation.
    pub val_fraction: f64,
    pub val_interval: usize,
    /// Cap on held-out samples used per validation pass.
    pub val_max_samples: usize,
    /// Stop once held-out L1 falls below this (0 disables).
    pub early_stop_l1: f64,
    /// Periodic checkpoint interval in steps (0 = final only).
    pub checkpoint_interval: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            optim: OptimConfig { lr: 2e-4, warmup_steps: 200, batch_size: 8, steps: 20_000 },
            // field-regularizer weights calibrated to the phantom family so
            // that registration stays profitable under mean reductions; the
            // reference-scale values live in Stage1Weights::default()
            weights: Stage1Weights { alpha: 0.03, beta: 0.01, kl_weight: 1e-7, adv_weight: 0.0 },
            val_fraction: 0.1,
            val_interval: 100,
            val_max_samples: 128,
            early_stop_l1: 0.0,
            checkpoint_interval: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Stage2Config {
    pub optim: OptimConfig,
    pub timesteps: usize,
    pub schedule: ScheduleKind,
    /// Latents used to calibrate the latent scaler.
    pub calibration_samples: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            optim: OptimConfig { lr: 1e-4, warmup_steps: 500, batch_size: 16, steps: 2_000 },
            timesteps: 250,
            schedule: ScheduleKind::Linear,
            calibration_samples: 256,
        }
    }
}

pub const RUN_CONFIG_VERSION: u32 = 1;

/// One declarative run configuration covering both stages and sampling.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    pub version: u32,
    pub variant: Variant,
    pub seed: u64,
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    pub net: NetConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
}

impl RunConfig {
    pub fn new(variant: Variant, dataset: PathBuf, out_dir: PathBuf, seed: u64) -> Self {
        Self {
            version: RUN_CONFIG_VERSION,
            variant,
            seed,
            dataset,
            out_dir,
            net: NetConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.version != RUN_CONFIG_VERSION {
            return Err(TrainError::InvalidConfig(format!(
                "unknown config version {}",
                self.version
            )));
        }
        self.net.validate().map_err(TrainError::Net)?;
        self.stage1.weights.validate().map_err(TrainError::Loss)?;
        if self.stage1.optim.batch_size == 0 || self.stage1.optim.steps == 0 {
            return Err(TrainError::InvalidConfig("stage1 batch/steps must be > 0".into()));
        }
        if self.stage2.optim.batch_size == 0 || self.stage2.optim.steps == 0 {
            return Err(TrainError::InvalidConfig("stage2 batch/steps must be > 0".into()));
        }
        if self.stage2.timesteps < 2 {
            return Err(TrainError::InvalidConfig("stage2 timesteps must be >= 2".into()));
        }
        if !(0.0..0.9).contains(&self.stage1.val_fraction) {
            return Err(TrainError::InvalidConfig("val_fraction must be in [0, 0.9)".into()));
        }
        Ok(())
    }

    pub fn stage1_dir(&self) -> PathBuf {
        self.out_dir.join("stage1")
    }

    pub fn stage2_dir(&self) -> PathBuf {
        self.out_dir.join("stage2")
    }

    /// Fingerprint used to detect config mismatches between stages.
    pub fn compat_key(&self) -> String {
        let net = serde_json::to_string(&self.net).expect("net serializes");
        format!("{}:{}:{:08x}", self.variant.name(), self.seed, crc32fast::hash(net.as_bytes()))
    }
}

/// Stage-1 networks for one variant: encoder, decoder, optional template
/// decoder, and the discriminator on its own parameter set.
pub struct Stage1Model<T: Scalar> {
    pub gen_params: ParamSet<T>,
    pub disc_params: ParamSet<T>,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub template: Option<TemplateDecoder>,
    pub discriminator: PatchDiscriminator,
    pub variant: Variant,
}

impl<T: Scalar> Stage1Model<T> {
    pub fn build(config: &RunConfig, image_spatial: &[usize]) -> Result<Self, TrainError> {
        config.net.check_spatial(image_spatial).map_err(TrainError::Net)?;
        let mut rng = substream(config.seed, "init.stage1", 0);
        let mut gen_params = ParamSet::new();
        let variant = config.variant;
        let enc_in = config.net.image_channels * if variant.uses_template() { 2 } else { 1 };
        let encoder = Encoder::new(&mut gen_params, &mut rng, &config.net, enc_in);
        let dec_in = config.net.latent_channels
            + if variant.conditional_autoencoder() { crate::nets::COND_DIM } else { 0 };
        let head =
            if variant.uses_template() { DecoderHead::Displacement } else { DecoderHead::Image };
        let decoder = Decoder::new(&mut gen_params, &mut rng, &config.net, "dec", dec_in, head);
        let template = variant
            .uses_template()
            .then(|| {
                TemplateDecoder::new(
                    &mut gen_params,
                    &mut rng,
                    &config.net,
                    image_spatial,
                    variant.conditional_autoencoder(),
                )
            })
            .transpose()
            .map_err(TrainError::Net)?;
        let mut disc_params = ParamSet::new();
        let mut disc_rng = substream(config.seed, "init.disc", 0);
        let discriminator = PatchDiscriminator::new(&mut disc_params, &mut disc_rng, &config.net);
        Ok(Self { gen_params, disc_params, encoder, decoder, template, discriminator, variant })
    }
}

/// Classify each voxel to the region whose nominal intensity is nearest
/// (ties resolve to the lowest region index). Used to segment learned
/// templates and direct-decoder samples in place of a segmentation tool.
pub fn segment_by_intensity<T: Scalar>(vol: &Volume<T>, intensities: &[f64]) -> LabelMap {
    assert!(!intensities.is_empty());
    let vox: usize = vol.spatial().iter().product();
    let mut labels = vec![0u8; vox];
    for (i, l) in labels.iter_mut().enumerate() {
        let v = vol.tensor().data()[i].as_f64();
        let mut best = 0usize;
        let mut best_d = (v - intensities[0]).abs();
        for (r, &intensity) in intensities.iter().enumerate().skip(1) {
            let d = (v - intensity).abs();
            if d < best_d {
                best_d = d;
                best = r;
            }
        }
        *l = best as u8;
    }
    LabelMap::new(
        labels,
        vol.spatial(),
        crate::phantoms::REGION_NAMES.iter().map(|s| s.to_string()).collect(),
    )
    .expect("segmentation labels valid")
}
