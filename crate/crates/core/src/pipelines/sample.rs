//! Sample generation: reverse diffusion in latent space, decoding to a
//! deformation field applied to the learned template (or directly to an
//! image for the baseline variants), plus synthetic label maps.

use std::path::Path;

use crate::diffusion::{posterior_coefficients, predict_z0, unscale_latent};
use crate::fields::{apply_deformation, warp_labels, DeformationField, Volume};
use crate::nets::Condition;
use crate::nets::Sex;
use crate::phantoms::{read_manifest, DataError, DatasetManifest, DatasetWriter};
use crate::rng::{fill_standard_normal, substream};
use crate::tape::Tape;
use crate::tensor::Tensor;

use super::checkpoint::CheckpointError;
use super::stage1::{templates_for, Stage1Checkpoint};
use super::stage2::{unet_eps_batch, Stage2Checkpoint};
use super::{segment_by_intensity, RunConfig, TrainError};

const SAMPLE_CHUNK: usize = 50;

/// Condition plan: `n` samples with ages linearly spaced over the range and
/// sexes split deterministically at the given male fraction (the 0.5 default
/// alternates female/male along the sweep, an exactly even split).
#[derive(Clone, Debug)]
pub struct SamplePlan {
    pub n: usize,
    pub age_lo: f64,
    pub age_hi: f64,
    pub sex_balance: f64,
    pub seed: u64,
}

impl SamplePlan {
    pub fn conditions(&self) -> Result<Vec<Condition>, TrainError> {
        if self.n == 0 {
            return Err(TrainError::InvalidConfig("plan needs n >= 1".into()));
        }
        if self.age_lo > self.age_hi {
            return Err(TrainError::InvalidConfig(format!(
                "age range {}..{} is inverted",
                self.age_lo, self.age_hi
            )));
        }
        if !(0.0..=1.0).contains(&self.sex_balance) {
            return Err(TrainError::InvalidConfig(format!(
                "sex balance {} outside [0, 1]",
                self.sex_balance
            )));
        }
        let mut acc = 0.0f64;
        (0..self.n)
            .map(|i| {
                let age = if self.n == 1 {
                    self.age_lo
                } else {
                    self.age_lo + (self.age_hi - self.age_lo) * i as f64 / (self.n - 1) as f64
                };
                acc += self.sex_balance;
                let sex = if acc >= 1.0 - 1e-12 {
                    acc -= 1.0;
                    Sex::Male
                } else {
                    Sex::Female
                };
                Condition::new(age, sex).map_err(|e| TrainError::InvalidConfig(e.to_string()))
            })
            .collect()
    }
}

/// One generated sample with everything needed downstream.
pub struct GeneratedSample {
    pub image: Volume<f32>,
    pub labels: crate::fields::LabelMap,
    pub field: Option<DeformationField<f32>>,
    pub condition: Condition,
}

/// Run the full generation pipeline for a condition plan.
pub fn generate_sample_set(
    config: &RunConfig,
    stage1: &Stage1Checkpoint,
    stage2: &Stage2Checkpoint,
    plan: &SamplePlan,
    region_intensities: &[f64],
) -> Result<Vec<GeneratedSample>, TrainError> {
    let conditions = plan.conditions()?;
    let z_shape: Vec<usize> = {
        // latent spatial from the stage-1 geometry
        let spatial = Stage1Checkpoint::spatial_from_meta(&stage1.meta)?;
        let f = config.net.downsample_factor();
        let mut s = vec![config.net.latent_channels];
        s.extend(spatial.iter().map(|&d| d / f));
        s
    };
    let per: usize = z_shape.iter().product();
    let timesteps = stage2.schedule.timesteps();
    let mut out = Vec::with_capacity(conditions.len());

    for (chunk_idx, chunk_conds) in conditions.chunks(SAMPLE_CHUNK).enumerate() {
        let base = chunk_idx * SAMPLE_CHUNK;
        let bc = chunk_conds.len();
        // init z_T per sample from its own substream
        let mut z_data = Vec::with_capacity(bc * per);
        for i in 0..bc {
            let mut z = vec![0.0f32; per];
            fill_standard_normal(
                &mut substream(plan.seed, "sample.init", (base + i) as u64),
                &mut z,
            );
            z_data.extend_from_slice(&z);
        }
        let mut zt_shape = vec![bc];
        zt_shape.extend_from_slice(&z_shape);
        let mut z_batch = Tensor::new(&zt_shape, z_data);

        for t in (0..timesteps).rev() {
            let ts = vec![t; bc];
            let eps = unet_eps_batch(&stage2.unet, &stage2.params, &z_batch, &ts, chunk_conds);
            let mut next = vec![0.0f32; bc * per];
            if t == 0 {
                for i in 0..bc {
                    let zt = Tensor::new(&z_shape, z_batch.data()[i * per..(i + 1) * per].to_vec());
                    let ei = Tensor::new(&z_shape, eps.data()[i * per..(i + 1) * per].to_vec());
                    let z0 = predict_z0(&zt, &ei, t, &stage2.schedule)?;
                    next[i * per..(i + 1) * per].copy_from_slice(z0.data());
                }
            } else {
                let (c0, ct, sigma) = posterior_coefficients(t, &stage2.schedule);
                let (c0f, ctf, sf) = (c0 as f32, ct as f32, sigma as f32);
                for i in 0..bc {
                    let zt = Tensor::new(&z_shape, z_batch.data()[i * per..(i + 1) * per].to_vec());
                    let ei = Tensor::new(&z_shape, eps.data()[i * per..(i + 1) * per].to_vec());
                    let z0 = predict_z0(&zt, &ei, t, &stage2.schedule)?;
                    let mut noise = vec![0.0f32; per];
                    fill_standard_normal(
                        &mut substream(
                            plan.seed,
                            "sample.noise",
                            ((base + i) * timesteps + t) as u64,
                        ),
                        &mut noise,
                    );
                    for j in 0..per {
                        next[i * per + j] =
                            c0f * z0.data()[j] + ctf * zt.data()[j] + sf * noise[j];
                    }
                }
            }
            z_batch = Tensor::new(&zt_shape, next);
        }

        // unscale and decode the chunk in one batch
        let mut dec_data = Vec::with_capacity(bc * per);
        for i in 0..bc {
            let z = Tensor::new(&z_shape, z_batch.data()[i * per..(i + 1) * per].to_vec());
            dec_data.extend_from_slice(unscale_latent(&z, &stage2.scaler).data());
        }
        let z_dec = Tensor::new(&zt_shape, dec_data);
        let mut tape = Tape::new();
        let reg = stage1.model.gen_params.register(&mut tape);
        let zv = tape.constant(z_dec);
        let dec_in = if config.variant.conditional_autoencoder() {
            let ch = tape.constant(Condition::to_channels::<f32>(chunk_conds, &z_shape[1..]));
            tape.concat_dim1(zv, ch)
        } else {
            zv
        };
        let decoded = stage1.model.decoder.forward(&mut tape, &reg, dec_in);
        let dec_t = tape.val(decoded).clone();
        let dper: usize = dec_t.shape()[1..].iter().product();

        if config.variant.uses_template() {
            let templates = templates_for(&stage1.model, chunk_conds)?;
            for (i, cond) in chunk_conds.iter().enumerate() {
                let fshape = dec_t.shape()[1..].to_vec();
                let field = DeformationField::new(Tensor::new(
                    &fshape,
                    dec_t.data()[i * dper..(i + 1) * dper].to_vec(),
                ))?;
                let image = apply_deformation(&templates[i], &field)?;
                let canonical = segment_by_intensity(&templates[i], region_intensities);
                let labels = warp_labels(&canonical, &field)?;
                out.push(GeneratedSample { image, labels, field: Some(field), condition: *cond });
            }
        } else {
            for (i, cond) in chunk_conds.iter().enumerate() {
                let ishape = dec_t.shape()[1..].to_vec();
                let image = Volume::new(Tensor::new(
                    &ishape,
                    dec_t.data()[i * dper..(i + 1) * dper].to_vec(),
                ))?;
                let labels = segment_by_intensity(&image, region_intensities);
                out.push(GeneratedSample { image, labels, field: None, condition: *cond });
            }
        }
    }
    Ok(out)
}

/// Generate `plan.n` samples from the checkpoints under `config.out_dir` and
/// persist them as a sample-set directory at `out`.
pub fn generate_samples(
    config: &RunConfig,
    plan: &SamplePlan,
    out: &Path,
) -> Result<DatasetManifest, TrainError> {
    config.validate()?;
    let stage1 = Stage1Checkpoint::load(&config.stage1_dir())?;
    let stage2 = Stage2Checkpoint::load(&config.stage2_dir())?;
    let s1key = stage1.meta.run_config.as_ref().map(|c| c.compat_key());
    let s2key = stage2.meta.run_config.as_ref().map(|c| c.compat_key());
    if s1key != s2key || s1key.as_deref() != Some(&config.compat_key() as &str) {
        return Err(TrainError::Checkpoint(CheckpointError::ConfigMismatch(format!(
            "checkpoint pair mismatch: {s1key:?} vs {s2key:?} vs config {}",
            config.compat_key()
        ))));
    }
    let region_intensities = match read_manifest(&config.dataset) {
        Ok(m) => m
            .spec
            .map(|s| s.region_intensities.to_vec())
            .unwrap_or_else(|| crate::phantoms::PhantomSpec::default().region_intensities.to_vec()),
        Err(DataError::Io(_)) => {
            crate::phantoms::PhantomSpec::default().region_intensities.to_vec()
        }
        Err(e) => return Err(TrainError::Data(e)),
    };
    let samples = generate_sample_set(config, &stage1, &stage2, plan, &region_intensities)?;

    let fingerprint = format!(
        "samples:{}:{:08x}:{}",
        config.variant.name(),
        crc32fast::hash(config.compat_key().as_bytes()),
        plan.seed
    );
    let mut writer =
        DatasetWriter::create(out, None, fingerprint, config.variant.uses_template())?;
    for (i, s) in samples.iter().enumerate() {
        writer.append(
            s.condition.age_years,
            s.condition.sex,
            i as u64,
            &s.image,
            &s.labels,
            s.field.as_ref(),
        )?;
    }
    Ok(writer.finish()?)
}
