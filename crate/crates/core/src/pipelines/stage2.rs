//! Stage-2 training: denoising diffusion over the frozen stage-1 latents.

use std::fs;
use std::io::Write as IoWrite;
use std::path::Path;

use crate::diffusion::{q_sample, DiffusionSchedule, LatentScaler};
use crate::nets::{Condition, ParamSet, UNet, COND_DIM};
use crate::phantoms::{read_dataset, AgeBinnedSampler};
use crate::rng::{fill_standard_normal, substream, uniform_usize};
use crate::tape::Tape;
use crate::tensor::Tensor;

use super::checkpoint::{
    load_params, read_meta, store_params, write_meta, CheckpointError, CheckpointMeta, TensorStore,
};
use super::optim::Adam;
use super::stage1::{compute_latents, Stage1Checkpoint};
use super::{RunConfig, TrainError};

/// Trained stage-2 state: the noise-prediction UNet with its latent scaler
/// and schedule.
pub struct Stage2Checkpoint {
    pub unet: UNet,
    pub params: ParamSet<f32>,
    pub scaler: LatentScaler,
    pub schedule: DiffusionSchedule,
    pub meta: CheckpointMeta,
}

impl Stage2Checkpoint {
    pub fn load(dir: &Path) -> Result<Self, TrainError> {
        let meta = read_meta(dir)?;
        if meta.kind != "stage2" {
            return Err(TrainError::Checkpoint(CheckpointError::ConfigMismatch(format!(
                "expected stage2 checkpoint, found {}",
                meta.kind
            ))));
        }
        let config = meta
            .run_config
            .clone()
            .ok_or_else(|| TrainError::InvalidConfig("checkpoint missing run config".into()))?;
        let scaler = meta
            .scaler
            .ok_or_else(|| TrainError::InvalidConfig("checkpoint missing latent scaler".into()))?;
        scaler.validate()?;
        let in_ch = config.net.latent_channels
            + if config.variant.conditional_autoencoder() { COND_DIM } else { 0 };
        let mut params = ParamSet::new();
        let mut rng = substream(config.seed, "init.stage2", 0);
        let unet = UNet::new(&mut params, &mut rng, &config.net, in_ch);
        let store = TensorStore::read(&dir.join("params.bin"))?;
        load_params(&store, &mut params)?;
        let schedule = DiffusionSchedule::new(config.stage2.timesteps, config.stage2.schedule)?;
        Ok(Self { unet, params, scaler, schedule, meta })
    }
}

/// Batch noise prediction; appends constant condition channels when the UNet
/// input is wider than the latent.
pub fn unet_eps_batch(
    unet: &UNet,
    params: &ParamSet<f32>,
    z_batch: &Tensor<f32>,
    ts: &[usize],
    conds: &[Condition],
) -> Tensor<f32> {
    let mut tape = Tape::new();
    let reg = params.register(&mut tape);
    let zv = tape.constant(z_batch.clone());
    let input = if unet.in_channels > z_batch.shape()[1] {
        let ch = tape.constant(Condition::to_channels::<f32>(conds, &z_batch.shape()[2..]));
        tape.concat_dim1(zv, ch)
    } else {
        zv
    };
    let out = unet.forward(&mut tape, &reg, input, ts, conds);
    tape.val(out).clone()
}

/// Train stage 2 on the latents of a stage-1 checkpoint; the stage-1
/// parameters are never touched. Writes `out_dir/stage2/`.
pub fn train_stage2(config: &RunConfig, stage1_dir: &Path) -> Result<Stage2Checkpoint, TrainError> {
    config.validate()?;
    let stage1 = Stage1Checkpoint::load(stage1_dir)?;
    let stored = stage1
        .meta
        .run_config
        .as_ref()
        .ok_or_else(|| TrainError::InvalidConfig("stage1 checkpoint missing config".into()))?;
    if stored.compat_key() != config.compat_key() {
        return Err(TrainError::Checkpoint(CheckpointError::ConfigMismatch(format!(
            "stage1 checkpoint {} incompatible with config {}",
            stored.compat_key(),
            config.compat_key()
        ))));
    }
    let ds = read_dataset::<f32>(&config.dataset)?;
    if ds.manifest.fingerprint() != stage1.meta.dataset_fingerprint {
        return Err(TrainError::Checkpoint(CheckpointError::ConfigMismatch(format!(
            "dataset fingerprint {} != stage-1 training fingerprint {}",
            ds.manifest.fingerprint(),
            stage1.meta.dataset_fingerprint
        ))));
    }

    let latents = compute_latents(&stage1.model, &ds)?;
    let unet_factor = 1usize << (config.net.unet_channels.len() - 1);
    if latents[0].shape()[1..].iter().any(|&s| s % unet_factor != 0 || s / unet_factor == 0) {
        return Err(TrainError::InvalidConfig(format!(
            "latent spatial {:?} not divisible by the UNet downsampling factor {unet_factor}",
            &latents[0].shape()[1..]
        )));
    }
    let calib = config.stage2.calibration_samples.min(latents.len()).max(1);
    let scaler = LatentScaler::calibrate(&latents[..calib])?;
    let scaled: Vec<Tensor<f32>> =
        latents.iter().map(|z| crate::diffusion::scale_latent(z, &scaler)).collect();
    let schedule = DiffusionSchedule::new(config.stage2.timesteps, config.stage2.schedule)?;

    let in_ch = config.net.latent_channels
        + if config.variant.conditional_autoencoder() { COND_DIM } else { 0 };
    let mut params = ParamSet::new();
    let mut init_rng = substream(config.seed, "init.stage2", 0);
    let unet = UNet::new(&mut params, &mut init_rng, &config.net, in_ch);
    let mut opt = Adam::new(&params, config.stage2.optim.lr, config.stage2.optim.warmup_steps);

    let dir = config.stage2_dir();
    fs::create_dir_all(&dir)?;
    let mut loss_file = fs::File::create(dir.join("loss.csv"))?;
    writeln!(loss_file, "step,denoising_loss")?;

    let sampler = AgeBinnedSampler::new(&ds.conditions, 10.0)?;
    let batch = config.stage2.optim.batch_size;
    let z_shape = scaled[0].shape().to_vec();
    let per: usize = z_shape.iter().product();
    let timesteps = schedule.timesteps();

    let mut last_loss = f64::NAN;
    for step in 0..config.stage2.optim.steps {
        let idxs = sampler.draw_batch(&mut substream(config.seed, "stage2.batch", step as u64), batch);
        let mut t_rng = substream(config.seed, "stage2.t", step as u64);
        let mut eps_rng = substream(config.seed, "stage2.eps", step as u64);
        let mut zt_shape = vec![batch];
        zt_shape.extend_from_slice(&z_shape);
        let mut zt_data = Vec::with_capacity(batch * per);
        let mut eps_data = Vec::with_capacity(batch * per);
        let mut ts = Vec::with_capacity(batch);
        let mut conds = Vec::with_capacity(batch);
        for &i in &idxs {
            let t = uniform_usize(&mut t_rng, timesteps);
            let mut eps = Tensor::<f32>::zeros(&z_shape);
            fill_standard_normal(&mut eps_rng, eps.data_mut());
            let z_t = q_sample(&scaled[i], t, &eps, &schedule)?;
            zt_data.extend_from_slice(z_t.data());
            eps_data.extend_from_slice(eps.data());
            ts.push(t);
            conds.push(ds.conditions[i]);
        }
        let z_t_batch = Tensor::new(&zt_shape, zt_data);
        let eps_batch = Tensor::new(&zt_shape, eps_data);

        let mut tape = Tape::new();
        let reg = params.register(&mut tape);
        let zv = tape.constant(z_t_batch);
        let input = if in_ch > z_shape[0] {
            let ch = tape.constant(Condition::to_channels::<f32>(&conds, &z_shape[1..]));
            tape.concat_dim1(zv, ch)
        } else {
            zv
        };
        let pred = unet.forward(&mut tape, &reg, input, &ts, &conds);
        let target = tape.constant(eps_batch);
        let loss = tape.mse_loss(pred, target);
        let loss_val = tape.val(loss).item();
        if !loss_val.is_finite() {
            writeln!(loss_file, "{},NaN", step + 1)?;
            return Err(TrainError::NanAbort {
                step,
                dump: format!("denoising loss {loss_val}"),
            });
        }
        let grads = tape.backward(loss);
        opt.apply(&mut params, &reg, &grads);
        last_loss = loss_val as f64;
        writeln!(loss_file, "{},{:.6}", step + 1, loss_val)?;
    }
    loss_file.flush()?;

    let mut store = TensorStore::new();
    store_params(&mut store, &params);
    for (name, t) in opt.state_tensors(&params) {
        store.insert(&name, t);
    }
    store.write(&dir.join("params.bin"))?;
    let mut meta = CheckpointMeta {
        version: super::checkpoint::CHECKPOINT_VERSION,
        kind: "stage2".into(),
        step: config.stage2.optim.steps,
        dataset_fingerprint: ds.manifest.fingerprint(),
        run_config: Some(config.clone()),
        predictor_config: None,
        scaler: Some(scaler),
        extra: Default::default(),
    };
    meta.extra.insert("last_loss".into(), last_loss);
    write_meta(&dir, &meta)?;
    Ok(Stage2Checkpoint { unet, params, scaler, schedule, meta })
}
