//! Stage-1 training: the registration autoencoder (or the plain
//! reconstruction autoencoder for the baseline variants).

use std::fs;
use std::io::Write as IoWrite;
use std::path::Path;

use crate::losses::Stage1Components;
use crate::nets::{Condition, RegisteredParams};
use crate::phantoms::{read_dataset, AgeBinnedSampler, Dataset};
use crate::rng::{fill_standard_normal, substream};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::checkpoint::{
    load_params, read_meta, store_params, write_meta, CheckpointError, CheckpointMeta, TensorStore,
};
use super::optim::Adam;
use super::{RunConfig, Stage1Model, TrainError};

/// Outputs of one stage-1 forward pass on a batch.
struct ForwardOut {
    tape: Tape<f32>,
    reg: RegisteredParams,
    x: Var,
    reconstruction: Var,
    mu: Var,
    logvar: Var,
    field: Option<Var>,
}

/// Run the variant's forward graph on one batch. `noise` enables the
/// stochastic latent; `None` decodes the posterior mean (evaluation mode).
fn forward_batch(
    model: &Stage1Model<f32>,
    x_t: &Tensor<f32>,
    conds: &[Condition],
    noise: Option<&Tensor<f32>>,
) -> ForwardOut {
    let batch = x_t.shape()[0];
    let mut tape = Tape::new();
    let reg = model.gen_params.register(&mut tape);
    let x = tape.constant(x_t.clone());
    let template = model.template.as_ref().map(|tpl| {
        let rows = tpl
            .conditional
            .then(|| tape.constant(Condition::to_rows::<f32>(conds)));
        tpl.forward(&mut tape, &reg, rows, batch)
    });
    let enc_in = match template {
        Some(tpl) => tape.concat_dim1(x, tpl),
        None => x,
    };
    let (mu, logvar) = model.encoder.forward(&mut tape, &reg, enc_in);
    let z = match noise {
        Some(n) => {
            let half_lv = tape.scale(logvar, 0.5);
            let sd = tape.exp(half_lv);
            let nv = tape.constant(n.clone());
            let scaled = tape.mul(sd, nv);
            tape.add(mu, scaled)
        }
        None => mu,
    };
    let dec_in = if model.variant.conditional_autoencoder() {
        let latent_spatial = tape.val(mu).shape()[2..].to_vec();
        let ch = tape.constant(Condition::to_channels::<f32>(conds, &latent_spatial));
        tape.concat_dim1(z, ch)
    } else {
        z
    };
    let dec_out = model.decoder.forward(&mut tape, &reg, dec_in);
    let (reconstruction, field) = match template {
        Some(tpl) => (tape.warp(tpl, dec_out), Some(dec_out)),
        None => (dec_out, None),
    };
    ForwardOut { tape, reg, x, reconstruction, mu, logvar, field }
}

fn batch_tensor(ds: &Dataset<f32>, idxs: &[usize]) -> (Tensor<f32>, Vec<Condition>) {
    let per = ds.images[0].tensor().numel();
    let mut shape = vec![idxs.len()];
    shape.extend_from_slice(ds.images[0].tensor().shape());
    let mut data = Vec::with_capacity(idxs.len() * per);
    let mut conds = Vec::with_capacity(idxs.len());
    for &i in idxs {
        data.extend_from_slice(ds.images[i].tensor().data());
        conds.push(ds.conditions[i]);
    }
    (Tensor::new(&shape, data), conds)
}

/// Mean held-out L1 using the posterior mean (no sampling noise).
fn validation_l1(
    model: &Stage1Model<f32>,
    ds: &Dataset<f32>,
    val_idxs: &[usize],
) -> Result<f64, TrainError> {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for chunk in val_idxs.chunks(16) {
        let (x_t, conds) = batch_tensor(ds, chunk);
        let mut out = forward_batch(model, &x_t, &conds, None);
        let l1 = out.tape.l1_loss(out.reconstruction, out.x);
        total += out.tape.val(l1).item() as f64 * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(total / count.max(1) as f64)
}

/// Trained stage-1 state plus its metadata.
pub struct Stage1Checkpoint {
    pub model: Stage1Model<f32>,
    pub meta: CheckpointMeta,
}

impl Stage1Checkpoint {
    /// Load a checkpoint directory, rebuilding the networks from the stored
    /// run config and filling their parameters.
    pub fn load(dir: &Path) -> Result<Self, TrainError> {
        let meta = read_meta(dir)?;
        if meta.kind != "stage1" {
            return Err(TrainError::Checkpoint(CheckpointError::ConfigMismatch(format!(
                "expected stage1 checkpoint, found {}",
                meta.kind
            ))));
        }
        let config = meta
            .run_config
            .clone()
            .ok_or_else(|| TrainError::InvalidConfig("checkpoint missing run config".into()))?;
        let spatial = Self::spatial_from_meta(&meta)?;
        let mut model = Stage1Model::build(&config, &spatial)?;
        let store = TensorStore::read(&dir.join("params.bin"))?;
        load_params(&store, &mut model.gen_params)?;
        load_params(&store, &mut model.disc_params)?;
        Ok(Self { model, meta })
    }

    /// Spatial dims recorded in checkpoint metadata.
    pub fn spatial_from_meta(meta: &CheckpointMeta) -> Result<Vec<usize>, TrainError> {
        let rank = *meta
            .extra
            .get("spatial_rank")
            .ok_or_else(|| TrainError::InvalidConfig("checkpoint missing spatial dims".into()))?
            as usize;
        (0..rank)
            .map(|d| {
                meta.extra.get(&format!("spatial_{d}")).map(|&v| v as usize).ok_or_else(|| {
                    TrainError::InvalidConfig("checkpoint missing spatial dims".into())
                })
            })
            .collect()
    }
}

fn spatial_into_extra(meta: &mut CheckpointMeta, spatial: &[usize]) {
    meta.extra.insert("spatial_rank".into(), spatial.len() as f64);
    for (d, &s) in spatial.iter().enumerate() {
        meta.extra.insert(format!("spatial_{d}"), s as f64);
    }
}

#[allow(clippy::too_many_arguments)]
fn save_checkpoint(
    dir: &Path,
    model: &Stage1Model<f32>,
    gen_opt: &Adam<f32>,
    disc_opt: &Adam<f32>,
    config: &RunConfig,
    step: usize,
    dataset_fp: &str,
    spatial: &[usize],
    val_l1: Option<f64>,
) -> Result<(), TrainError> {
    fs::create_dir_all(dir)?;
    let mut store = TensorStore::new();
    store_params(&mut store, &model.gen_params);
    store_params(&mut store, &model.disc_params);
    for (name, t) in gen_opt.state_tensors(&model.gen_params) {
        store.insert(&name, t);
    }
    for (name, t) in disc_opt.state_tensors(&model.disc_params) {
        store.insert(&name, t);
    }
    store.write(&dir.join("params.bin"))?;
    let mut meta = CheckpointMeta {
        version: super::checkpoint::CHECKPOINT_VERSION,
        kind: "stage1".into(),
        step,
        dataset_fingerprint: dataset_fp.to_string(),
        run_config: Some(config.clone()),
        predictor_config: None,
        scaler: None,
        extra: Default::default(),
    };
    spatial_into_extra(&mut meta, spatial);
    if let Some(v) = val_l1 {
        meta.extra.insert("val_l1".into(), v);
    }
    write_meta(dir, &meta)?;
    Ok(())
}

/// Train stage 1 per the config; writes checkpoints and `loss.csv` under
/// `out_dir/stage1/`. With `resume`, continues from the saved step with
/// identical results to an uninterrupted run.
pub fn train_stage1(config: &RunConfig, resume: bool) -> Result<Stage1Checkpoint, TrainError> {
    config.validate()?;
    let ds = read_dataset::<f32>(&config.dataset)?;
    if ds.is_empty() {
        return Err(TrainError::InvalidConfig("empty dataset".into()));
    }
    let spatial = ds.images[0].spatial().to_vec();
    let n_train = ((1.0 - config.stage1.val_fraction) * ds.len() as f64).round() as usize;
    let n_train = n_train.clamp(1, ds.len());
    let val_idxs: Vec<usize> = (n_train..ds.len()).take(config.stage1.val_max_samples).collect();
    let train_conds = &ds.conditions[..n_train];

    let mut model = Stage1Model::build(config, &spatial)?;
    // start templates near the data's mean intensity
    if let Some(tpl) = &model.template {
        let probe = n_train.min(64);
        let mut acc = 0.0f64;
        for img in &ds.images[..probe] {
            acc += img.tensor().mean() as f64;
        }
        tpl.init_head_bias(&mut model.gen_params, acc / probe as f64);
    }
    let mut gen_opt =
        Adam::new(&model.gen_params, config.stage1.optim.lr, config.stage1.optim.warmup_steps);
    let mut disc_opt =
        Adam::new(&model.disc_params, config.stage1.optim.lr, config.stage1.optim.warmup_steps);

    let dir = config.stage1_dir();
    let mut start_step = 0usize;
    if resume {
        let meta = read_meta(&dir)?;
        let stored = meta
            .run_config
            .as_ref()
            .ok_or_else(|| TrainError::InvalidConfig("resume checkpoint missing config".into()))?;
        if stored.compat_key() != config.compat_key() {
            return Err(TrainError::Checkpoint(CheckpointError::ConfigMismatch(format!(
                "resume config {} != {}",
                stored.compat_key(),
                config.compat_key()
            ))));
        }
        let store = TensorStore::read(&dir.join("params.bin"))?;
        load_params(&store, &mut model.gen_params)?;
        load_params(&store, &mut model.disc_params)?;
        gen_opt
            .load_state(&model.gen_params, |n| store.get(n), meta.step)
            .map_err(|e| TrainError::Checkpoint(CheckpointError::ConfigMismatch(e)))?;
        disc_opt
            .load_state(&model.disc_params, |n| store.get(n), meta.step)
            .map_err(|e| TrainError::Checkpoint(CheckpointError::ConfigMismatch(e)))?;
        start_step = meta.step;
    }

    fs::create_dir_all(&dir)?;
    let mut loss_file = fs::OpenOptions::new()
        .create(true)
        .append(resume)
        .write(true)
        .truncate(!resume)
        .open(dir.join("loss.csv"))?;
    if start_step == 0 {
        writeln!(loss_file, "step,total,similarity,adversarial,magnitude,smoothness,kl,val_l1")?;
    }

    let sampler = AgeBinnedSampler::new(train_conds, 10.0)?;
    for (lo, hi) in &sampler.empty_bins {
        eprintln!("warning: no training samples in age bin [{lo}, {hi})");
    }
    let batch_size = config.stage1.optim.batch_size;
    let weights = &config.stage1.weights;
    let adv = weights.adv_weight > 0.0;
    let mut last_val: Option<f64> = None;
    let mut stop = false;

    let mut step = start_step;
    while step < config.stage1.optim.steps && !stop {
        let idxs = sampler.draw_batch(&mut substream(config.seed, "stage1.batch", step as u64), batch_size);
        let (x_t, conds) = batch_tensor(&ds, &idxs);
        let mut noise = Tensor::zeros(&latent_noise_shape(&x_t, config));
        fill_standard_normal(
            &mut substream(config.seed, "stage1.noise", step as u64),
            noise.data_mut(),
        );
        let mut out = forward_batch(&model, &x_t, &conds, Some(&noise));
        let l1 = out.tape.l1_loss(out.reconstruction, out.x);
        let kl = out.tape.kl_loss(out.mu, out.logvar);
        let (mag, smooth) = match out.field {
            Some(u) => (
                Some(out.tape.disp_magnitude_loss(u)),
                Some(out.tape.disp_gradient_loss(u)),
            ),
            None => (None, None),
        };
        // adversarial generator term with the discriminator held fixed
        let disc_reg = adv.then(|| model.disc_params.register(&mut out.tape));
        let gen_adv = disc_reg.as_ref().map(|dreg| {
            let scores = model.discriminator.forward(&mut out.tape, dreg, out.reconstruction);
            out.tape.hinge_gen_loss(scores)
        });
        let mut terms: Vec<(Var, f32)> = vec![(l1, 1.0), (kl, weights.kl_weight as f32)];
        if let Some(m) = mag {
            terms.push((m, weights.alpha as f32));
        }
        if let Some(s) = smooth {
            terms.push((s, weights.beta as f32));
        }
        if let Some(a) = gen_adv {
            terms.push((a, weights.adv_weight as f32));
        }
        let total = out.tape.weighted_sum(&terms);
        let comps = Stage1Components {
            similarity: out.tape.val(l1).item() as f64,
            adversarial: gen_adv.map_or(0.0, |a| weights.adv_weight * out.tape.val(a).item() as f64),
            magnitude: mag.map_or(0.0, |m| weights.alpha * out.tape.val(m).item() as f64),
            smoothness: smooth.map_or(0.0, |s| weights.beta * out.tape.val(s).item() as f64),
            kl: weights.kl_weight * out.tape.val(kl).item() as f64,
        };
        let total_val = out.tape.val(total).item();
        if !total_val.is_finite() {
            let dump = format!("{comps:?}");
            writeln!(loss_file, "{step},NaN,,,,,,")?;
            return Err(TrainError::NanAbort { step, dump });
        }
        let grads = out.tape.backward(total);
        gen_opt.apply(&mut model.gen_params, &out.reg, &grads);

        if adv {
            let recon_val = out.tape.val(out.reconstruction).clone();
            let mut dtape = Tape::new();
            let dreg = model.disc_params.register(&mut dtape);
            let real_in = dtape.constant(x_t.clone());
            let fake_in = dtape.constant(recon_val);
            let real_scores = model.discriminator.forward(&mut dtape, &dreg, real_in);
            let fake_scores = model.discriminator.forward(&mut dtape, &dreg, fake_in);
            let dloss = dtape.hinge_disc_loss(real_scores, fake_scores);
            if !dtape.val(dloss).item().is_finite() {
                return Err(TrainError::NanAbort { step, dump: "discriminator loss".into() });
            }
            let dgrads = dtape.backward(dloss);
            disc_opt.apply(&mut model.disc_params, &dreg, &dgrads);
        }

        step += 1;
        let do_val = !val_idxs.is_empty()
            && (step % config.stage1.val_interval == 0 || step == config.stage1.optim.steps);
        let val_str = if do_val {
            let v = validation_l1(&model, &ds, &val_idxs)?;
            last_val = Some(v);
            if config.stage1.early_stop_l1 > 0.0 && v < config.stage1.early_stop_l1 {
                stop = true;
            }
            format!("{v:.6}")
        } else {
            String::new()
        };
        writeln!(
            loss_file,
            "{step},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6e},{val_str}",
            total_val, comps.similarity, comps.adversarial, comps.magnitude, comps.smoothness, comps.kl
        )?;
        if config.stage1.checkpoint_interval > 0 && step % config.stage1.checkpoint_interval == 0 {
            save_checkpoint(
                &dir,
                &model,
                &gen_opt,
                &disc_opt,
                config,
                step,
                &ds.manifest.fingerprint(),
                &spatial,
                last_val,
            )?;
        }
    }
    loss_file.flush()?;
    save_checkpoint(
        &dir,
        &model,
        &gen_opt,
        &disc_opt,
        config,
        step,
        &ds.manifest.fingerprint(),
        &spatial,
        last_val,
    )?;
    let meta = read_meta(&dir)?;
    Ok(Stage1Checkpoint { model, meta })
}

fn latent_noise_shape(x_t: &Tensor<f32>, config: &RunConfig) -> Vec<usize> {
    let f = config.net.downsample_factor();
    let mut shape = vec![x_t.shape()[0], config.net.latent_channels];
    shape.extend(x_t.shape()[2..].iter().map(|&s| s / f));
    shape
}

/// Evaluation-mode reconstruction of given samples (posterior mean).
pub fn reconstruct(
    model: &Stage1Model<f32>,
    ds: &Dataset<f32>,
    idxs: &[usize],
) -> Result<Vec<Tensor<f32>>, TrainError> {
    let mut out_all = Vec::with_capacity(idxs.len());
    for chunk in idxs.chunks(16) {
        let (x_t, conds) = batch_tensor(ds, chunk);
        let out = forward_batch(model, &x_t, &conds, None);
        let recon = out.tape.val(out.reconstruction);
        let per: usize = recon.shape()[1..].iter().product();
        for (i, _) in chunk.iter().enumerate() {
            let shape = recon.shape()[1..].to_vec();
            let data = recon.data()[i * per..(i + 1) * per].to_vec();
            out_all.push(Tensor::new(&shape, data));
        }
    }
    Ok(out_all)
}

/// Posterior means for the whole dataset, in dataset order (stage-2 input).
pub fn compute_latents(
    model: &Stage1Model<f32>,
    ds: &Dataset<f32>,
) -> Result<Vec<Tensor<f32>>, TrainError> {
    let mut out_all = Vec::with_capacity(ds.len());
    let idxs: Vec<usize> = (0..ds.len()).collect();
    for chunk in idxs.chunks(32) {
        let (x_t, conds) = batch_tensor(ds, chunk);
        let out = forward_batch(model, &x_t, &conds, None);
        let mu = out.tape.val(out.mu);
        let per: usize = mu.shape()[1..].iter().product();
        for (i, _) in chunk.iter().enumerate() {
            let shape = mu.shape()[1..].to_vec();
            out_all.push(Tensor::new(&shape, mu.data()[i * per..(i + 1) * per].to_vec()));
        }
    }
    Ok(out_all)
}

/// Templates for a batch of conditions (deterministic, evaluation path).
pub fn templates_for(
    model: &Stage1Model<f32>,
    conds: &[Condition],
) -> Result<Vec<crate::fields::Volume<f32>>, TrainError> {
    let tpl = model
        .template
        .as_ref()
        .ok_or_else(|| TrainError::InvalidConfig("variant has no template decoder".into()))?;
    let mut out = Vec::with_capacity(conds.len());
    if !tpl.conditional {
        let t = tpl.template(&model.gen_params, None)?;
        out.resize(conds.len(), t);
        return Ok(out);
    }
    for chunk in conds.chunks(32) {
        let mut tape = Tape::new();
        let reg = model.gen_params.register(&mut tape);
        let rows = tape.constant(Condition::to_rows::<f32>(chunk));
        let tv = tpl.forward(&mut tape, &reg, Some(rows), chunk.len());
        let t = tape.val(tv);
        let per: usize = t.shape()[1..].iter().product();
        for i in 0..chunk.len() {
            let shape = t.shape()[1..].to_vec();
            let vol = crate::fields::Volume::new(Tensor::new(
                &shape,
                t.data()[i * per..(i + 1) * per].to_vec(),
            ))
            .map_err(TrainError::Field)?;
            out.push(vol);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantoms::{write_dataset, PhantomSpec};
    use crate::pipelines::Variant;

    fn tiny_spec() -> PhantomSpec {
        PhantomSpec {
            image_size: vec![24, 24],
            base_ventricle_radius: 1.0,
            ventricle_growth_rate: 0.02,
            cortex_thickness_by_sex: [1.2, 1.9],
            warp_amplitude: 0.8,
            warp_smoothness: 8.0,
            ..Default::default()
        }
    }

    fn tiny_config(dir: &std::path::Path, variant: Variant, steps: usize) -> RunConfig {
        let mut cfg = RunConfig::new(
            variant,
            dir.join("data"),
            dir.join(format!("run_{}", variant.name())),
            11,
        );
        cfg.net.base_width = 8;
        cfg.net.unet_channels = vec![16, 24, 24];
        cfg.net.time_embed_dim = 32;
        cfg.net.condition_embed_dim = 16;
        cfg.stage1.optim.steps = steps;
        cfg.stage1.optim.batch_size = 4;
        cfg.stage1.optim.warmup_steps = 10;
        cfg.stage1.optim.lr = 3e-4;
        cfg.stage1.val_interval = steps;
        cfg.stage2.optim.steps = 30;
        cfg.stage2.timesteps = 20;
        cfg
    }

    fn setup(dir: &std::path::Path) {
        let _ = fs::remove_dir_all(dir);
        fs::create_dir_all(dir).unwrap();
        write_dataset(&tiny_spec(), 24, (5.0, 100.0), 0.5, 3, &dir.join("data")).unwrap();
    }

    #[test]
    fn smoke_training_reduces_loss_morphldm_c() {
        let dir = std::env::temp_dir().join("morphldm_stage1_smoke");
        setup(&dir);
        let cfg = tiny_config(&dir, Variant::MorphldmC, 40);
        let ckpt = train_stage1(&cfg, false).unwrap();
        assert_eq!(ckpt.meta.step, 40);
        let csv = fs::read_to_string(cfg.stage1_dir().join("loss.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        let first_total: f64 = lines[1].split(',').nth(1).unwrap().parse().unwrap();
        let last_total: f64 = lines.last().unwrap().split(',').nth(1).unwrap().parse().unwrap();
        assert!(
            last_total < first_total,
            "loss did not decrease: {first_total} -> {last_total}"
        );
        // trained conditional templates respond to age
        let young = templates_for(&ckpt.model, &[Condition::new(10.0, crate::nets::Sex::Female).unwrap()])
            .unwrap()
            .remove(0);
        let old = templates_for(&ckpt.model, &[Condition::new(90.0, crate::nets::Sex::Female).unwrap()])
            .unwrap()
            .remove(0);
        let diff: f32 = young
            .tensor()
            .data()
            .iter()
            .zip(old.tensor().data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f32>()
            / young.tensor().numel() as f32;
        assert!(diff > 0.0, "conditional templates identical across ages");
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn three_d_variant_trains_end_to_end() {
        // rank-3 generality: a couple of steps at 16^3 exercise conv3d,
        // warp3d and the full stage-1 graph
        let dir = std::env::temp_dir().join("morphldm_stage1_3d");
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        let spec = PhantomSpec {
            image_size: vec![16, 16, 16],
            base_ventricle_radius: 0.8,
            ventricle_growth_rate: 0.008,
            cortex_thickness_by_sex: [0.8, 1.2],
            warp_amplitude: 0.5,
            warp_smoothness: 8.0,
            ..Default::default()
        };
        write_dataset(&spec, 6, (5.0, 100.0), 0.5, 3, &dir.join("data")).unwrap();
        let mut cfg = tiny_config(&dir, Variant::MorphldmC, 2);
        cfg.net.spatial_rank = 3;
        cfg.net.base_width = 4;
        cfg.stage1.optim.batch_size = 2;
        cfg.stage1.val_interval = 2;
        cfg.stage1.val_max_samples = 1;
        let ckpt = train_stage1(&cfg, false).unwrap();
        assert_eq!(ckpt.meta.step, 2);
        let tpl = templates_for(&ckpt.model, &[Condition::new(40.0, crate::nets::Sex::Male).unwrap()])
            .unwrap()
            .remove(0);
        assert_eq!(tpl.spatial(), &[16, 16, 16]);
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn gradient_coverage_after_warmup_step() {
        // every generator parameter (and every discriminator parameter under
        // the adversarial objective) gets a nonzero gradient on a batch once
        // the zero-init heads have taken one step
        let dir = std::env::temp_dir().join("morphldm_stage1_cov");
        setup(&dir);
        let mut cfg = tiny_config(&dir, Variant::MorphldmC, 2);
        cfg.stage1.weights.adv_weight = 0.005;
        train_stage1(&cfg, false).unwrap();
        let ckpt = Stage1Checkpoint::load(&cfg.stage1_dir()).unwrap();
        let model = ckpt.model;
        let ds = read_dataset::<f32>(&cfg.dataset).unwrap();
        let idxs: Vec<usize> = (0..4).collect();
        let (x_t, conds) = batch_tensor(&ds, &idxs);
        let mut noise = Tensor::zeros(&latent_noise_shape(&x_t, &cfg));
        fill_standard_normal(&mut substream(9, "covnoise", 0), noise.data_mut());
        let mut out = forward_batch(&model, &x_t, &conds, Some(&noise));
        let l1 = out.tape.l1_loss(out.reconstruction, out.x);
        let kl = out.tape.kl_loss(out.mu, out.logvar);
        let u = out.field.unwrap();
        let mag = out.tape.disp_magnitude_loss(u);
        let smooth = out.tape.disp_gradient_loss(u);
        let dreg = model.disc_params.register(&mut out.tape);
        let scores = model.discriminator.forward(&mut out.tape, &dreg, out.reconstruction);
        let gen_adv = out.tape.hinge_gen_loss(scores);
        let total = out.tape.weighted_sum(&[
            (l1, 1.0),
            (kl, 1e-7),
            (mag, 5.0),
            (smooth, 1.0),
            (gen_adv, 0.005),
        ]);
        let grads = out.tape.backward(total);
        for (idx, (name, _)) in model.gen_params.iter().enumerate() {
            let g = grads
                .get(out.reg.vars()[idx])
                .unwrap_or_else(|| panic!("no grad slot for {name}"));
            assert!(
                g.data().iter().any(|&v| v != 0.0),
                "generator parameter {name} has all-zero gradient"
            );
        }
        // discriminator coverage via its own objective
        let recon_val = out.tape.val(out.reconstruction).clone();
        let mut dtape = Tape::new();
        let dreg = model.disc_params.register(&mut dtape);
        let real = dtape.constant(x_t);
        let fake = dtape.constant(recon_val);
        let rs = model.discriminator.forward(&mut dtape, &dreg, real);
        let fs_ = model.discriminator.forward(&mut dtape, &dreg, fake);
        let dloss = dtape.hinge_disc_loss(rs, fs_);
        let dgrads = dtape.backward(dloss);
        for (idx, (name, _)) in model.disc_params.iter().enumerate() {
            let g = dgrads
                .get(dreg.vars()[idx])
                .unwrap_or_else(|| panic!("no grad slot for {name}"));
            assert!(
                g.data().iter().any(|&v| v != 0.0),
                "discriminator parameter {name} has all-zero gradient"
            );
        }
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let dir = std::env::temp_dir().join("morphldm_stage1_resume");
        setup(&dir);
        // uninterrupted: 8 steps
        let cfg_full = tiny_config(&dir, Variant::Morphldm, 8);
        let full = train_stage1(&cfg_full, false).unwrap();
        // interrupted: 4 steps, then resume to 8
        let mut cfg_half = tiny_config(&dir, Variant::Morphldm, 4);
        cfg_half.out_dir = dir.join("run_resume");
        let _ = train_stage1(&cfg_half, false).unwrap();
        let mut cfg_resume = cfg_half.clone();
        cfg_resume.stage1.optim.steps = 8;
        let resumed = train_stage1(&cfg_resume, true).unwrap();
        for ((n1, t1), (n2, t2)) in
            full.model.gen_params.iter().zip(resumed.model.gen_params.iter())
        {
            assert_eq!(n1, n2);
            assert_eq!(t1, t2, "parameter {n1} differs after resume");
        }
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn ldm_variant_trains_without_template() {
        let dir = std::env::temp_dir().join("morphldm_stage1_ldm");
        setup(&dir);
        let cfg = tiny_config(&dir, Variant::Ldm, 6);
        let ckpt = train_stage1(&cfg, false).unwrap();
        assert!(ckpt.model.template.is_none());
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn checkpoint_reload_reproduces_validation() {
        let dir = std::env::temp_dir().join("morphldm_stage1_reload");
        setup(&dir);
        let cfg = tiny_config(&dir, Variant::MorphldmC, 5);
        let trained = train_stage1(&cfg, false).unwrap();
        let loaded = Stage1Checkpoint::load(&cfg.stage1_dir()).unwrap();
        let ds = read_dataset::<f32>(&cfg.dataset).unwrap();
        let idxs: Vec<usize> = (20..24).collect();
        let a = validation_l1(&trained.model, &ds, &idxs).unwrap();
        let b = validation_l1(&loaded.model, &ds, &idxs).unwrap();
        assert_eq!(a, b);
        let _ = fs::remove_dir_all(&dir);
    }
}
