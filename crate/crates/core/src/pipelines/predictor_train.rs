//! Attribute-predictor training on real phantoms: joint squared-error age
//! regression (normalized ages) and logistic sex classification.

use std::fs;
use std::io::Write as IoWrite;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::eval::{attribute_adherence, predict_cohort};
use crate::fields::Volume;
use crate::nets::{AttributePredictor, NetConfig, ParamSet};
use crate::phantoms::{read_dataset, AgeBinnedSampler, Dataset};
use crate::rng::substream;
use crate::tape::Tape;
use crate::tensor::Tensor;

use super::checkpoint::{
    load_params, read_meta, store_params, write_meta, CheckpointError, CheckpointMeta, TensorStore,
};
use super::optim::Adam;
use super::TrainError;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PredictorTrainConfig {
    pub net: NetConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for PredictorTrainConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::default(),
            steps: 2_000,
            batch_size: 16,
            lr: 3e-4,
            warmup_steps: 100,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

pub struct PredictorCheckpoint {
    pub predictor: AttributePredictor,
    pub params: ParamSet<f32>,
    pub meta: CheckpointMeta,
}

impl PredictorCheckpoint {
    pub fn load(dir: &Path) -> Result<Self, TrainError> {
        let meta = read_meta(dir)?;
        if meta.kind != "predictor" {
            return Err(TrainError::Checkpoint(CheckpointError::ConfigMismatch(format!(
                "expected predictor checkpoint, found {}",
                meta.kind
            ))));
        }
        let cfg = meta
            .predictor_config
            .clone()
            .ok_or_else(|| TrainError::InvalidConfig("checkpoint missing predictor config".into()))?;
        let mut params = ParamSet::new();
        let mut rng = substream(cfg.seed, "init.predictor", 0);
        let predictor = AttributePredictor::new(&mut params, &mut rng, &cfg.net);
        let store = TensorStore::read(&dir.join("params.bin"))?;
        load_params(&store, &mut params)?;
        Ok(Self { predictor, params, meta })
    }
}

/// Train the predictor on a real dataset and persist the checkpoint at `out`.
pub fn train_predictor(
    data: &Path,
    out: &Path,
    cfg: &PredictorTrainConfig,
) -> Result<PredictorCheckpoint, TrainError> {
    cfg.net.validate()?;
    if cfg.steps == 0 || cfg.batch_size == 0 {
        return Err(TrainError::InvalidConfig("steps/batch must be > 0".into()));
    }
    let ds = read_dataset::<f32>(data)?;
    if ds.is_empty() {
        return Err(TrainError::InvalidConfig("empty dataset".into()));
    }
    let n_train = (((1.0 - cfg.val_fraction) * ds.len() as f64).round() as usize).clamp(1, ds.len());
    let val_idxs: Vec<usize> = (n_train..ds.len()).collect();

    let mut params = ParamSet::new();
    let mut rng = substream(cfg.seed, "init.predictor", 0);
    let predictor = AttributePredictor::new(&mut params, &mut rng, &cfg.net);
    let mut opt = Adam::new(&params, cfg.lr, cfg.warmup_steps);

    fs::create_dir_all(out)?;
    let mut loss_file = fs::File::create(out.join("loss.csv"))?;
    writeln!(loss_file, "step,total,age_mse,sex_bce")?;

    let sampler = AgeBinnedSampler::new(&ds.conditions[..n_train], 10.0)?;
    for step in 0..cfg.steps {
        let idxs =
            sampler.draw_batch(&mut substream(cfg.seed, "predictor.batch", step as u64), cfg.batch_size);
        let (x_t, age_t, sex_t) = batch_with_targets(&ds, &idxs);
        let mut tape = Tape::new();
        let reg = params.register(&mut tape);
        let xv = tape.constant(x_t);
        let (heads, _) = predictor.forward(&mut tape, &reg, xv);
        let age_pred = tape.slice_dim1(heads, 0, 1);
        let sex_logit = tape.slice_dim1(heads, 1, 2);
        let age_target = tape.constant(age_t);
        let sex_target = tape.constant(sex_t);
        let age_mse = tape.mse_loss(age_pred, age_target);
        let sex_bce = tape.bce_with_logits_loss(sex_logit, sex_target);
        let total = tape.weighted_sum(&[(age_mse, 1.0), (sex_bce, 1.0)]);
        let total_val = tape.val(total).item();
        if !total_val.is_finite() {
            writeln!(loss_file, "{},NaN,,", step + 1)?;
            return Err(TrainError::NanAbort {
                step,
                dump: format!(
                    "age_mse {}, sex_bce {}",
                    tape.val(age_mse).item(),
                    tape.val(sex_bce).item()
                ),
            });
        }
        let grads = tape.backward(total);
        opt.apply(&mut params, &reg, &grads);
        writeln!(
            loss_file,
            "{},{:.6},{:.6},{:.6}",
            step + 1,
            total_val,
            tape.val(age_mse).item(),
            tape.val(sex_bce).item()
        )?;
    }
    loss_file.flush()?;

    // held-out metrics
    let mut extra = std::collections::BTreeMap::new();
    if !val_idxs.is_empty() {
        let imgs: Vec<&Volume<f32>> = val_idxs.iter().map(|&i| &ds.images[i]).collect();
        let conds: Vec<_> = val_idxs.iter().map(|&i| ds.conditions[i]).collect();
        let preds = predict_cohort(&predictor, &params, &imgs);
        if let Ok((mae, acc)) = attribute_adherence(&preds, &conds) {
            extra.insert("val_age_mae".into(), mae);
            extra.insert("val_sex_acc".into(), acc);
        }
    }

    let mut store = TensorStore::new();
    store_params(&mut store, &params);
    for (name, t) in opt.state_tensors(&params) {
        store.insert(&name, t);
    }
    store.write(&out.join("params.bin"))?;
    let meta = CheckpointMeta {
        version: super::checkpoint::CHECKPOINT_VERSION,
        kind: "predictor".into(),
        step: cfg.steps,
        dataset_fingerprint: ds.manifest.fingerprint(),
        run_config: None,
        predictor_config: Some(cfg.clone()),
        scaler: None,
        extra,
    };
    write_meta(out, &meta)?;
    Ok(PredictorCheckpoint { predictor, params, meta })
}

fn batch_with_targets(
    ds: &Dataset<f32>,
    idxs: &[usize],
) -> (Tensor<f32>, Tensor<f32>, Tensor<f32>) {
    let per = ds.images[0].tensor().numel();
    let mut shape = vec![idxs.len()];
    shape.extend_from_slice(ds.images[0].tensor().shape());
    let mut data = Vec::with_capacity(idxs.len() * per);
    let mut ages = Vec::with_capacity(idxs.len());
    let mut sexes = Vec::with_capacity(idxs.len());
    for &i in idxs {
        data.extend_from_slice(ds.images[i].tensor().data());
        ages.push(ds.conditions[i].age_norm() as f32);
        sexes.push(ds.conditions[i].sex_value() as f32);
    }
    (
        Tensor::new(&shape, data),
        Tensor::new(&[idxs.len(), 1], ages),
        Tensor::new(&[idxs.len(), 1], sexes),
    )
}
