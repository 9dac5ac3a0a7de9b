//! Attribute predictor: one CNN trunk, scalar age and sex heads, and a pooled
//! feature vector reused by the feature-distance metric.

use rand_chacha::ChaCha8Rng;

use super::blocks::{ConvLayer, Init, LinearLayer, NormLayer};
use super::{NetConfig, ParamSet, RegisteredParams};
use crate::fields::Volume;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::Scalar;

struct PredictorBlock {
    conv: ConvLayer,
    norm: NormLayer,
}

/// CNN with 4 downsampling levels and 2 (conv, norm, ReLU) blocks per level,
/// global average pooling, and a linear head to (age_norm, sex_logit).
pub struct AttributePredictor {
    levels: Vec<(PredictorBlock, PredictorBlock)>,
    head: LinearLayer,
    pub feature_dim: usize,
}

impl AttributePredictor {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, rng: &mut ChaCha8Rng, cfg: &NetConfig) -> Self {
        let rank = cfg.spatial_rank;
        let widths = &cfg.predictor_widths;
        let mut levels = Vec::new();
        let mut cin = cfg.image_channels;
        for (l, &w) in widths.iter().enumerate() {
            let b1 = PredictorBlock {
                conv: ConvLayer::new(ps, rng, &format!("pred.l{l}.c1"), cin, w, 3, rank, 2, Init::He),
                norm: NormLayer::new(ps, &format!("pred.l{l}.n1"), w),
            };
            let b2 = PredictorBlock {
                conv: ConvLayer::new(ps, rng, &format!("pred.l{l}.c2"), w, w, 3, rank, 1, Init::He),
                norm: NormLayer::new(ps, &format!("pred.l{l}.n2"), w),
            };
            levels.push((b1, b2));
            cin = w;
        }
        let head = LinearLayer::new(ps, rng, "pred.head", cin, 2, Init::He);
        Self { levels, head, feature_dim: cin }
    }

    /// Tape forward: returns `([B, 2] heads, [B, feature_dim] pooled features)`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        reg: &RegisteredParams,
        x: Var,
    ) -> (Var, Var) {
        let mut h = x;
        for (b1, b2) in &self.levels {
            h = b1.conv.forward(tape, reg, h);
            h = b1.norm.forward(tape, reg, h);
            h = tape.relu(h);
            h = b2.conv.forward(tape, reg, h);
            h = b2.norm.forward(tape, reg, h);
            h = tape.relu(h);
        }
        let feats = tape.global_mean_spatial(h);
        let out = self.head.forward(tape, reg, feats);
        (out, feats)
    }

    /// Batched inference on volumes: per sample (age_years, sex_logit, features).
    pub fn predict_batch<T: Scalar>(
        &self,
        ps: &ParamSet<T>,
        images: &[&Volume<T>],
    ) -> Vec<PredictorOutput> {
        assert!(!images.is_empty());
        let mut tape = Tape::new();
        let reg = ps.register(&mut tape);
        let per_shape = images[0].tensor().shape().to_vec();
        let mut shape = vec![images.len()];
        shape.extend_from_slice(&per_shape);
        let mut data = Vec::with_capacity(images.len() * images[0].tensor().numel());
        for img in images {
            assert_eq!(img.tensor().shape(), per_shape.as_slice(), "cohort shape mismatch");
            data.extend_from_slice(img.tensor().data());
        }
        let xv = tape.constant(Tensor::new(&shape, data));
        let (out, feats) = self.forward(&mut tape, &reg, xv);
        let out_t = tape.val(out);
        let feats_t = tape.val(feats);
        (0..images.len())
            .map(|i| PredictorOutput {
                age_years: out_t.data()[i * 2].as_f64() * 100.0,
                sex_logit: out_t.data()[i * 2 + 1].as_f64(),
                features: feats_t.data()[i * self.feature_dim..(i + 1) * self.feature_dim]
                    .iter()
                    .map(|v| v.as_f64())
                    .collect(),
            })
            .collect()
    }
}

/// One prediction: age estimate in years, sex logit, pooled features.
#[derive(Clone, Debug)]
pub struct PredictorOutput {
    pub age_years: f64,
    pub sex_logit: f64,
    pub features: Vec<f64>,
}
