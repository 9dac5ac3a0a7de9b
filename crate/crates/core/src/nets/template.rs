//! Learned template decoder: maps a condition vector (or a learnable vector
//! in the unconditional variant) to a full-resolution template in [0, 1].

use rand_chacha::ChaCha8Rng;

use super::blocks::{ConvLayer, Init, LinearLayer, NormLayer, ResBlock};
use super::{Condition, NetConfig, NetError, ParamId, ParamSet, RegisteredParams, COND_DIM};
use crate::fields::Volume;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::Scalar;

pub struct TemplateDecoder {
    /// Learnable input vector for the unconditional variant.
    learned_input: Option<ParamId>,
    fc: LinearLayer,
    base_spatial: Vec<usize>,
    base_channels: usize,
    bottom: ResBlock,
    stages: Vec<(ConvLayer, Option<ResBlock>)>,
    head_norm: NormLayer,
    head: ConvLayer,
    head_bias: ParamId,
    pub conditional: bool,
    out_channels: usize,
}

impl TemplateDecoder {
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        cfg: &NetConfig,
        image_spatial: &[usize],
        conditional: bool,
    ) -> Result<Self, NetError> {
        cfg.check_spatial(image_spatial)?;
        let widths = cfg.widths();
        let rank = cfg.spatial_rank;
        let levels = cfg.encoder_levels;
        let last = *widths.last().unwrap();
        let f = cfg.downsample_factor();
        let base_spatial: Vec<usize> = image_spatial.iter().map(|&s| s / f).collect();
        let base_vox: usize = base_spatial.iter().product();

        let learned_input = (!conditional).then(|| {
            let mut init = Tensor::zeros(&[1, COND_DIM]);
            crate::rng::fill_standard_normal(rng, init.data_mut());
            ps.add("tpl.input", init)
        });
        let fc = LinearLayer::new(ps, rng, "tpl.fc", COND_DIM, last * base_vox, Init::He);
        let bottom = ResBlock::new(ps, rng, "tpl.bottom", last, last, rank, None);
        let mut stages = Vec::new();
        for step in 0..levels {
            let cin = widths[levels - 1 - step.min(levels - 1)];
            let cout = if step + 1 < levels { widths[levels - 2 - step] } else { widths[0] };
            let conv = ConvLayer::new(ps, rng, &format!("tpl.up{step}"), cin, cout, 3, rank, 1, Init::He);
            let res = (step + 1 < levels)
                .then(|| ResBlock::new(ps, rng, &format!("tpl.upres{step}"), cout, cout, rank, None));
            stages.push((conv, res));
        }
        let head_norm = NormLayer::new(ps, "tpl.head_norm", widths[0]);
        let head = ConvLayer::new(ps, rng, "tpl.head", widths[0], cfg.image_channels, 3, rank, 1, Init::He);
        let head_bias = head.b;
        Ok(Self {
            learned_input,
            fc,
            base_spatial,
            base_channels: last,
            bottom,
            stages,
            head_norm,
            head,
            head_bias,
            conditional,
            out_channels: cfg.image_channels,
        })
    }

    /// Initialize the sigmoid head bias at the logit of the dataset mean
    /// intensity so early templates sit near the data.
    pub fn init_head_bias<T: Scalar>(&self, ps: &mut ParamSet<T>, mean_intensity: f64) {
        let m = mean_intensity.clamp(1e-4, 1.0 - 1e-4);
        let logit = (m / (1.0 - m)).ln();
        for v in ps.get_mut(self.head_bias).data_mut() {
            *v = T::of_f64(logit);
        }
    }

    /// Tape forward. For the conditional variant pass `[B, 2]` condition rows;
    /// the unconditional variant decodes its learned vector once and repeats
    /// it across the batch.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        reg: &RegisteredParams,
        cond_rows: Option<Var>,
        batch: usize,
    ) -> Var {
        let (input, decoded_batch) = if self.conditional {
            let rows = cond_rows.expect("conditional template decoder requires conditions");
            assert_eq!(tape.val(rows).shape(), &[batch, COND_DIM]);
            (rows, batch)
        } else {
            (tape.leaf(Tensor::zeros(&[1, COND_DIM])), 1)
        };
        // unconditional: ignore the input var entirely; use the learned vector
        let input = match self.learned_input {
            Some(id) => reg.var(id),
            None => input,
        };
        let h = self.fc.forward(tape, reg, input);
        let mut shape = vec![decoded_batch, self.base_channels];
        shape.extend_from_slice(&self.base_spatial);
        let mut h = tape.reshape(h, &shape);
        h = self.bottom.forward(tape, reg, h, None);
        for (conv, res) in &self.stages {
            h = tape.upsample_nearest2(h);
            h = conv.forward(tape, reg, h);
            if let Some(res) = res {
                h = res.forward(tape, reg, h, None);
            }
        }
        let h = self.head_norm.forward(tape, reg, h);
        let h = tape.silu(h);
        let h = self.head.forward(tape, reg, h);
        let out = tape.sigmoid(h);
        if decoded_batch == batch {
            out
        } else {
            tape.repeat_batch(out, batch)
        }
    }

    /// Deterministic single template; the unconditional variant ignores `cond`.
    pub fn template<T: Scalar>(
        &self,
        ps: &ParamSet<T>,
        cond: Option<&Condition>,
    ) -> Result<Volume<T>, NetError> {
        if self.conditional && cond.is_none() {
            return Err(NetError::InvalidCondition(
                "conditional template decoder requires a condition".into(),
            ));
        }
        let mut tape = Tape::new();
        let reg = ps.register(&mut tape);
        let rows = self
            .conditional
            .then(|| {
                let t = Condition::to_rows::<T>(&[*cond.unwrap()]);
                tape.constant(t)
            });
        let out = self.forward(&mut tape, &reg, rows, 1);
        let t = tape.val(out).clone();
        let shape: Vec<usize> = t.shape()[1..].to_vec();
        debug_assert_eq!(shape[0], self.out_channels);
        Ok(Volume::new(t.reshaped(&shape)).expect("template is a valid volume"))
    }
}
