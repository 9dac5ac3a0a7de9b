//! Time-conditioned UNet over latent grids with cross-attention conditioning
//! on the deepest levels.

use rand_chacha::ChaCha8Rng;

use super::blocks::{ConvLayer, CrossAttention, Init, LinearLayer, NormLayer, ResBlock};
use super::{Condition, NetConfig, NetError, ParamSet, RegisteredParams};
use crate::diffusion::DiffusionSchedule;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::Scalar;

/// Sinusoidal embedding of integer timesteps: `[B, dim]`.
pub fn timestep_embedding<T: Scalar>(ts: &[usize], dim: usize) -> Tensor<T> {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even");
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let freq = (-(10000.0f64.ln()) * i as f64 / (half - 1).max(1) as f64).exp();
            data.push(T::of_f64((t as f64 * freq).sin()));
        }
        for i in 0..half {
            let freq = (-(10000.0f64.ln()) * i as f64 / (half - 1).max(1) as f64).exp();
            data.push(T::of_f64((t as f64 * freq).cos()));
        }
    }
    Tensor::new(&[ts.len(), dim], data)
}

struct DownLevel {
    res: ResBlock,
    attn: Option<CrossAttention>,
    down: Option<ConvLayer>,
}

struct UpLevel {
    res: ResBlock,
    attn: Option<CrossAttention>,
    up: Option<ConvLayer>,
}

/// Noise-prediction UNet. Conditioning enters twice: cross-attention context
/// tokens on the deepest levels, and (for the widened-input variants) constant
/// condition channels appended to the latent by the caller.
pub struct UNet {
    age_embed: LinearLayer,
    sex_embed: LinearLayer,
    temb_fc1: LinearLayer,
    temb_fc2: LinearLayer,
    conv_in: ConvLayer,
    down: Vec<DownLevel>,
    mid1: ResBlock,
    mid_attn: Option<CrossAttention>,
    mid2: ResBlock,
    up: Vec<UpLevel>,
    out_norm: NormLayer,
    out_conv: ConvLayer,
    pub in_channels: usize,
    pub out_channels: usize,
    time_dim: usize,
    embed_dim: usize,
}

impl UNet {
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        cfg: &NetConfig,
        in_channels: usize,
    ) -> Self {
        let rank = cfg.spatial_rank;
        let ch = &cfg.unet_channels;
        let levels = ch.len();
        let tdim = cfg.time_embed_dim;
        let edim = cfg.condition_embed_dim;
        let attn_from = levels - cfg.cross_attention_levels;

        let age_embed = LinearLayer::new(ps, rng, "unet.cond.age", 1, edim, Init::He);
        let sex_embed = LinearLayer::new(ps, rng, "unet.cond.sex", 1, edim, Init::He);
        let temb_fc1 = LinearLayer::new(ps, rng, "unet.temb1", tdim, tdim, Init::He);
        let temb_fc2 = LinearLayer::new(ps, rng, "unet.temb2", tdim, tdim, Init::He);
        let conv_in = ConvLayer::new(ps, rng, "unet.in", in_channels, ch[0], 3, rank, 1, Init::He);

        let mut down = Vec::new();
        for l in 0..levels {
            let cin = if l == 0 { ch[0] } else { ch[l - 1] };
            let res = ResBlock::new(ps, rng, &format!("unet.d{l}.res"), cin, ch[l], rank, Some(tdim));
            let attn = (l >= attn_from)
                .then(|| CrossAttention::new(ps, rng, &format!("unet.d{l}.attn"), ch[l], edim));
            let d = (l + 1 < levels).then(|| {
                ConvLayer::new(ps, rng, &format!("unet.d{l}.down"), ch[l], ch[l], 3, rank, 2, Init::He)
            });
            down.push(DownLevel { res, attn, down: d });
        }
        let top = ch[levels - 1];
        let mid1 = ResBlock::new(ps, rng, "unet.mid1", top, top, rank, Some(tdim));
        let mid_attn = (cfg.cross_attention_levels > 0)
            .then(|| CrossAttention::new(ps, rng, "unet.mid_attn", top, edim));
        let mid2 = ResBlock::new(ps, rng, "unet.mid2", top, top, rank, Some(tdim));

        let mut up = Vec::new();
        for l in (0..levels).rev() {
            let res = ResBlock::new(ps, rng, &format!("unet.u{l}.res"), 2 * ch[l], ch[l], rank, Some(tdim));
            let attn = (l >= attn_from)
                .then(|| CrossAttention::new(ps, rng, &format!("unet.u{l}.attn"), ch[l], edim));
            let u = (l > 0).then(|| {
                ConvLayer::new(ps, rng, &format!("unet.u{l}.up"), ch[l], ch[l - 1], 3, rank, 1, Init::He)
            });
            up.push(UpLevel { res, attn, up: u });
        }
        let out_norm = NormLayer::new(ps, "unet.out_norm", ch[0]);
        let out_conv =
            ConvLayer::new(ps, rng, "unet.out", ch[0], cfg.latent_channels, 3, rank, 1, Init::Zero);
        Self {
            age_embed,
            sex_embed,
            temb_fc1,
            temb_fc2,
            conv_in,
            down,
            mid1,
            mid_attn,
            mid2,
            up,
            out_norm,
            out_conv,
            in_channels,
            out_channels: cfg.latent_channels,
            time_dim: tdim,
            embed_dim: edim,
        }
    }

    /// Build `[B, 2, embed_dim]` context tokens from condition rows.
    pub fn embed_context<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        reg: &RegisteredParams,
        conds: &[Condition],
    ) -> Var {
        let batch = conds.len();
        let ages = Tensor::new(&[batch, 1], conds.iter().map(|c| T::of_f64(c.age_norm())).collect());
        let sexes =
            Tensor::new(&[batch, 1], conds.iter().map(|c| T::of_f64(c.sex_value())).collect());
        let av = tape.constant(ages);
        let sv = tape.constant(sexes);
        let a = self.age_embed.forward(tape, reg, av);
        let a = tape.silu(a);
        let a = tape.reshape(a, &[batch, 1, self.embed_dim]);
        let s = self.sex_embed.forward(tape, reg, sv);
        let s = tape.silu(s);
        let s = tape.reshape(s, &[batch, 1, self.embed_dim]);
        tape.concat_dim1(a, s)
    }

    /// Tape forward: shape-preserving except for the channel count, which goes
    /// from `in_channels` to `out_channels` (the latent width).
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        reg: &RegisteredParams,
        z_t: Var,
        ts: &[usize],
        conds: &[Condition],
    ) -> Var {
        let batch = tape.val(z_t).shape()[0];
        assert_eq!(batch, ts.len());
        assert_eq!(batch, conds.len());
        assert_eq!(tape.val(z_t).shape()[1], self.in_channels, "unet input channels");

        let temb_sin = tape.constant(timestep_embedding::<T>(ts, self.time_dim));
        let t1 = self.temb_fc1.forward(tape, reg, temb_sin);
        let t1 = tape.silu(t1);
        let temb = self.temb_fc2.forward(tape, reg, t1);
        let context = self.embed_context(tape, reg, conds);

        let mut h = self.conv_in.forward(tape, reg, z_t);
        let mut skips = Vec::new();
        for level in &self.down {
            h = level.res.forward(tape, reg, h, Some(temb));
            if let Some(attn) = &level.attn {
                h = attn.forward(tape, reg, h, context);
            }
            skips.push(h);
            if let Some(down) = &level.down {
                h = down.forward(tape, reg, h);
            }
        }
        h = self.mid1.forward(tape, reg, h, Some(temb));
        if let Some(attn) = &self.mid_attn {
            h = attn.forward(tape, reg, h, context);
        }
        h = self.mid2.forward(tape, reg, h, Some(temb));

        for level in &self.up {
            let skip = skips.pop().expect("skip per level");
            h = tape.concat_dim1(h, skip);
            h = level.res.forward(tape, reg, h, Some(temb));
            if let Some(attn) = &level.attn {
                h = attn.forward(tape, reg, h, context);
            }
            if let Some(upc) = &level.up {
                h = tape.upsample_nearest2(h);
                h = upc.forward(tape, reg, h);
            }
        }
        let h = self.out_norm.forward(tape, reg, h);
        let h = tape.silu(h);
        self.out_conv.forward(tape, reg, h)
    }

    /// Single-latent noise prediction. `z_t` is `[Z, s...]`; when the net was
    /// built with widened input, the condition channels are appended here.
    pub fn predict_eps<T: Scalar>(
        &self,
        ps: &ParamSet<T>,
        z_t: &Tensor<T>,
        t: usize,
        sched: &DiffusionSchedule,
        cond: &Condition,
    ) -> Result<Tensor<T>, NetError> {
        sched
            .check_t(t)
            .map_err(|e| NetError::InvalidCondition(e.to_string()))?;
        let mut tape = Tape::new();
        let reg = ps.register(&mut tape);
        let mut shape = vec![1];
        shape.extend_from_slice(z_t.shape());
        let zv = tape.constant(z_t.clone().reshaped(&shape));
        let z_ch = z_t.shape()[0];
        let input = if self.in_channels > z_ch {
            let chans = Condition::to_channels::<T>(&[*cond], &z_t.shape()[1..]);
            let cv = tape.constant(chans);
            tape.concat_dim1(zv, cv)
        } else {
            zv
        };
        let out = self.forward(&mut tape, &reg, input, &[t], &[*cond]);
        let t_out = tape.val(out).clone();
        let s = t_out.shape()[1..].to_vec();
        Ok(t_out.reshaped(&s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScheduleKind;
    use crate::nets::Sex;
    use crate::rng::substream;

    fn small_cfg() -> NetConfig {
        NetConfig {
            unet_channels: vec![16, 24, 24],
            time_embed_dim: 32,
            condition_embed_dim: 16,
            ..Default::default()
        }
    }

    #[test]
    fn output_shape_preserved() {
        let cfg = small_cfg();
        let mut ps = ParamSet::<f32>::new();
        let mut rng = substream(1, "unet.test", 0);
        let unet = UNet::new(&mut ps, &mut rng, &cfg, 8);
        let sched = DiffusionSchedule::new(50, ScheduleKind::Linear).unwrap();
        let z = Tensor::from_fn(&[8, 8, 8], |i| (i as f32 * 0.03).sin());
        let c = Condition::new(40.0, Sex::Male).unwrap();
        let eps = unet.predict_eps(&ps, &z, 7, &sched, &c).unwrap();
        assert_eq!(eps.shape(), &[8, 8, 8]);
    }

    #[test]
    fn widened_input_appends_condition_channels() {
        let cfg = small_cfg();
        let mut ps = ParamSet::<f32>::new();
        let mut rng = substream(2, "unet.test", 0);
        let unet = UNet::new(&mut ps, &mut rng, &cfg, 10);
        let sched = DiffusionSchedule::new(50, ScheduleKind::Linear).unwrap();
        let z = Tensor::zeros(&[8, 8, 8]);
        let c = Condition::new(25.0, Sex::Female).unwrap();
        let eps = unet.predict_eps(&ps, &z, 3, &sched, &c).unwrap();
        assert_eq!(eps.shape(), &[8, 8, 8]);
    }

    #[test]
    fn timestep_out_of_range_rejected() {
        let cfg = small_cfg();
        let mut ps = ParamSet::<f32>::new();
        let mut rng = substream(3, "unet.test", 0);
        let unet = UNet::new(&mut ps, &mut rng, &cfg, 8);
        let sched = DiffusionSchedule::new(50, ScheduleKind::Linear).unwrap();
        let z = Tensor::zeros(&[8, 8, 8]);
        let c = Condition::new(25.0, Sex::Female).unwrap();
        assert!(unet.predict_eps(&ps, &z, 50, &sched, &c).is_err());
    }

    #[test]
    fn conditioning_and_time_are_live() {
        // the output head and attention projections are zero-init, so nudge
        // them off zero to probe that conditioning and time reach the output
        let cfg = small_cfg();
        let mut ps = ParamSet::<f32>::new();
        let mut rng = substream(4, "unet.test", 0);
        let unet = UNet::new(&mut ps, &mut rng, &cfg, 8);
        for (name, t) in ps.iter_mut() {
            if name == "unet.out.w" || (name.contains("attn") && name.ends_with(".o.w")) {
                for v in t.data_mut() {
                    *v = 0.01;
                }
            }
        }
        let sched = DiffusionSchedule::new(50, ScheduleKind::Linear).unwrap();
        let z = Tensor::from_fn(&[8, 8, 8], |i| (i as f32 * 0.05).cos());
        let c1 = Condition::new(10.0, Sex::Female).unwrap();
        let c2 = Condition::new(90.0, Sex::Male).unwrap();
        let a = unet.predict_eps(&ps, &z, 5, &sched, &c1).unwrap();
        let b = unet.predict_eps(&ps, &z, 5, &sched, &c2).unwrap();
        let dc: f32 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
        assert!(dc > 0.0, "conditioning inert");
        let d = unet.predict_eps(&ps, &z, 40, &sched, &c1).unwrap();
        let dt: f32 = a.data().iter().zip(d.data()).map(|(x, y)| (x - y).abs()).sum();
        assert!(dt > 0.0, "time embedding inert");
    }

    #[test]
    fn sinusoidal_embedding_basics() {
        let e = timestep_embedding::<f64>(&[0, 5], 8);
        assert_eq!(e.shape(), &[2, 8]);
        // t = 0: sines are 0, cosines are 1
        for i in 0..4 {
            assert_eq!(e.data()[i], 0.0);
            assert_eq!(e.data()[4 + i], 1.0);
        }
        let row5 = &e.data()[8..16];
        assert!((row5[0] - (5.0f64).sin()).abs() < 1e-12);
    }
}
