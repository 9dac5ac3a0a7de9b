//! Image(+template) encoder producing a Gaussian latent.

use rand_chacha::ChaCha8Rng;

use super::blocks::{ConvLayer, Init, NormLayer, ResBlock};
use super::{Latent, NetConfig, NetError, ParamSet, RegisteredParams, LOGVAR_MAX, LOGVAR_MIN};
use crate::fields::Volume;
use crate::tape::{Tape, Var};
use crate::Scalar;

/// Convolutional encoder: `levels` stride-2 stages down to the latent grid,
/// ending in a `2 * latent_channels` head split into mu and logvar.
pub struct Encoder {
    conv_in: ConvLayer,
    stages: Vec<(ResBlock, ConvLayer)>,
    bottom: ResBlock,
    head_norm: NormLayer,
    head: ConvLayer,
    pub in_channels: usize,
    latent_channels: usize,
}

impl Encoder {
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        cfg: &NetConfig,
        in_channels: usize,
    ) -> Self {
        let widths = cfg.widths();
        let rank = cfg.spatial_rank;
        let conv_in =
            ConvLayer::new(ps, rng, "enc.in", in_channels, widths[0], 3, rank, 2, Init::He);
        let mut stages = Vec::new();
        for l in 1..cfg.encoder_levels {
            let res = ResBlock::new(ps, rng, &format!("enc.res{l}"), widths[l - 1], widths[l - 1], rank, None);
            let down = ConvLayer::new(
                ps,
                rng,
                &format!("enc.down{l}"),
                widths[l - 1],
                widths[l],
                3,
                rank,
                2,
                Init::He,
            );
            stages.push((res, down));
        }
        let last = *widths.last().unwrap();
        let bottom = ResBlock::new(ps, rng, "enc.bottom", last, last, rank, None);
        let head_norm = NormLayer::new(ps, "enc.head_norm", last);
        let head =
            ConvLayer::new(ps, rng, "enc.head", last, 2 * cfg.latent_channels, 3, rank, 1, Init::He);
        Self { conv_in, stages, bottom, head_norm, head, in_channels, latent_channels: cfg.latent_channels }
    }

    /// Tape forward: `[B, in, S] -> (mu, logvar)` at `S / 2^levels`,
    /// logvar clamped.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        reg: &RegisteredParams,
        x: Var,
    ) -> (Var, Var) {
        assert_eq!(tape.val(x).shape()[1], self.in_channels, "encoder input channels");
        let mut h = self.conv_in.forward(tape, reg, x);
        for (res, down) in &self.stages {
            h = res.forward(tape, reg, h, None);
            h = down.forward(tape, reg, h);
        }
        let h = self.bottom.forward(tape, reg, h, None);
        let h = self.head_norm.forward(tape, reg, h);
        let h = tape.silu(h);
        let h = self.head.forward(tape, reg, h);
        let mu = tape.slice_dim1(h, 0, self.latent_channels);
        let logvar_raw = tape.slice_dim1(h, self.latent_channels, 2 * self.latent_channels);
        let logvar = tape.clamp(logvar_raw, T::of_f64(LOGVAR_MIN), T::of_f64(LOGVAR_MAX));
        (mu, logvar)
    }

    /// Single-volume convenience: concatenates the template channels when
    /// given, validates the shape contract, and returns a [`Latent`].
    pub fn encode<T: Scalar>(
        &self,
        ps: &ParamSet<T>,
        cfg: &NetConfig,
        x: &Volume<T>,
        template: Option<&Volume<T>>,
    ) -> Result<Latent<T>, NetError> {
        cfg.check_spatial(x.spatial())?;
        let expected = x.channels() + template.map_or(0, |t| t.channels());
        if expected != self.in_channels {
            return Err(NetError::ShapeMismatch(format!(
                "encoder expects {} input channels, got {expected}",
                self.in_channels
            )));
        }
        if let Some(t) = template {
            if t.spatial() != x.spatial() {
                return Err(NetError::ShapeMismatch(format!(
                    "template spatial {:?} vs image {:?}",
                    t.spatial(),
                    x.spatial()
                )));
            }
        }
        let mut tape = Tape::new();
        let reg = ps.register(&mut tape);
        let mut shape = vec![1];
        shape.extend_from_slice(x.tensor().shape());
        let xv = tape.constant(x.tensor().clone().reshaped(&shape));
        let input = match template {
            Some(t) => {
                let mut tshape = vec![1];
                tshape.extend_from_slice(t.tensor().shape());
                let tv = tape.constant(t.tensor().clone().reshaped(&tshape));
                tape.concat_dim1(xv, tv)
            }
            None => xv,
        };
        let (mu, logvar) = self.forward(&mut tape, &reg, input);
        let mu_t = tape.val(mu).clone();
        let lv_t = tape.val(logvar).clone();
        let latent_shape = mu_t.shape()[1..].to_vec();
        Ok(Latent::new(mu_t.reshaped(&latent_shape), lv_t.reshaped(&latent_shape)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::tensor::Tensor;

    fn setup() -> (ParamSet<f32>, Encoder, NetConfig) {
        let cfg = NetConfig { base_width: 8, ..Default::default() };
        let mut ps = ParamSet::new();
        let mut rng = substream(1, "enc.test", 0);
        let enc = Encoder::new(&mut ps, &mut rng, &cfg, 2);
        (ps, enc, cfg)
    }

    #[test]
    fn latent_shape_contract_64() {
        // image+template channels at 64x64 with 3 levels -> 8 channels at 8x8
        let (ps, enc, cfg) = setup();
        let x = Volume::new(Tensor::from_fn(&[1, 64, 64], |i| (i % 7) as f32 * 0.1)).unwrap();
        let tpl = Volume::new(Tensor::from_fn(&[1, 64, 64], |i| (i % 5) as f32 * 0.1)).unwrap();
        let lat = enc.encode(&ps, &cfg, &x, Some(&tpl)).unwrap();
        assert_eq!(lat.mu().shape(), &[8, 8, 8]);
        assert_eq!(lat.logvar().shape(), &[8, 8, 8]);
    }

    #[test]
    fn deterministic_given_params() {
        let (ps, enc, cfg) = setup();
        let x = Volume::new(Tensor::from_fn(&[1, 32, 32], |i| (i % 11) as f32 * 0.05)).unwrap();
        let t = Volume::new(Tensor::from_fn(&[1, 32, 32], |i| (i % 3) as f32 * 0.2)).unwrap();
        let a = enc.encode(&ps, &cfg, &x, Some(&t)).unwrap();
        let b = enc.encode(&ps, &cfg, &x, Some(&t)).unwrap();
        assert_eq!(a.mu(), b.mu());
        assert_eq!(a.logvar(), b.logvar());
    }

    #[test]
    fn indivisible_spatial_rejected() {
        let (ps, enc, cfg) = setup();
        let x = Volume::new(Tensor::zeros(&[1, 60, 64])).unwrap();
        let t = Volume::new(Tensor::zeros(&[1, 60, 64])).unwrap();
        assert!(enc.encode(&ps, &cfg, &x, Some(&t)).is_err());
    }

    #[test]
    fn shape_contract_holds_for_any_divisible_size() {
        let (ps, enc, cfg) = setup();
        for size in [32usize, 40, 64] {
            let x = Volume::new(Tensor::zeros(&[1, size, size])).unwrap();
            let t = Volume::new(Tensor::zeros(&[1, size, size])).unwrap();
            let lat = enc.encode(&ps, &cfg, &x, Some(&t)).unwrap();
            assert_eq!(lat.mu().shape(), &[8, size / 8, size / 8], "at size {size}");
        }
    }

    #[test]
    fn parameter_perturbation_changes_output() {
        let (mut ps, enc, cfg) = setup();
        let x = Volume::new(Tensor::from_fn(&[1, 32, 32], |i| (i % 13) as f32 * 0.04)).unwrap();
        let t = Volume::new(Tensor::from_fn(&[1, 32, 32], |i| (i % 6) as f32 * 0.1)).unwrap();
        let before = enc.encode(&ps, &cfg, &x, Some(&t)).unwrap();
        // nudge the first conv weight
        let (_, w) = ps.iter_mut().next().map(|(n, t)| (n.to_string(), t)).unwrap();
        w.data_mut()[0] += 0.5;
        let after = enc.encode(&ps, &cfg, &x, Some(&t)).unwrap();
        let diff: f32 = before
            .mu()
            .data()
            .iter()
            .zip(after.mu().data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 0.0, "encoder output insensitive to parameters");
    }
}
