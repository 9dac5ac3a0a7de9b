//! Latent decoder: upsamples a code back to image resolution, emitting either
//! a displacement field (identity-start head) or an image (sigmoid head).

use rand_chacha::ChaCha8Rng;

use super::blocks::{ConvLayer, Init, NormLayer, ResBlock};
use super::{Condition, NetConfig, NetError, ParamSet, RegisteredParams};
use crate::fields::{DeformationField, Volume};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::Scalar;

/// What the decoder head emits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderHead {
    /// Displacement field: one channel per spatial dim, final conv zero-init
    /// so training starts at the identity warp.
    Displacement,
    /// Image in [0, 1] via sigmoid.
    Image,
}

/// Upsampling decoder shared by the field decoder and the image decoder.
pub struct Decoder {
    conv_in: ConvLayer,
    bottom: ResBlock,
    stages: Vec<(ConvLayer, Option<ResBlock>)>,
    head_norm: NormLayer,
    head: ConvLayer,
    pub in_channels: usize,
    pub out_channels: usize,
    head_kind: DecoderHead,
}

impl Decoder {
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        cfg: &NetConfig,
        name: &str,
        in_channels: usize,
        head_kind: DecoderHead,
    ) -> Self {
        let widths = cfg.widths();
        let rank = cfg.spatial_rank;
        let levels = cfg.encoder_levels;
        let last = *widths.last().unwrap();
        let out_channels = match head_kind {
            DecoderHead::Displacement => rank,
            DecoderHead::Image => cfg.image_channels,
        };
        let conv_in = ConvLayer::new(ps, rng, &format!("{name}.in"), in_channels, last, 3, rank, 1, Init::He);
        let bottom = ResBlock::new(ps, rng, &format!("{name}.bottom"), last, last, rank, None);
        let mut stages = Vec::new();
        for step in 0..levels {
            // widths walk back down; the final (full-resolution) stage skips
            // its residual block to keep full-res compute low
            let cin = widths[levels - 1 - step.min(levels - 1)];
            let cout = if step + 1 < levels { widths[levels - 2 - step] } else { widths[0] };
            let conv = ConvLayer::new(ps, rng, &format!("{name}.up{step}"), cin, cout, 3, rank, 1, Init::He);
            let res = (step + 1 < levels)
                .then(|| ResBlock::new(ps, rng, &format!("{name}.upres{step}"), cout, cout, rank, None));
            stages.push((conv, res));
        }
        let head_norm = NormLayer::new(ps, &format!("{name}.head_norm"), widths[0]);
        // near-identity start: small but nonzero so the trunk below the head
        // receives gradient from the first step
        let head_init = match head_kind {
            DecoderHead::Displacement => Init::SmallNormal(1e-2),
            DecoderHead::Image => Init::He,
        };
        let head = ConvLayer::new(ps, rng, &format!("{name}.head"), widths[0], out_channels, 3, rank, 1, head_init);
        Self { conv_in, bottom, stages, head_norm, head, in_channels, out_channels, head_kind }
    }

    /// Tape forward: `[B, in, s] -> [B, out, s * 2^levels]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, reg: &RegisteredParams, z: Var) -> Var {
        assert_eq!(tape.val(z).shape()[1], self.in_channels, "decoder input channels");
        let mut h = self.conv_in.forward(tape, reg, z);
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
        match self.head_kind {
            DecoderHead::Displacement => h,
            DecoderHead::Image => tape.sigmoid(h),
        }
    }

    /// Single-code convenience for the displacement head. The condition is
    /// appended as constant latent channels when the decoder was built with
    /// the widened input.
    pub fn decode_field<T: Scalar>(
        &self,
        ps: &ParamSet<T>,
        z: &Tensor<T>,
        cond: Option<&Condition>,
    ) -> Result<DeformationField<T>, NetError> {
        assert_eq!(self.head_kind, DecoderHead::Displacement);
        let out = self.decode_tensor(ps, z, cond)?;
        let shape = out.shape()[1..].to_vec();
        Ok(DeformationField::new(out.reshaped(&shape)).expect("decoder output is a valid field"))
    }

    /// Single-code convenience for the image head.
    pub fn decode_image<T: Scalar>(
        &self,
        ps: &ParamSet<T>,
        z: &Tensor<T>,
        cond: Option<&Condition>,
    ) -> Result<Volume<T>, NetError> {
        assert_eq!(self.head_kind, DecoderHead::Image);
        let out = self.decode_tensor(ps, z, cond)?;
        let shape = out.shape()[1..].to_vec();
        Ok(Volume::new(out.reshaped(&shape)).expect("decoder output is a valid volume"))
    }

    fn decode_tensor<T: Scalar>(
        &self,
        ps: &ParamSet<T>,
        z: &Tensor<T>,
        cond: Option<&Condition>,
    ) -> Result<Tensor<T>, NetError> {
        let z_ch = z.shape()[0];
        let cond_ch = self.in_channels - z_ch;
        if cond_ch > 0 && cond.is_none() {
            return Err(NetError::ShapeMismatch(format!(
                "decoder needs {cond_ch} condition channels but no condition given"
            )));
        }
        let mut tape = Tape::new();
        let reg = ps.register(&mut tape);
        let mut shape = vec![1];
        shape.extend_from_slice(z.shape());
        let zv = tape.constant(z.clone().reshaped(&shape));
        let input = if cond_ch > 0 {
            let spatial = &z.shape()[1..];
            let ch = Condition::to_channels::<T>(&[*cond.unwrap()], spatial);
            let cv = tape.constant(ch);
            tape.concat_dim1(zv, cv)
        } else {
            zv
        };
        let out = self.forward(&mut tape, &reg, input);
        Ok(tape.val(out).clone())
    }
}
