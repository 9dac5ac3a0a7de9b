//! Patch-based discriminator: three conv layers, per-patch realism scores.

use rand_chacha::ChaCha8Rng;

use super::blocks::{ConvLayer, Init, NormLayer};
use super::{NetConfig, ParamSet, RegisteredParams};
use crate::fields::Volume;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::Scalar;

/// 3-layer strided patch discriminator (receptive field 22 voxels).
pub struct PatchDiscriminator {
    c1: ConvLayer,
    c2: ConvLayer,
    norm: NormLayer,
    c3: ConvLayer,
}

impl PatchDiscriminator {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, rng: &mut ChaCha8Rng, cfg: &NetConfig) -> Self {
        let rank = cfg.spatial_rank;
        let w = cfg.base_width.max(8);
        Self {
            c1: ConvLayer::new(ps, rng, "disc.c1", cfg.image_channels, w, 4, rank, 2, Init::He),
            c2: ConvLayer::new(ps, rng, "disc.c2", w, 2 * w, 4, rank, 2, Init::He),
            norm: NormLayer::new(ps, "disc.norm", 2 * w),
            c3: ConvLayer::new(ps, rng, "disc.c3", 2 * w, 1, 4, rank, 1, Init::He),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, reg: &RegisteredParams, x: Var) -> Var {
        let slope = T::of_f64(0.2);
        let h = self.c1.forward(tape, reg, x);
        let h = tape.leaky_relu(h, slope);
        let h = self.c2.forward(tape, reg, h);
        let h = self.norm.forward(tape, reg, h);
        let h = tape.leaky_relu(h, slope);
        self.c3.forward(tape, reg, h)
    }

    /// Per-patch scores for one volume.
    pub fn score<T: Scalar>(&self, ps: &ParamSet<T>, x: &Volume<T>) -> Tensor<T> {
        let mut tape = Tape::new();
        let reg = ps.register(&mut tape);
        let mut shape = vec![1];
        shape.extend_from_slice(x.tensor().shape());
        let xv = tape.constant(x.tensor().clone().reshaped(&shape));
        let out = self.forward(&mut tape, &reg, xv);
        let t = tape.val(out).clone();
        let s = t.shape()[1..].to_vec();
        t.reshaped(&s)
    }
}
