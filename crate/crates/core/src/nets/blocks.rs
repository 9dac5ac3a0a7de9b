//! Shared building blocks: conv/norm/linear layers, residual blocks,
//! single-head cross-attention.

use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamSet, RegisteredParams};
use crate::rng::fill_standard_normal;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::Scalar;

/// Weight initialization scheme.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Kaiming-normal scaled by fan-in.
    He,
    /// All zeros (identity-start output heads).
    Zero,
    /// Normal with a fixed small std: near-identity start that still passes
    /// gradient into the layers below.
    SmallNormal(f64),
}

fn he_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); shape.iter().product()];
    fill_standard_normal(rng, &mut data);
    let std = T::of_f64((2.0 / fan_in as f64).sqrt());
    for v in &mut data {
        *v = *v * std;
    }
    Tensor::new(shape, data)
}

/// Convolution layer parameters plus geometry.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        rank: usize,
        stride: usize,
        init: Init,
    ) -> Self {
        let mut shape = vec![cout, cin];
        shape.extend(std::iter::repeat(k).take(rank));
        let fan_in = cin * k.pow(rank as u32);
        let w = match init {
            Init::He => he_tensor(rng, &shape, fan_in),
            Init::Zero => Tensor::zeros(&shape),
            Init::SmallNormal(std) => {
                let mut t = Tensor::zeros(&shape);
                fill_standard_normal(rng, t.data_mut());
                let s = T::of_f64(std);
                for v in t.data_mut() {
                    *v = *v * s;
                }
                t
            }
        };
        let w = ps.add(format!("{name}.w"), w);
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Self { w, b, stride, pad: k / 2 }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, reg: &RegisteredParams, x: Var) -> Var {
        tape.conv(x, reg.var(self.w), reg.var(self.b), self.stride, self.pad)
    }
}

/// Group norm with learned per-channel affine; group count adapts to divide
/// the channel count.
#[derive(Clone, Debug)]
pub struct NormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl NormLayer {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, channels: usize) -> Self {
        let groups = (1..=8.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1);
        Self {
            gamma: ps.add(format!("{name}.g"), Tensor::full(&[channels], T::one())),
            beta: ps.add(format!("{name}.b"), Tensor::zeros(&[channels])),
            groups,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, reg: &RegisteredParams, x: Var) -> Var {
        tape.group_norm(x, reg.var(self.gamma), reg.var(self.beta), self.groups, T::of_f64(1e-5))
    }
}

/// Dense layer `[N, in] -> [N, out]`.
#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearLayer {
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        fin: usize,
        fout: usize,
        init: Init,
    ) -> Self {
        let w = match init {
            Init::He => he_tensor(rng, &[fout, fin], fin),
            Init::Zero => Tensor::zeros(&[fout, fin]),
            Init::SmallNormal(std) => {
                let mut t = Tensor::zeros(&[fout, fin]);
                fill_standard_normal(rng, t.data_mut());
                let s = T::of_f64(std);
                for v in t.data_mut() {
                    *v = *v * s;
                }
                t
            }
        };
        Self {
            w: ps.add(format!("{name}.w"), w),
            b: ps.add(format!("{name}.b"), Tensor::zeros(&[fout])),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, reg: &RegisteredParams, x: Var) -> Var {
        tape.linear(x, reg.var(self.w), reg.var(self.b))
    }
}

/// Pre-norm residual block: `x + conv(silu(norm(conv(silu(norm(x))))))`,
/// with an optional 1x1 skip projection and optional time-embedding bias.
#[derive(Clone, Debug)]
pub struct ResBlock {
    norm1: NormLayer,
    conv1: ConvLayer,
    norm2: NormLayer,
    conv2: ConvLayer,
    skip: Option<ConvLayer>,
    temb_proj: Option<LinearLayer>,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        rank: usize,
        temb_dim: Option<usize>,
    ) -> Self {
        Self {
            norm1: NormLayer::new(ps, &format!("{name}.n1"), cin),
            conv1: ConvLayer::new(ps, rng, &format!("{name}.c1"), cin, cout, 3, rank, 1, Init::He),
            norm2: NormLayer::new(ps, &format!("{name}.n2"), cout),
            conv2: ConvLayer::new(ps, rng, &format!("{name}.c2"), cout, cout, 3, rank, 1, Init::He),
            skip: (cin != cout)
                .then(|| ConvLayer::new(ps, rng, &format!("{name}.skip"), cin, cout, 1, rank, 1, Init::He)),
            temb_proj: temb_dim
                .map(|d| LinearLayer::new(ps, rng, &format!("{name}.temb"), d, cout, Init::He)),
        }
    }

    /// `temb` is `[B, time_embed_dim]` and required iff configured.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        reg: &RegisteredParams,
        x: Var,
        temb: Option<Var>,
    ) -> Var {
        let h = self.norm1.forward(tape, reg, x);
        let h = tape.silu(h);
        let mut h = self.conv1.forward(tape, reg, h);
        if let Some(proj) = &self.temb_proj {
            let t = temb.expect("time embedding required");
            let t = tape.silu(t);
            let t = proj.forward(tape, reg, t);
            h = tape.add_channel_bias(h, t);
        }
        let h = self.norm2.forward(tape, reg, h);
        let h = tape.silu(h);
        let h = self.conv2.forward(tape, reg, h);
        let sk = match &self.skip {
            Some(conv) => conv.forward(tape, reg, x),
            None => x,
        };
        tape.add(h, sk)
    }
}

/// Single-head cross-attention from a feature map to a token context.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    norm: NormLayer,
    wq: LinearLayer,
    wk: LinearLayer,
    wv: LinearLayer,
    wo: LinearLayer,
    channels: usize,
}

impl CrossAttention {
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        context_dim: usize,
    ) -> Self {
        Self {
            norm: NormLayer::new(ps, &format!("{name}.norm"), channels),
            wq: LinearLayer::new(ps, rng, &format!("{name}.q"), channels, channels, Init::He),
            wk: LinearLayer::new(ps, rng, &format!("{name}.k"), context_dim, channels, Init::He),
            wv: LinearLayer::new(ps, rng, &format!("{name}.v"), context_dim, channels, Init::He),
            // zero-init output projection: the block starts as the identity
            wo: LinearLayer::new(ps, rng, &format!("{name}.o"), channels, channels, Init::Zero),
            channels,
        }
    }

    /// `x` is `[B, C, spatial...]`, `context` is `[B, M, context_dim]`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        reg: &RegisteredParams,
        x: Var,
        context: Var,
    ) -> Var {
        let shape = tape.val(x).shape().to_vec();
        let (batch, ch) = (shape[0], shape[1]);
        assert_eq!(ch, self.channels);
        let vox: usize = shape[2..].iter().product();
        let (m, cdim) = {
            let s = tape.val(context).shape();
            (s[1], s[2])
        };

        let h = self.norm.forward(tape, reg, x);
        let flat = tape.reshape(h, &[batch, ch, vox]);
        let tokens = tape.transpose_12(flat); // [B, vox, C]
        let q2 = tape.reshape(tokens, &[batch * vox, ch]);
        let q2 = self.wq.forward(tape, reg, q2);
        let q = tape.reshape(q2, &[batch, vox, ch]);
        let ctx2 = tape.reshape(context, &[batch * m, cdim]);
        let k2 = self.wk.forward(tape, reg, ctx2);
        let k = tape.reshape(k2, &[batch, m, ch]);
        let v2 = self.wv.forward(tape, reg, ctx2);
        let v = tape.reshape(v2, &[batch, m, ch]);
        let kt = tape.transpose_12(k);
        let logits = tape.bmm(q, kt);
        let scaled = tape.scale(logits, T::of_f64(1.0 / (ch as f64).sqrt()));
        let attn = tape.softmax_last(scaled);
        let mixed = tape.bmm(attn, v); // [B, vox, C]
        let mixed2 = tape.reshape(mixed, &[batch * vox, ch]);
        let out2 = self.wo.forward(tape, reg, mixed2);
        let out = tape.reshape(out2, &[batch, vox, ch]);
        let back = tape.transpose_12(out);
        let spatialized = tape.reshape(back, &shape);
        tape.add(x, spatialized)
    }
}
