//! Group normalization with per-channel affine parameters.

use super::{Tape, Var};
use crate::tensor::Tensor;
use crate::Scalar;

impl<T: Scalar> Tape<T> {
    /// Group norm over `[B, C, spatial...]`; `gamma`, `beta` are `[C]`.
    /// Statistics never cross samples, so eval outputs are batch-invariant.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: T) -> Var {
        let shape = self.val(x).shape().to_vec();
        let (batch, ch) = (shape[0], shape[1]);
        assert_eq!(ch % groups, 0, "groups {groups} must divide channels {ch}");
        assert_eq!(self.val(gamma).numel(), ch);
        assert_eq!(self.val(beta).numel(), ch);
        let vox: usize = shape[2..].iter().product();
        let cpg = ch / groups;
        let group_n = cpg * vox;
        let inv_n = T::one() / T::of_usize(group_n);

        let xd = self.val(x).data();
        let mut mean = vec![T::zero(); batch * groups];
        let mut istd = vec![T::zero(); batch * groups];
        for b in 0..batch {
            for g in 0..groups {
                let base = (b * ch + g * cpg) * vox;
                let slice = &xd[base..base + group_n];
                let mut m = T::zero();
                for &v in slice {
                    m += v;
                }
                m = m * inv_n;
                let mut var = T::zero();
                for &v in slice {
                    var += (v - m) * (v - m);
                }
                var = var * inv_n;
                mean[b * groups + g] = m;
                istd[b * groups + g] = T::one() / (var + eps).sqrt();
            }
        }
        let gm = self.val(gamma).data();
        let bt = self.val(beta).data();
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..batch {
            for c in 0..ch {
                let g = c / cpg;
                let (m, is) = (mean[b * groups + g], istd[b * groups + g]);
                let (ga, be) = (gm[c], bt[c]);
                let base = (b * ch + c) * vox;
                for i in 0..vox {
                    out[base + i] = (xd[base + i] - m) * is * ga + be;
                }
            }
        }

        let mean_c = mean;
        let istd_c = istd;
        self.push(
            Tensor::new(&shape, out),
            Some(Box::new(move |t, gout, grads| {
                let xd = t.val(x).data();
                let gm = t.val(gamma).data();
                let gd = gout.data();
                let mut gx = vec![T::zero(); xd.len()];
                let mut ggamma = vec![T::zero(); ch];
                let mut gbeta = vec![T::zero(); ch];
                for b in 0..batch {
                    for g in 0..groups {
                        let (m, is) = (mean_c[b * groups + g], istd_c[b * groups + g]);
                        // group-wide reductions of dxhat and dxhat*xhat
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for c in g * cpg..(g + 1) * cpg {
                            let base = (b * ch + c) * vox;
                            let ga = gm[c];
                            for i in 0..vox {
                                let xhat = (xd[base + i] - m) * is;
                                let dxhat = gd[base + i] * ga;
                                s1 += dxhat;
                                s2 += dxhat * xhat;
                                ggamma[c] += gd[base + i] * xhat;
                                gbeta[c] += gd[base + i];
                            }
                        }
                        s1 = s1 * inv_n;
                        s2 = s2 * inv_n;
                        for c in g * cpg..(g + 1) * cpg {
                            let base = (b * ch + c) * vox;
                            let ga = gm[c];
                            for i in 0..vox {
                                let xhat = (xd[base + i] - m) * is;
                                let dxhat = gd[base + i] * ga;
                                gx[base + i] = is * (dxhat - s1 - xhat * s2);
                            }
                        }
                    }
                }
                grads.accum(x, Tensor::new(t.val(x).shape(), gx));
                grads.accum(gamma, Tensor::new(&[ch], ggamma));
                grads.accum(beta, Tensor::new(&[ch], gbeta));
            })),
        )
    }
}
