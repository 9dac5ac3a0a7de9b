//! Dense layers, batched matmul, softmax, transposes — the attention toolkit.

use super::{gemm, Tape, Var};
use crate::tensor::Tensor;
use crate::Scalar;

impl<T: Scalar> Tape<T> {
    /// Affine layer: `x [N, F] · w^T [F, O] + b` with `w` stored `[O, F]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (n, f) = {
            let s = self.val(x).shape();
            assert_eq!(s.len(), 2);
            (s[0], s[1])
        };
        let o = self.val(w).shape()[0];
        assert_eq!(self.val(w).shape()[1], f);
        assert_eq!(self.val(b).numel(), o);
        let mut y = vec![T::zero(); n * o];
        gemm(n, f, o, T::one(), self.val(x).data(), false, self.val(w).data(), true, T::zero(), &mut y);
        for row in y.chunks_mut(o) {
            for (v, &bv) in row.iter_mut().zip(self.val(b).data()) {
                *v += bv;
            }
        }
        self.push(
            Tensor::new(&[n, o], y),
            Some(Box::new(move |t, g, grads| {
                let gd = g.data();
                let mut gx = vec![T::zero(); n * f];
                gemm(n, o, f, T::one(), gd, false, t.val(w).data(), false, T::zero(), &mut gx);
                let mut gw = vec![T::zero(); o * f];
                gemm(o, n, f, T::one(), gd, true, t.val(x).data(), false, T::zero(), &mut gw);
                let mut gb = vec![T::zero(); o];
                for row in gd.chunks(o) {
                    for (acc, &v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                grads.accum(x, Tensor::new(&[n, f], gx));
                grads.accum(w, Tensor::new(&[o, f], gw));
                grads.accum(b, Tensor::new(&[o], gb));
            })),
        )
    }

    /// Batched matmul: `[B, M, K] x [B, K, N] -> [B, M, N]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let sa = self.val(a).shape().to_vec();
        let sb = self.val(b).shape().to_vec();
        assert_eq!(sa.len(), 3);
        assert_eq!(sb.len(), 3);
        assert_eq!(sa[0], sb[0]);
        assert_eq!(sa[2], sb[1]);
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut y = vec![T::zero(); bs * m * n];
        for i in 0..bs {
            gemm(
                m, k, n,
                T::one(),
                &self.val(a).data()[i * m * k..(i + 1) * m * k],
                false,
                &self.val(b).data()[i * k * n..(i + 1) * k * n],
                false,
                T::zero(),
                &mut y[i * m * n..(i + 1) * m * n],
            );
        }
        self.push(
            Tensor::new(&[bs, m, n], y),
            Some(Box::new(move |t, g, grads| {
                let mut ga = vec![T::zero(); bs * m * k];
                let mut gb = vec![T::zero(); bs * k * n];
                for i in 0..bs {
                    let gy = &g.data()[i * m * n..(i + 1) * m * n];
                    gemm(
                        m, n, k,
                        T::one(),
                        gy,
                        false,
                        &t.val(b).data()[i * k * n..(i + 1) * k * n],
                        true,
                        T::zero(),
                        &mut ga[i * m * k..(i + 1) * m * k],
                    );
                    gemm(
                        k, m, n,
                        T::one(),
                        &t.val(a).data()[i * m * k..(i + 1) * m * k],
                        true,
                        gy,
                        false,
                        T::zero(),
                        &mut gb[i * k * n..(i + 1) * k * n],
                    );
                }
                grads.accum(a, Tensor::new(&[bs, m, k], ga));
                grads.accum(b, Tensor::new(&[bs, k, n], gb));
            })),
        )
    }

    /// Swap the last two dims of a `[B, M, N]` tensor.
    pub fn transpose_12(&mut self, a: Var) -> Var {
        let s = self.val(a).shape().to_vec();
        assert_eq!(s.len(), 3);
        let (bs, m, n) = (s[0], s[1], s[2]);
        let ad = self.val(a).data();
        let mut y = vec![T::zero(); bs * m * n];
        for i in 0..bs {
            for r in 0..m {
                for c in 0..n {
                    y[i * m * n + c * m + r] = ad[i * m * n + r * n + c];
                }
            }
        }
        self.push(
            Tensor::new(&[bs, n, m], y),
            Some(Box::new(move |_t, g, grads| {
                let gd = g.data();
                let mut ga = vec![T::zero(); bs * m * n];
                for i in 0..bs {
                    for r in 0..n {
                        for c in 0..m {
                            ga[i * m * n + c * n + r] = gd[i * m * n + r * m + c];
                        }
                    }
                }
                grads.accum(a, Tensor::new(&[bs, m, n], ga));
            })),
        )
    }

    /// Softmax over the last dim.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let s = self.val(a).shape().to_vec();
        let n = *s.last().unwrap();
        let rows = self.val(a).numel() / n;
        let out_idx = Var(self.next_index());
        let ad = self.val(a).data();
        let mut y = vec![T::zero(); ad.len()];
        for r in 0..rows {
            let row = &ad[r * n..(r + 1) * n];
            let mut mx = row[0];
            for &v in row {
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = T::zero();
            for (o, &v) in y[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = (v - mx).exp();
                sum += *o;
            }
            let inv = T::one() / sum;
            for o in &mut y[r * n..(r + 1) * n] {
                *o = *o * inv;
            }
        }
        self.push(
            Tensor::new(&s, y),
            Some(Box::new(move |t, g, grads| {
                let yd = t.val(out_idx).data();
                let gd = g.data();
                let mut ga = vec![T::zero(); gd.len()];
                for r in 0..rows {
                    let ys = &yd[r * n..(r + 1) * n];
                    let gs = &gd[r * n..(r + 1) * n];
                    let mut dot = T::zero();
                    for (y, g) in ys.iter().zip(gs) {
                        dot += *y * *g;
                    }
                    for ((o, &yv), &gv) in ga[r * n..(r + 1) * n].iter_mut().zip(ys).zip(gs) {
                        *o = yv * (gv - dot);
                    }
                }
                grads.accum(a, Tensor::new(t.val(a).shape(), ga));
            })),
        )
    }
}
