//! Reverse-mode automatic differentiation over [`Tensor`].
//!
//! A [`Tape`] records forward values and per-node backward closures; calling
//! [`Tape::backward`] on a scalar root returns gradients for every leaf.
//! The op set is exactly what the networks and objectives here need; each
//! backward is verified against central finite differences in the tests.

mod attn;
mod conv;
mod norm;
mod warp;

use crate::tensor::Tensor;
use crate::Scalar;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn<T> = Box<dyn Fn(&Tape<T>, &Tensor<T>, &mut Grads<T>)>;

struct Node<T: Scalar> {
    value: Tensor<T>,
    back: Option<BackFn<T>>,
}

/// Gradient slots, one per tape node.
pub struct Grads<T: Scalar> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.slots[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.slots[v.0].take()
    }

    pub fn accum(&mut self, v: Var, g: Tensor<T>) {
        match &mut self.slots[v.0] {
            Some(acc) => {
                debug_assert_eq!(acc.shape(), g.shape());
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}

#[derive(Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Row-major matrix multiply helper: `c = alpha * op(a) op(b) + beta * c`,
/// where `op` optionally transposes. `a` is m x k after `op`, `b` is k x n.
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        T::gemm(m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, back: Option<BackFn<T>>) -> Var {
        self.nodes.push(Node { value, back });
        Var(self.nodes.len() - 1)
    }

    /// Index the next node will get; lets a backward closure refer to its own output.
    fn next_index(&self) -> usize {
        self.nodes.len()
    }

    /// Insert a differentiable input (parameters, images, fields).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, None)
    }

    /// Insert a value that needs no gradient (noise, embeddings of t, ...).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, None)
    }

    /// Reverse sweep from a scalar root; returns per-node gradients
    /// (leaves keep theirs, interior gradients are consumed).
    pub fn backward(&self, root: Var) -> Grads<T> {
        assert_eq!(self.val(root).numel(), 1, "backward root must be scalar");
        let mut grads = Grads { slots: (0..self.nodes.len()).map(|_| None).collect() };
        grads.slots[root.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=root.0).rev() {
            if let Some(back) = &self.nodes[i].back {
                if let Some(g) = grads.slots[i].take() {
                    back(self, &g, &mut grads);
                }
            }
        }
        grads
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a).zip_map(self.val(b), |x, y| x + y);
        self.push(
            v,
            Some(Box::new(move |_t, g, grads| {
                grads.accum(a, g.clone());
                grads.accum(b, g.clone());
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a).zip_map(self.val(b), |x, y| x - y);
        self.push(
            v,
            Some(Box::new(move |_t, g, grads| {
                grads.accum(a, g.clone());
                grads.accum(b, g.map(|x| -x));
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.val(a).zip_map(self.val(b), |x, y| x * y);
        self.push(
            v,
            Some(Box::new(move |t, g, grads| {
                grads.accum(a, g.zip_map(t.val(b), |gi, bi| gi * bi));
                grads.accum(b, g.zip_map(t.val(a), |gi, ai| gi * ai));
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.val(a).map(|x| x * c);
        self.push(v, Some(Box::new(move |_t, g, grads| grads.accum(a, g.map(|x| x * c)))))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.val(a).map(|x| x + c);
        self.push(v, Some(Box::new(move |_t, g, grads| grads.accum(a, g.clone()))))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out_idx = Var(self.next_index());
        let v = self.val(a).map(|x| x.exp());
        self.push(
            v,
            Some(Box::new(move |t, g, grads| {
                grads.accum(a, g.zip_map(t.val(out_idx), |gi, yi| gi * yi));
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out_idx = Var(self.next_index());
        let one = T::one();
        let v = self.val(a).map(|x| one / (one + (-x).exp()));
        self.push(
            v,
            Some(Box::new(move |t, g, grads| {
                grads.accum(a, g.zip_map(t.val(out_idx), |gi, yi| gi * yi * (T::one() - yi)));
            })),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.val(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(
            v,
            Some(Box::new(move |t, g, grads| {
                grads.accum(
                    a,
                    g.zip_map(t.val(a), |gi, xi| if xi > T::zero() { gi } else { T::zero() }),
                );
            })),
        )
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let v = self.val(a).map(|x| if x > T::zero() { x } else { x * slope });
        self.push(
            v,
            Some(Box::new(move |t, g, grads| {
                grads.accum(
                    a,
                    g.zip_map(t.val(a), |gi, xi| if xi > T::zero() { gi } else { gi * slope }),
                );
            })),
        )
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let one = T::one();
        let v = self.val(a).map(|x| x / (one + (-x).exp()));
        self.push(
            v,
            Some(Box::new(move |t, g, grads| {
                grads.accum(
                    a,
                    g.zip_map(t.val(a), |gi, xi| {
                        let s = T::one() / (T::one() + (-xi).exp());
                        gi * s * (T::one() + xi * (T::one() - s))
                    }),
                );
            })),
        )
    }

    /// Clamp with zero gradient outside the open interval.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let v = self.val(a).map(|x| x.max(lo).min(hi));
        self.push(
            v,
            Some(Box::new(move |t, g, grads| {
                grads.accum(
                    a,
                    g.zip_map(t.val(a), |gi, xi| if xi > lo && xi < hi { gi } else { T::zero() }),
                );
            })),
        )
    }

    // ---- shape ------------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let old_shape = self.val(a).shape().to_vec();
        let v = self.val(a).clone().reshaped(shape);
        self.push(
            v,
            Some(Box::new(move |_t, g, grads| {
                grads.accum(a, g.clone().reshaped(&old_shape));
            })),
        )
    }

    /// Concatenate along dim 1 (channels or tokens); dim 0 is batch.
    pub fn concat_dim1(&mut self, a: Var, b: Var) -> Var {
        let sa = self.val(a).shape().to_vec();
        let sb = self.val(b).shape().to_vec();
        assert!(sa.len() >= 2 && sa.len() == sb.len());
        assert_eq!(sa[0], sb[0]);
        assert_eq!(&sa[2..], &sb[2..]);
        let rest: usize = sa[2..].iter().product();
        let (ma, mb) = (sa[1], sb[1]);
        let batch = sa[0];
        let mut shape = sa.clone();
        shape[1] = ma + mb;
        let mut data = vec![T::zero(); batch * (ma + mb) * rest];
        {
            let da = self.val(a).data();
            let db = self.val(b).data();
            for i in 0..batch {
                let dst = &mut data[i * (ma + mb) * rest..];
                dst[..ma * rest].copy_from_slice(&da[i * ma * rest..(i + 1) * ma * rest]);
                dst[ma * rest..(ma + mb) * rest]
                    .copy_from_slice(&db[i * mb * rest..(i + 1) * mb * rest]);
            }
        }
        let v = Tensor::new(&shape, data);
        self.push(
            v,
            Some(Box::new(move |_t, g, grads| {
                let mut ga = vec![T::zero(); batch * ma * rest];
                let mut gb = vec![T::zero(); batch * mb * rest];
                for i in 0..batch {
                    let src = &g.data()[i * (ma + mb) * rest..];
                    ga[i * ma * rest..(i + 1) * ma * rest].copy_from_slice(&src[..ma * rest]);
                    gb[i * mb * rest..(i + 1) * mb * rest]
                        .copy_from_slice(&src[ma * rest..(ma + mb) * rest]);
                }
                let mut shape_a = g.shape().to_vec();
                shape_a[1] = ma;
                let mut shape_b = g.shape().to_vec();
                shape_b[1] = mb;
                grads.accum(a, Tensor::new(&shape_a, ga));
                grads.accum(b, Tensor::new(&shape_b, gb));
            })),
        )
    }

    /// Slice `[from, to)` along dim 1.
    pub fn slice_dim1(&mut self, a: Var, from: usize, to: usize) -> Var {
        let sa = self.val(a).shape().to_vec();
        assert!(sa.len() >= 2 && from < to && to <= sa[1]);
        let rest: usize = sa[2..].iter().product();
        let batch = sa[0];
        let m = sa[1];
        let width = to - from;
        let mut shape = sa.clone();
        shape[1] = width;
        let mut data = vec![T::zero(); batch * width * rest];
        for i in 0..batch {
            let src = &self.val(a).data()[(i * m + from) * rest..(i * m + to) * rest];
            data[i * width * rest..(i + 1) * width * rest].copy_from_slice(src);
        }
        let v = Tensor::new(&shape, data);
        self.push(
            v,
            Some(Box::new(move |_t, g, grads| {
                let mut ga = vec![T::zero(); batch * m * rest];
                for i in 0..batch {
                    ga[(i * m + from) * rest..(i * m + to) * rest]
                        .copy_from_slice(&g.data()[i * width * rest..(i + 1) * width * rest]);
                }
                let mut shape_a = g.shape().to_vec();
                shape_a[1] = m;
                grads.accum(a, Tensor::new(&shape_a, ga));
            })),
        )
    }

    /// Broadcast a `[1, ...]` tensor to batch size `n` (gradient sums over the batch).
    pub fn repeat_batch(&mut self, a: Var, n: usize) -> Var {
        let sa = self.val(a).shape().to_vec();
        assert_eq!(sa[0], 1);
        let per = self.val(a).numel();
        let mut shape = sa.clone();
        shape[0] = n;
        let mut data = Vec::with_capacity(per * n);
        for _ in 0..n {
            data.extend_from_slice(self.val(a).data());
        }
        let v = Tensor::new(&shape, data);
        self.push(
            v,
            Some(Box::new(move |_t, g, grads| {
                let mut acc = vec![T::zero(); per];
                for i in 0..n {
                    for (s, &x) in acc.iter_mut().zip(&g.data()[i * per..(i + 1) * per]) {
                        *s += x;
                    }
                }
                grads.accum(a, Tensor::new(&sa, acc));
            })),
        )
    }

    /// Add a per-(batch, channel) bias `[B, C]` to a `[B, C, spatial...]` map.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Var {
        let sx = self.val(x).shape().to_vec();
        let sb = self.val(bias).shape().to_vec();
        assert_eq!(sb.len(), 2);
        assert_eq!(sx[0], sb[0]);
        assert_eq!(sx[1], sb[1]);
        let rest: usize = sx[2..].iter().product();
        let (batch, ch) = (sx[0], sx[1]);
        let mut data = self.val(x).data().to_vec();
        {
            let b = self.val(bias).data();
            for i in 0..batch {
                for c in 0..ch {
                    let add = b[i * ch + c];
                    for v in &mut data[(i * ch + c) * rest..(i * ch + c + 1) * rest] {
                        *v += add;
                    }
                }
            }
        }
        let v = Tensor::new(&sx, data);
        self.push(
            v,
            Some(Box::new(move |_t, g, grads| {
                grads.accum(x, g.clone());
                let mut gb = vec![T::zero(); batch * ch];
                for i in 0..batch {
                    for c in 0..ch {
                        let mut acc = T::zero();
                        for &v in &g.data()[(i * ch + c) * rest..(i * ch + c + 1) * rest] {
                            acc += v;
                        }
                        gb[i * ch + c] = acc;
                    }
                }
                grads.accum(bias, Tensor::new(&[batch, ch], gb));
            })),
        )
    }

    /// Spatial mean per (batch, channel): `[B, C, spatial...] -> [B, C]`.
    pub fn global_mean_spatial(&mut self, x: Var) -> Var {
        let sx = self.val(x).shape().to_vec();
        let rest: usize = sx[2..].iter().product();
        let (batch, ch) = (sx[0], sx[1]);
        let inv = T::one() / T::of_usize(rest);
        let mut data = vec![T::zero(); batch * ch];
        for i in 0..batch * ch {
            let mut acc = T::zero();
            for &v in &self.val(x).data()[i * rest..(i + 1) * rest] {
                acc += v;
            }
            data[i] = acc * inv;
        }
        let v = Tensor::new(&[batch, ch], data);
        self.push(
            v,
            Some(Box::new(move |_t, g, grads| {
                let mut gx = vec![T::zero(); batch * ch * rest];
                for i in 0..batch * ch {
                    let gv = g.data()[i] * inv;
                    for v in &mut gx[i * rest..(i + 1) * rest] {
                        *v = gv;
                    }
                }
                grads.accum(x, Tensor::new(&sx, gx));
            })),
        )
    }

    // ---- reductions & objectives ------------------------------------------

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.val(a).numel();
        let inv = T::one() / T::of_usize(n);
        let shape = self.val(a).shape().to_vec();
        let v = Tensor::scalar(self.val(a).mean());
        self.push(
            v,
            Some(Box::new(move |_t, g, grads| {
                let gv = g.item() * inv;
                grads.accum(a, Tensor::full(&shape, gv));
            })),
        )
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let mut acc = T::zero();
        for &(v, w) in terms {
            acc += self.val(v).item() * w;
        }
        let terms = terms.to_vec();
        self.push(
            Tensor::scalar(acc),
            Some(Box::new(move |_t, g, grads| {
                for &(v, w) in &terms {
                    grads.accum(v, Tensor::scalar(g.item() * w));
                }
            })),
        )
    }

    /// Mean absolute difference.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.val(a).shape(), self.val(b).shape());
        let n = self.val(a).numel();
        let inv = T::one() / T::of_usize(n);
        let mut acc = T::zero();
        for (&x, &y) in self.val(a).data().iter().zip(self.val(b).data()) {
            acc += (x - y).abs();
        }
        self.push(
            Tensor::scalar(acc * inv),
            Some(Box::new(move |t, g, grads| {
                let gv = g.item() * inv;
                let diff_sign = t.val(a).zip_map(t.val(b), |x, y| {
                    if x > y {
                        gv
                    } else if x < y {
                        -gv
                    } else {
                        T::zero()
                    }
                });
                grads.accum(b, diff_sign.map(|v| -v));
                grads.accum(a, diff_sign);
            })),
        )
    }

    /// Mean squared error.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.val(a).shape(), self.val(b).shape());
        let n = self.val(a).numel();
        let inv = T::one() / T::of_usize(n);
        let mut acc = T::zero();
        for (&x, &y) in self.val(a).data().iter().zip(self.val(b).data()) {
            acc += (x - y) * (x - y);
        }
        self.push(
            Tensor::scalar(acc * inv),
            Some(Box::new(move |t, g, grads| {
                let two = T::of_f64(2.0);
                let gv = g.item() * inv * two;
                let d = t.val(a).zip_map(t.val(b), |x, y| gv * (x - y));
                grads.accum(b, d.map(|v| -v));
                grads.accum(a, d);
            })),
        )
    }

    /// Mean over elements of `0.5 (mu^2 + exp(logvar) - logvar - 1)`.
    pub fn kl_loss(&mut self, mu: Var, logvar: Var) -> Var {
        assert_eq!(self.val(mu).shape(), self.val(logvar).shape());
        let n = self.val(mu).numel();
        let inv = T::one() / T::of_usize(n);
        let half = T::of_f64(0.5);
        let mut acc = T::zero();
        for (&m, &lv) in self.val(mu).data().iter().zip(self.val(logvar).data()) {
            acc += half * (m * m + lv.exp() - lv - T::one());
        }
        self.push(
            Tensor::scalar(acc * inv),
            Some(Box::new(move |t, g, grads| {
                let gv = g.item() * inv;
                grads.accum(mu, t.val(mu).map(|m| gv * m));
                grads.accum(logvar, t.val(logvar).map(|lv| gv * T::of_f64(0.5) * (lv.exp() - T::one())));
            })),
        )
    }

    /// Mean per-voxel Euclidean norm of a `[B, D, spatial...]` displacement.
    pub fn disp_magnitude_loss(&mut self, u: Var) -> Var {
        let s = self.val(u).shape().to_vec();
        let (batch, d) = (s[0], s[1]);
        let voxels: usize = s[2..].iter().product();
        let inv = T::one() / T::of_usize(batch * voxels);
        let data = self.val(u).data();
        let mut acc = T::zero();
        for i in 0..batch {
            for p in 0..voxels {
                let mut sq = T::zero();
                for axis in 0..d {
                    let v = data[(i * d + axis) * voxels + p];
                    sq += v * v;
                }
                acc += sq.sqrt();
            }
        }
        self.push(
            Tensor::scalar(acc * inv),
            Some(Box::new(move |t, g, grads| {
                let gv = g.item() * inv;
                let data = t.val(u).data();
                let mut gu = vec![T::zero(); data.len()];
                for i in 0..batch {
                    for p in 0..voxels {
                        let mut sq = T::zero();
                        for axis in 0..d {
                            let v = data[(i * d + axis) * voxels + p];
                            sq += v * v;
                        }
                        let norm = sq.sqrt();
                        if norm > T::zero() {
                            for axis in 0..d {
                                let idx = (i * d + axis) * voxels + p;
                                gu[idx] = gv * data[idx] / norm;
                            }
                        }
                    }
                }
                grads.accum(u, Tensor::new(t.val(u).shape(), gu));
            })),
        )
    }

    /// Mean per-voxel Frobenius norm of forward-difference gradients of a
    /// `[B, D, spatial...]` displacement; boundary differences are zero.
    pub fn disp_gradient_loss(&mut self, u: Var) -> Var {
        let s = self.val(u).shape().to_vec();
        let (batch, d) = (s[0], s[1]);
        let spatial = s[2..].to_vec();
        let voxels: usize = spatial.iter().product();
        let mut strides = vec![1usize; spatial.len()];
        for i in (0..spatial.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * spatial[i + 1];
        }
        let inv = T::one() / T::of_usize(batch * voxels);
        let per_voxel_norms = {
            let spatial = spatial.clone();
            let strides = strides.clone();
            move |data: &[T]| -> Vec<T> {
                let mut norms = vec![T::zero(); batch * voxels];
                for i in 0..batch {
                    for p in 0..voxels {
                        let mut sq = T::zero();
                        for comp in 0..d {
                            let base = (i * d + comp) * voxels;
                            let v = data[base + p];
                            for (axis, &sp) in spatial.iter().enumerate() {
                                if p / strides[axis] % sp + 1 < sp {
                                    let diff = data[base + p + strides[axis]] - v;
                                    sq += diff * diff;
                                }
                            }
                        }
                        norms[i * voxels + p] = sq.sqrt();
                    }
                }
                norms
            }
        };
        let norms = per_voxel_norms(self.val(u).data());
        let mut acc = T::zero();
        for &nv in &norms {
            acc += nv;
        }
        let spatial_b = spatial.clone();
        let strides_b = strides.clone();
        self.push(
            Tensor::scalar(acc * inv),
            Some(Box::new(move |t, g, grads| {
                let gv = g.item() * inv;
                let data = t.val(u).data();
                let norms = per_voxel_norms(data);
                let mut gu = vec![T::zero(); data.len()];
                for i in 0..batch {
                    for p in 0..voxels {
                        let norm = norms[i * voxels + p];
                        if norm <= T::zero() {
                            continue;
                        }
                        let coef = gv / norm;
                        for comp in 0..d {
                            let base = (i * d + comp) * voxels;
                            for (axis, &sp) in spatial_b.iter().enumerate() {
                                if p / strides_b[axis] % sp + 1 < sp {
                                    let diff = data[base + p + strides_b[axis]] - data[base + p];
                                    gu[base + p + strides_b[axis]] += coef * diff;
                                    gu[base + p] -= coef * diff;
                                }
                            }
                        }
                    }
                }
                grads.accum(u, Tensor::new(t.val(u).shape(), gu));
            })),
        )
    }

    /// Binary cross-entropy with logits against constant targets in {0, 1}:
    /// `mean(max(x, 0) - x y + ln(1 + exp(-|x|)))`.
    pub fn bce_with_logits_loss(&mut self, logits: Var, targets: Var) -> Var {
        assert_eq!(self.val(logits).shape(), self.val(targets).shape());
        let n = self.val(logits).numel();
        let inv = T::one() / T::of_usize(n);
        let mut acc = T::zero();
        for (&x, &y) in self.val(logits).data().iter().zip(self.val(targets).data()) {
            acc += x.max(T::zero()) - x * y + (T::one() + (-x.abs()).exp()).ln();
        }
        self.push(
            Tensor::scalar(acc * inv),
            Some(Box::new(move |t, g, grads| {
                let gv = g.item() * inv;
                let d = t.val(logits).zip_map(t.val(targets), |x, y| {
                    let s = T::one() / (T::one() + (-x).exp());
                    gv * (s - y)
                });
                grads.accum(logits, d);
            })),
        )
    }

    /// Hinge discriminator loss: `mean(relu(1 - real)) + mean(relu(1 + fake))`.
    pub fn hinge_disc_loss(&mut self, real: Var, fake: Var) -> Var {
        let one = T::one();
        let nr = self.val(real).numel();
        let nf = self.val(fake).numel();
        let (ir, if_) = (T::one() / T::of_usize(nr), T::one() / T::of_usize(nf));
        let mut acc = T::zero();
        for &x in self.val(real).data() {
            acc += (one - x).max(T::zero()) * ir;
        }
        for &x in self.val(fake).data() {
            acc += (one + x).max(T::zero()) * if_;
        }
        self.push(
            Tensor::scalar(acc),
            Some(Box::new(move |t, g, grads| {
                let gi = g.item();
                grads.accum(
                    real,
                    t.val(real).map(|x| if T::one() - x > T::zero() { -gi * ir } else { T::zero() }),
                );
                grads.accum(
                    fake,
                    t.val(fake).map(|x| if T::one() + x > T::zero() { gi * if_ } else { T::zero() }),
                );
            })),
        )
    }

    /// Hinge generator loss: `-mean(fake)`.
    pub fn hinge_gen_loss(&mut self, fake: Var) -> Var {
        let n = self.val(fake).numel();
        let inv = T::one() / T::of_usize(n);
        let v = Tensor::scalar(-self.val(fake).mean());
        self.push(
            v,
            Some(Box::new(move |t, g, grads| {
                let gv = -g.item() * inv;
                grads.accum(fake, Tensor::full(t.val(fake).shape(), gv));
            })),
        )
    }
}

#[cfg(test)]
pub(crate) mod gradcheck {
    use super::*;

    /// Central finite differences of `f` w.r.t. input `idx`, compared to the
    /// tape gradient; `f` rebuilds the graph from plain tensors each call.
    pub fn check<F>(inputs: &[Tensor<f64>], idx: usize, f: F, step: f64, tol: f64)
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = f(&mut tape, &vars);
        let grads = tape.backward(root);
        let analytic = grads.get(vars[idx]).expect("missing gradient").clone();

        let eval = |perturbed: &Tensor<f64>| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(i, t)| tape.leaf(if i == idx { perturbed.clone() } else { t.clone() }))
                .collect();
            let root = f(&mut tape, &vars);
            tape.val(root).item()
        };

        let mut worst = 0.0f64;
        for i in 0..inputs[idx].numel() {
            let mut plus = inputs[idx].clone();
            plus.data_mut()[i] += step;
            let mut minus = inputs[idx].clone();
            minus.data_mut()[i] -= step;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
            let an = analytic.data()[i];
            // relative error with an absolute floor so near-zero gradients
            // are compared at the loss scale rather than amplified
            let denom = an.abs().max(fd.abs()).max(1e-3);
            let rel = (an - fd).abs() / denom;
            worst = worst.max(rel);
            assert!(
                rel < tol,
                "grad mismatch at input {idx} elem {i}: analytic {an}, fd {fd}, rel {rel}"
            );
        }
        let _ = worst;
    }
}
