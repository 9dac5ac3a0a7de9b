//! N-dimensional convolution (2D/3D spatial) and nearest-neighbor upsampling.
//!
//! Convolution lowers to a single gemm over the whole batch: the im2col
//! buffer concatenates samples along its column axis, which keeps the
//! matrices large enough to saturate the gemm kernels on a single core.

use super::{gemm, Tape, Var};
use crate::tensor::Tensor;
use crate::Scalar;

fn out_size(s: usize, k: usize, stride: usize, pad: usize) -> usize {
    (s + 2 * pad - k) / stride + 1
}

/// Scatter one sample's patches into the batched column matrix.
/// `col` has `ncols` columns total; this sample's block starts at `col0`.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    col: &mut [T],
    cin: usize,
    spatial: &[usize],
    k: usize,
    stride: usize,
    pad: usize,
    ncols: usize,
    col0: usize,
) {
    match spatial.len() {
        2 => {
            let (h, w) = (spatial[0], spatial[1]);
            let (oh, ow) = (out_size(h, k, stride, pad), out_size(w, k, stride, pad));
            for ci in 0..cin {
                let xin = &x[ci * h * w..(ci + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let row = (ci * k + ky) * k + kx;
                        let dst = &mut col[row * ncols + col0..row * ncols + col0 + oh * ow];
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src_row = &xin[iy as usize * w..(iy as usize + 1) * w];
                            let drow = &mut dst[oy * ow..(oy + 1) * ow];
                            for ox in 0..ow {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    drow[ox] = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        3 => {
            let (d, h, w) = (spatial[0], spatial[1], spatial[2]);
            let (od, oh, ow) = (
                out_size(d, k, stride, pad),
                out_size(h, k, stride, pad),
                out_size(w, k, stride, pad),
            );
            for ci in 0..cin {
                let xin = &x[ci * d * h * w..(ci + 1) * d * h * w];
                for kz in 0..k {
                    for ky in 0..k {
                        for kx in 0..k {
                            let row = ((ci * k + kz) * k + ky) * k + kx;
                            let dst = &mut col[row * ncols + col0..row * ncols + col0 + od * oh * ow];
                            for oz in 0..od {
                                let iz = (oz * stride + kz) as isize - pad as isize;
                                if iz < 0 || iz >= d as isize {
                                    continue;
                                }
                                for oy in 0..oh {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let src_row = &xin[(iz as usize * h + iy as usize) * w..];
                                    let drow =
                                        &mut dst[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                                    for ox in 0..ow {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix >= 0 && ix < w as isize {
                                            drow[ox] = src_row[ix as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        r => panic!("conv supports 2D/3D spatial, got rank {r}"),
    }
}

/// Adjoint of [`im2col`]: accumulate one sample's column block back into it.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    col: &[T],
    x: &mut [T],
    cin: usize,
    spatial: &[usize],
    k: usize,
    stride: usize,
    pad: usize,
    ncols: usize,
    col0: usize,
) {
    match spatial.len() {
        2 => {
            let (h, w) = (spatial[0], spatial[1]);
            let (oh, ow) = (out_size(h, k, stride, pad), out_size(w, k, stride, pad));
            for ci in 0..cin {
                let xout = &mut x[ci * h * w..(ci + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let row = (ci * k + ky) * k + kx;
                        let src = &col[row * ncols + col0..row * ncols + col0 + oh * ow];
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let srow = &src[oy * ow..(oy + 1) * ow];
                            for ox in 0..ow {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    xout[iy as usize * w + ix as usize] += srow[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        3 => {
            let (d, h, w) = (spatial[0], spatial[1], spatial[2]);
            let (od, oh, ow) = (
                out_size(d, k, stride, pad),
                out_size(h, k, stride, pad),
                out_size(w, k, stride, pad),
            );
            for ci in 0..cin {
                let xout = &mut x[ci * d * h * w..(ci + 1) * d * h * w];
                for kz in 0..k {
                    for ky in 0..k {
                        for kx in 0..k {
                            let row = ((ci * k + kz) * k + ky) * k + kx;
                            let src = &col[row * ncols + col0..row * ncols + col0 + od * oh * ow];
                            for oz in 0..od {
                                let iz = (oz * stride + kz) as isize - pad as isize;
                                if iz < 0 || iz >= d as isize {
                                    continue;
                                }
                                for oy in 0..oh {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let srow = &src[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                                    for ox in 0..ow {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix >= 0 && ix < w as isize {
                                            xout[(iz as usize * h + iy as usize) * w
                                                + ix as usize] += srow[ox];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        r => panic!("conv supports 2D/3D spatial, got rank {r}"),
    }
}

impl<T: Scalar> Tape<T> {
    /// Convolution over `[B, Cin, spatial...]` with weight `[Cout, Cin, k...]`
    /// and bias `[Cout]`; isotropic kernel, stride and zero padding.
    pub fn conv(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let x_shape = self.val(x).shape().to_vec();
        let w_shape = self.val(w).shape().to_vec();
        let batch = x_shape[0];
        let cin = x_shape[1];
        let spatial = x_shape[2..].to_vec();
        assert_eq!(w_shape[1], cin, "conv weight cin mismatch");
        let cout = w_shape[0];
        let k = w_shape[2];
        assert!(w_shape[2..].iter().all(|&ks| ks == k), "isotropic kernels only");
        assert_eq!(w_shape.len() - 2, spatial.len());
        let out_spatial: Vec<usize> =
            spatial.iter().map(|&s| out_size(s, k, stride, pad)).collect();
        let krows = cin * k.pow(spatial.len() as u32);
        let ocount: usize = out_spatial.iter().product();
        let ncols = batch * ocount;
        let x_per: usize = cin * spatial.iter().product::<usize>();
        assert_eq!(self.val(b).numel(), cout);

        let mut col = vec![T::zero(); krows * ncols];
        for i in 0..batch {
            im2col(&self.val(x).data()[i * x_per..], &mut col, cin, &spatial, k, stride, pad, ncols, i * ocount);
        }
        let mut y_all = vec![T::zero(); cout * ncols];
        gemm(cout, krows, ncols, T::one(), self.val(w).data(), false, &col, false, T::zero(), &mut y_all);

        let mut out_shape = vec![batch, cout];
        out_shape.extend_from_slice(&out_spatial);
        let bias = self.val(b).data();
        let mut out = vec![T::zero(); batch * cout * ocount];
        for i in 0..batch {
            for co in 0..cout {
                let src = &y_all[co * ncols + i * ocount..co * ncols + (i + 1) * ocount];
                let dst = &mut out[(i * cout + co) * ocount..(i * cout + co + 1) * ocount];
                let bv = bias[co];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bv;
                }
            }
        }

        self.push(
            Tensor::new(&out_shape, out),
            Some(Box::new(move |t, g, grads| {
                let xd = t.val(x).data();
                let wd = t.val(w).data();
                let gd = g.data();
                // gather upstream grads into [cout, ncols]
                let mut gy = vec![T::zero(); cout * ncols];
                for i in 0..batch {
                    for co in 0..cout {
                        gy[co * ncols + i * ocount..co * ncols + (i + 1) * ocount]
                            .copy_from_slice(&gd[(i * cout + co) * ocount..(i * cout + co + 1) * ocount]);
                    }
                }
                let mut col = vec![T::zero(); krows * ncols];
                for i in 0..batch {
                    im2col(&xd[i * x_per..], &mut col, cin, &spatial, k, stride, pad, ncols, i * ocount);
                }
                let mut gw = vec![T::zero(); wd.len()];
                gemm(cout, ncols, krows, T::one(), &gy, false, &col, true, T::zero(), &mut gw);
                let mut gb = vec![T::zero(); cout];
                for co in 0..cout {
                    let mut acc = T::zero();
                    for &v in &gy[co * ncols..(co + 1) * ncols] {
                        acc += v;
                    }
                    gb[co] = acc;
                }
                // reuse the col buffer for the input-gradient columns
                let mut dcol = col;
                gemm(krows, cout, ncols, T::one(), wd, true, &gy, false, T::zero(), &mut dcol);
                let mut gx = vec![T::zero(); xd.len()];
                for i in 0..batch {
                    col2im(&dcol, &mut gx[i * x_per..(i + 1) * x_per], cin, &spatial, k, stride, pad, ncols, i * ocount);
                }
                grads.accum(x, Tensor::new(t.val(x).shape(), gx));
                grads.accum(w, Tensor::new(t.val(w).shape(), gw));
                grads.accum(b, Tensor::new(&[cout], gb));
            })),
        )
    }

    /// Nearest-neighbor x2 upsampling of every spatial dim.
    pub fn upsample_nearest2(&mut self, x: Var) -> Var {
        let shape = self.val(x).shape().to_vec();
        let (batch, ch) = (shape[0], shape[1]);
        let spatial = shape[2..].to_vec();
        let rank = spatial.len();
        assert!(rank == 2 || rank == 3, "upsample supports 2D/3D");
        let out_spatial: Vec<usize> = spatial.iter().map(|&s| s * 2).collect();
        let mut out_shape = vec![batch, ch];
        out_shape.extend_from_slice(&out_spatial);
        let in_vox: usize = spatial.iter().product();
        let out_vox: usize = out_spatial.iter().product();
        let mut out = vec![T::zero(); batch * ch * out_vox];
        {
            let xd = self.val(x).data();
            for bc in 0..batch * ch {
                let src = &xd[bc * in_vox..(bc + 1) * in_vox];
                let dst = &mut out[bc * out_vox..(bc + 1) * out_vox];
                if rank == 2 {
                    let (h, w) = (spatial[0], spatial[1]);
                    for oy in 0..2 * h {
                        for ox in 0..2 * w {
                            dst[oy * 2 * w + ox] = src[(oy / 2) * w + ox / 2];
                        }
                    }
                } else {
                    let (d, h, w) = (spatial[0], spatial[1], spatial[2]);
                    for oz in 0..2 * d {
                        for oy in 0..2 * h {
                            for ox in 0..2 * w {
                                dst[(oz * 2 * h + oy) * 2 * w + ox] =
                                    src[((oz / 2) * h + oy / 2) * w + ox / 2];
                            }
                        }
                    }
                }
            }
        }
        let spatial_c = spatial.clone();
        self.push(
            Tensor::new(&out_shape, out),
            Some(Box::new(move |t, g, grads| {
                let gd = g.data();
                let mut gx = vec![T::zero(); batch * ch * in_vox];
                for bc in 0..batch * ch {
                    let src = &gd[bc * out_vox..(bc + 1) * out_vox];
                    let dst = &mut gx[bc * in_vox..(bc + 1) * in_vox];
                    if rank == 2 {
                        let (h, w) = (spatial_c[0], spatial_c[1]);
                        for oy in 0..2 * h {
                            for ox in 0..2 * w {
                                dst[(oy / 2) * w + ox / 2] += src[oy * 2 * w + ox];
                            }
                        }
                    } else {
                        let (d, h, w) = (spatial_c[0], spatial_c[1], spatial_c[2]);
                        for oz in 0..2 * d {
                            for oy in 0..2 * h {
                                for ox in 0..2 * w {
                                    dst[((oz / 2) * h + oy / 2) * w + ox / 2] +=
                                        src[(oz * 2 * h + oy) * 2 * w + ox];
                                }
                            }
                        }
                    }
                }
                grads.accum(x, Tensor::new(t.val(x).shape(), gx));
            })),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::check;
    use super::super::Tape;
    use crate::rng::{fill_standard_normal, substream};
    use crate::tensor::Tensor;

    fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = substream(seed, "conv.test", 0);
        let mut data = vec![0.0; shape.iter().product()];
        fill_standard_normal(&mut rng, &mut data);
        Tensor::new(shape, data)
    }

    #[test]
    fn conv2d_matches_direct_convolution() {
        let x = randn(&[2, 2, 5, 5], 1);
        let w = randn(&[3, 2, 3, 3], 2);
        let b = randn(&[3], 3);
        let mut t = Tape::new();
        let (vx, vw, vb) = (t.leaf(x.clone()), t.leaf(w.clone()), t.leaf(b.clone()));
        let y = t.conv(vx, vw, vb, 1, 1);
        assert_eq!(t.val(y).shape(), &[2, 3, 5, 5]);
        for s in 0..2usize {
            for co in 0..3usize {
                for oy in 0..5usize {
                    for ox in 0..5usize {
                        let mut acc = b.data()[co];
                        for ci in 0..2usize {
                            for ky in 0..3usize {
                                for kx in 0..3usize {
                                    let iy = oy as isize + ky as isize - 1;
                                    let ix = ox as isize + kx as isize - 1;
                                    if iy >= 0 && iy < 5 && ix >= 0 && ix < 5 {
                                        acc += x.data()
                                            [((s * 2 + ci) * 5 + iy as usize) * 5 + ix as usize]
                                            * w.data()[((co * 2 + ci) * 3 + ky) * 3 + kx];
                                    }
                                }
                            }
                        }
                        let got = t.val(y).data()[((s * 3 + co) * 5 + oy) * 5 + ox];
                        assert!((got - acc).abs() < 1e-10, "at {s},{co},{oy},{ox}");
                    }
                }
            }
        }
    }

    #[test]
    fn conv2d_strided_shape_and_grads() {
        let x = randn(&[2, 3, 6, 6], 4);
        let w = randn(&[4, 3, 3, 3], 5);
        let b = randn(&[4], 6);
        for idx in 0..3 {
            check(&[x.clone(), w.clone(), b.clone()], idx, |t, v| {
                let y = t.conv(v[0], v[1], v[2], 2, 1);
                assert_eq!(t.val(y).shape(), &[2, 4, 3, 3]);
                let z = t.mul(y, y);
                t.mean_all(z)
            }, 1e-5, 1e-5);
        }
    }

    #[test]
    fn conv3d_shape_and_grads() {
        let x = randn(&[1, 2, 4, 4, 4], 7);
        let w = randn(&[2, 2, 3, 3, 3], 8);
        let b = randn(&[2], 9);
        for idx in 0..3 {
            check(&[x.clone(), w.clone(), b.clone()], idx, |t, v| {
                let y = t.conv(v[0], v[1], v[2], 1, 1);
                assert_eq!(t.val(y).shape(), &[1, 2, 4, 4, 4]);
                let z = t.mul(y, y);
                t.mean_all(z)
            }, 1e-5, 1e-5);
        }
    }

    #[test]
    fn conv_4x4_kernel_stride2() {
        // discriminator-style conv: k=4, stride 2, pad 1 halves the spatial dims
        let x = randn(&[1, 1, 8, 8], 12);
        let w = randn(&[2, 1, 4, 4], 13);
        let b = randn(&[2], 14);
        check(&[x, w, b], 1, |t, v| {
            let y = t.conv(v[0], v[1], v[2], 2, 1);
            assert_eq!(t.val(y).shape(), &[1, 2, 4, 4]);
            let z = t.mul(y, y);
            t.mean_all(z)
        }, 1e-5, 1e-5);
    }

    #[test]
    fn upsample_nearest_and_grads() {
        let x = randn(&[1, 2, 3, 3], 10);
        let mut t = Tape::new();
        let vx = t.leaf(x.clone());
        let y = t.upsample_nearest2(vx);
        assert_eq!(t.val(y).shape(), &[1, 2, 6, 6]);
        assert_eq!(t.val(y).data()[0], x.data()[0]);
        assert_eq!(t.val(y).data()[1], x.data()[0]);
        check(&[x], 0, |t, v| {
            let y = t.upsample_nearest2(v[0]);
            let z = t.mul(y, y);
            t.mean_all(z)
        }, 1e-5, 1e-6);
        let x3 = randn(&[1, 1, 2, 2, 2], 11);
        check(&[x3], 0, |t, v| {
            let y = t.upsample_nearest2(v[0]);
            let z = t.mul(y, y);
            t.mean_all(z)
        }, 1e-5, 1e-6);
    }
}
