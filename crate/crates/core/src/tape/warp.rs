//! Differentiable warping: the tape op over the shared sampling kernels.

use super::{Tape, Var};
use crate::fields::{warp_backward_kernel, warp_forward_kernel};
use crate::tensor::Tensor;
use crate::Scalar;

impl<T: Scalar> Tape<T> {
    /// Warp `img` `[B, C, spatial...]` by displacement `disp` `[B, D, spatial...]`,
    /// multilinear with border clamp; differentiable in both arguments.
    pub fn warp(&mut self, img: Var, disp: Var) -> Var {
        let ishape = self.val(img).shape().to_vec();
        let dshape = self.val(disp).shape().to_vec();
        assert_eq!(ishape[0], dshape[0], "batch mismatch");
        assert_eq!(&ishape[2..], &dshape[2..], "spatial mismatch");
        assert_eq!(dshape[1], dshape[2..].len(), "displacement channels == spatial rank");
        let batch = ishape[0];
        let ch = ishape[1];
        let spatial = ishape[2..].to_vec();
        let vox: usize = spatial.iter().product();
        let d = spatial.len();

        let mut out = vec![T::zero(); batch * ch * vox];
        for b in 0..batch {
            warp_forward_kernel(
                &self.val(img).data()[b * ch * vox..(b + 1) * ch * vox],
                &self.val(disp).data()[b * d * vox..(b + 1) * d * vox],
                &mut out[b * ch * vox..(b + 1) * ch * vox],
                ch,
                &spatial,
            );
        }
        self.push(
            Tensor::new(&ishape, out),
            Some(Box::new(move |t, g, grads| {
                let imgd = t.val(img).data();
                let dispd = t.val(disp).data();
                let mut gi = vec![T::zero(); imgd.len()];
                let mut gd = vec![T::zero(); dispd.len()];
                for b in 0..batch {
                    warp_backward_kernel(
                        &imgd[b * ch * vox..(b + 1) * ch * vox],
                        &dispd[b * d * vox..(b + 1) * d * vox],
                        &g.data()[b * ch * vox..(b + 1) * ch * vox],
                        &mut gi[b * ch * vox..(b + 1) * ch * vox],
                        &mut gd[b * d * vox..(b + 1) * d * vox],
                        ch,
                        &spatial,
                    );
                }
                grads.accum(img, Tensor::new(t.val(img).shape(), gi));
                grads.accum(disp, Tensor::new(t.val(disp).shape(), gd));
            })),
        )
    }
}
