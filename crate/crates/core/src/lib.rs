//! Generative modeling of anatomy by deforming a learned template.
//!
//! The crate trains a two-stage latent diffusion pipeline where the
//! autoencoder is a registration network: the encoder embeds an image
//! together with a learned template, the decoder emits a dense
//! displacement field, and synthetic images are produced by warping the
//! template with sampled fields. A parametric phantom dataset with
//! ground-truth labels and a metrics harness (diversity, attribute
//! adherence, regional-volume effect sizes) round out the pipeline.
//!
//! All numerics are generic over the scalar type through [`Scalar`];
//! training runs in `f32`, gradient verification in `f64`.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

pub mod diffusion;
pub mod eval;
pub mod fields;
pub mod linalg;
pub mod losses;
pub mod nets;
pub mod phantoms;
pub mod pipelines;
pub mod rng;
pub mod tape;
pub mod tensor;

/// Floating-point scalar usable everywhere in the crate: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Default + Debug + Display + Send + Sync + 'static
{
    /// Dense matrix multiply `c = alpha * a·b + beta * c` with explicit strides.
    ///
    /// # Safety
    /// Pointers must reference buffers valid for the given dimensions and strides.
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of_f64(v: f64) -> Self {
        Self::from_f64(v).expect("f64 conversion")
    }

    fn of_usize(v: usize) -> Self {
        Self::from_usize(v).expect("usize conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("to f64")
    }
}

impl Scalar for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Single-precision aliases; the training pipelines run on these.
pub type Volume32 = fields::Volume<f32>;
pub type DeformationField32 = fields::DeformationField<f32>;
pub type Latent32 = nets::Latent<f32>;
pub type Tensor32 = tensor::Tensor<f32>;

/// Double-precision aliases, used by the gradient-verification suites.
pub type Volume64 = fields::Volume<f64>;
pub type DeformationField64 = fields::DeformationField<f64>;
pub type Tensor64 = tensor::Tensor<f64>;
