//! Numerical kernels shared by the encoder and the projection heads.
//!
//! Everything is generic over [`Real`] so the same code runs in `f32` for
//! training and scoring and in `f64` for gradient checks.

mod adam;
mod matrix;
mod ops;

pub use adam::{adam_step, AdamState};
pub use matrix::{gemm, DenseMatrix};
pub use ops::{
    dot, elu, elu_grad_from_output, inverted_dropout, leaky_relu, leaky_relu_grad, linear,
    linear_backward, neighborhood_softmax, relu, sample_dropout_scales, softmax_backward,
    softmax_in_place, xavier_uniform_init,
};

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar the kernels run on (`f32` or `f64`).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// `C = alpha * A * B + beta * C` with arbitrary row/column strides.
    ///
    /// # Safety
    /// Same contract as [`matrixmultiply::sgemm`]: every strided access must
    /// be in bounds of the pointed-to buffers and `c` must not alias `a`/`b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
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

    /// [`elu`] over a slice, in place.
    fn elu_in_place(values: &mut [Self]) {
        for v in values {
            *v = elu(*v);
        }
    }

    #[inline]
    fn lit(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite literal")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

/// `exp(x) - 1` for `x <= 0` without a libm call: Cody-Waite reduction to
/// `|r| <= ln2 / 2`, a degree-7 Taylor polynomial for `expm1(r)`, then
/// `2^n · expm1(r) + (2^n - 1)`. Within a few ulp of `f32::exp_m1`.
#[inline(always)]
fn expm1_nonpositive(x: f32) -> f32 {
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    const ROUND: f32 = 12_582_912.0; // 1.5 · 2^23
    let x = x.max(-87.0);
    let n = (x * std::f32::consts::LOG2_E + ROUND) - ROUND;
    let r = (x - n * LN2_HI) - n * LN2_LO;
    let poly = 0.5
        + r * (1.0 / 6.0
            + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0 + r * (1.0 / 5040.0)))));
    let p = r + r * r * poly;
    let scale = f32::from_bits(((n as i32 + 127) << 23) as u32);
    scale * p + (scale - 1.0)
}

impl Real for f32 {
    fn elu_in_place(values: &mut [f32]) {
        for v in values {
            let x = *v;
            let neg = expm1_nonpositive(x.min(0.0));
            *v = if x >= 0.0 { x } else { neg };
        }
    }

    #[inline]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    #[inline]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}
