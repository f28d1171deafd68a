use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point element type of tensors.
///
/// Implemented for `f32` (training) and `f64` (gradient checks). The only
/// non-`num_traits` requirement is a dense matrix product, dispatched to the
/// matching `matrixmultiply` kernel.
pub trait Scalar:
    'static
    + Float
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Default
    + Debug
    + Display
    + LowerExp
    + Send
    + Sync
{
    /// `c = alpha * a·b + beta * c` over strided row/column layouts.
    ///
    /// `a` is `m×k`, `b` is `k×n`, `c` is `m×n`; strides are in elements.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        beta: Self,
        c: &mut [Self],
        rsc: usize,
        csc: usize,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn from_usize_lossy(v: usize) -> Self {
        Self::from_usize(v).expect("count representable")
    }
}

macro_rules! impl_scalar {
    ($ty:ty, $kernel:ident) => {
        impl Scalar for $ty {
            #[inline]
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                beta: Self,
                c: &mut [Self],
                rsc: usize,
                csc: usize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                // Bounds: the last element each operand touches must be in range.
                debug_assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
                debug_assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
                debug_assert!((m - 1) * rsc + (n - 1) * csc < c.len());
                // SAFETY: the strided extents were checked against the slice
                // lengths above (and by every caller in this crate).
                unsafe {
                    matrixmultiply::$kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        rsc as isize,
                        csc as isize,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, sgemm);
impl_scalar!(f64, dgemm);
