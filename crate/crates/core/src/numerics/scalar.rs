use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of every matrix, network and optimizer in the crate.
///
/// Implemented for `f32` and `f64`. The dense product goes through
/// `matrixmultiply`, which provides packed kernels for both widths.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * a·b + beta * c` over strided row/column layouts.
    ///
    /// `a` is `m×k`, `b` is `k×n`, `c` is `m×n`. Strides are in elements.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    /// Converts an `f64` literal. Panics only for values the type cannot represent at all.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn span(rows: usize, cols: usize, (rs, cs): (isize, isize)) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
}

macro_rules! impl_scalar {
    ($t:ty, $kernel:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                assert!(a_strides.0 >= 0 && a_strides.1 >= 0);
                assert!(b_strides.0 >= 0 && b_strides.1 >= 0);
                assert!(c_strides.0 >= 0 && c_strides.1 >= 0);
                assert!(a.len() >= span(m, k, a_strides), "gemm: lhs buffer too short");
                assert!(b.len() >= span(k, n, b_strides), "gemm: rhs buffer too short");
                assert!(c.len() >= span(m, n, c_strides), "gemm: output buffer too short");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every index the kernel touches lies inside the spans asserted above.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f64, matrixmultiply::dgemm);
impl_scalar!(f32, matrixmultiply::sgemm);
