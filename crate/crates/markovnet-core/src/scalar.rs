//! Scalar abstraction: every real-valued computation in the crate is generic
//! over [`Real`], implemented for `f32` and `f64`.
//!
//! The trait also routes dense matrix products to `matrixmultiply`'s
//! precision-specific kernels so that generic code keeps full GEMM speed.
//! Strided operands let callers multiply by a transpose without copying.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal or accumulator.
    fn of(x: f64) -> Self;

    /// Widen to `f64` for reporting and cross-precision accumulation.
    fn as_f64(self) -> f64;

    /// `c = alpha * op(a) · op(b) + beta * c` where `op(a)` is `m×k` and
    /// `op(b)` is `k×n`, each operand described by (row stride, col stride)
    /// over its backing slice, and `c` is written row-major `m×n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
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
    );

    /// Row-major convenience wrapper: `c[m×n] = alpha·a[m×k]·b[k×n] + beta·c`.
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
        Self::gemm_strided(m, k, n, alpha, a, k, 1, b, n, 1, beta, c);
    }
}

fn check_operand(len: usize, m: usize, k: usize, rs: usize, cs: usize, name: &str) {
    if m == 0 || k == 0 {
        return;
    }
    let max = (m - 1) * rs + (k - 1) * cs;
    assert!(max < len, "gemm operand {name} out of bounds: index {max} >= len {len}");
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            #[inline(always)]
            fn of(x: f64) -> Self {
                x as $t
            }

            #[inline(always)]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm_strided(
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
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                check_operand(a.len(), m, k, rsa, csa, "a");
                check_operand(b.len(), k, n, rsb, csb, "b");
                check_operand(c.len(), m, n, n, 1, "c");
                if k == 0 {
                    for v in c[..m * n].iter_mut() {
                        *v *= beta;
                    }
                    return;
                }
                unsafe {
                    $gemm(
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
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f64, matrixmultiply::dgemm);
impl_real!(f32, matrixmultiply::sgemm);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.25 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut c = vec![0.0f64; m * n];
        f64::gemm(m, k, n, 1.0, &a, &b, 0.0, &mut c);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                assert!((c[i * n + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn strided_gemm_computes_transposed_product() {
        // aᵀ·b with a stored 2x3 row-major, so op(a) is 3x2.
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0f64, 0.0, 0.0, 1.0];
        let mut c = vec![0.0f64; 6];
        f64::gemm_strided(3, 2, 2, 1.0, &a, 1, 3, &b, 2, 1, 0.0, &mut c);
        assert_eq!(c, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn gemm_accumulates_with_beta() {
        let a = [1.0f32, 2.0];
        let b = [3.0f32, 4.0];
        let mut c = [10.0f32];
        f32::gemm(1, 2, 1, 1.0, &a, &b, 1.0, &mut c);
        assert_eq!(c[0], 10.0 + 3.0 + 8.0);
    }
}
