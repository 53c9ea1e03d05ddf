//! Floating-point abstraction shared by the network, metric and survival code.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Matrix operand: a slice plus its row and column strides.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a, T> MatRef<'a, T> {
    /// Row-major view of a `rows x cols` matrix.
    pub fn row_major(data: &'a [T], cols: usize) -> Self {
        Self {
            data,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    /// Transposed view of a row-major `rows x cols` matrix.
    pub fn transposed(data: &'a [T], cols: usize) -> Self {
        Self {
            data,
            row_stride: 1,
            col_stride: cols as isize,
        }
    }

    fn max_index(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            return 0;
        }
        (rows as isize - 1) as usize * self.row_stride as usize
            + (cols as isize - 1) as usize * self.col_stride as usize
    }
}

/// Real scalar usable throughout the crate: `f32` for training, `f64` for
/// statistics and gradient checks.
pub trait Scalar:
    Float
    + FloatConst
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
    /// Short dtype tag used in serialized manifests.
    const DTYPE: &'static str;

    /// `c = alpha * a * b + beta * c` with `a: m x k`, `b: k x n`, `c: m x n`
    /// (row-major, contiguous).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: MatRef<'_, Self>,
        b: MatRef<'_, Self>,
        beta: Self,
        c: &mut [Self],
    ) {
        Self::gemm_strided(m, k, n, alpha, a, b, beta, c, n);
    }

    /// As [`Scalar::gemm`] with `c` rows `c_row_stride` elements apart.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: MatRef<'_, Self>,
        b: MatRef<'_, Self>,
        beta: Self,
        c: &mut [Self],
        c_row_stride: usize,
    );

    /// Lossless-enough conversion from `f64` literals.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    fn from_usize_lossy(v: usize) -> Self {
        Self::from_usize(v).expect("count representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn check_gemm<T>(
    m: usize,
    k: usize,
    n: usize,
    a: &MatRef<'_, T>,
    b: &MatRef<'_, T>,
    c: &[T],
    c_rs: usize,
) {
    assert!(a.row_stride >= 0 && a.col_stride >= 0 && b.row_stride >= 0 && b.col_stride >= 0);
    if m * k > 0 {
        assert!(a.max_index(m, k) < a.data.len(), "gemm: lhs out of bounds");
    }
    if k * n > 0 {
        assert!(b.max_index(k, n) < b.data.len(), "gemm: rhs out of bounds");
    }
    assert!(c_rs >= n, "gemm: output rows overlap");
    if m * n > 0 {
        assert!((m - 1) * c_rs + n <= c.len(), "gemm: output out of bounds");
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: MatRef<'_, f32>,
        b: MatRef<'_, f32>,
        beta: f32,
        c: &mut [f32],
        c_row_stride: usize,
    ) {
        check_gemm(m, k, n, &a, &b, c, c_row_stride);
        // SAFETY: extents checked above; `c` is uniquely borrowed.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.data.as_ptr(),
                a.row_stride,
                a.col_stride,
                b.data.as_ptr(),
                b.row_stride,
                b.col_stride,
                beta,
                c.as_mut_ptr(),
                c_row_stride as isize,
                1,
            );
        }
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: MatRef<'_, f64>,
        b: MatRef<'_, f64>,
        beta: f64,
        c: &mut [f64],
        c_row_stride: usize,
    ) {
        check_gemm(m, k, n, &a, &b, c, c_row_stride);
        // SAFETY: extents checked above; `c` is uniquely borrowed.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.data.as_ptr(),
                a.row_stride,
                a.col_stride,
                b.data.as_ptr(),
                b.row_stride,
                b.col_stride,
                beta,
                c.as_mut_ptr(),
                c_row_stride as isize,
                1,
            );
        }
    }
}

/// Two-sided standard normal tail probability `P(|Z| >= |z|)`.
pub fn normal_two_sided_p(z: f64) -> f64 {
    libm::erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

/// Upper tail of the chi-square distribution with one degree of freedom.
pub fn chi2_1df_sf(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    libm::erfc((x / 2.0).sqrt()).clamp(0.0, 1.0)
}

/// Two-sided 95% standard normal quantile.
pub const Z_95: f64 = 1.959964;

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_product() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut c = vec![0.0; m * n];
        f64::gemm(
            m,
            k,
            n,
            1.0,
            MatRef::row_major(&a, k),
            MatRef::row_major(&b, n),
            0.0,
            &mut c,
        );
        for (x, y) in c.iter().zip(naive(m, k, n, &a, &b)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gemm_transposed_operand() {
        // a stored as k x m, used transposed
        let (m, k, n) = (2, 3, 2);
        let at = vec![1.0f32, 4.0, 2.0, 5.0, 3.0, 6.0];
        let b = vec![1.0f32, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = vec![0.0f32; m * n];
        f32::gemm(
            m,
            k,
            n,
            1.0,
            MatRef::transposed(&at, m),
            MatRef::row_major(&b, n),
            0.0,
            &mut c,
        );
        assert_eq!(c, vec![4.0, 5.0, 10.0, 11.0]);
    }

    #[test]
    fn tail_probabilities() {
        assert!((normal_two_sided_p(1.959964) - 0.05).abs() < 1e-6);
        assert!((chi2_1df_sf(3.841459) - 0.05).abs() < 1e-6);
        assert_eq!(chi2_1df_sf(0.0), 1.0);
    }
}
