//! Dense row-major kernels shared by the forward and backward passes.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Scalar type the model can run in. `f32` for training, `f64` for
/// finite-difference checks.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// # Safety
    /// All pointer/stride combinations must address memory inside the
    /// respective buffers; `c` must not alias `a` or `b`.
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

    #[inline]
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }
}

impl Real for f32 {
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Strided 2-D view into a slice.
#[derive(Clone, Copy, Debug)]
pub struct View {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    /// Contiguous row-major `rows x cols` matrix.
    pub fn rm(rows: usize, cols: usize) -> Self {
        Self {
            offset: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    /// Columns `col0..col0+cols` of a row-major matrix with row stride `ld`,
    /// starting at row `row0`.
    pub fn block(row0: usize, rows: usize, ld: usize, col0: usize, cols: usize) -> Self {
        Self {
            offset: row0 * ld + col0,
            rows,
            cols,
            rs: ld,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            offset: self.offset,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn end(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            self.offset
        } else {
            self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
        }
    }
}

/// `c = alpha * a @ b + beta * c`.
pub fn gemm<T: Real>(alpha: T, a: &[T], av: View, b: &[T], bv: View, beta: T, c: &mut [T], cv: View) {
    assert_eq!(av.cols, bv.rows, "inner dimension mismatch");
    assert_eq!(av.rows, cv.rows, "row mismatch");
    assert_eq!(bv.cols, cv.cols, "column mismatch");
    assert!(av.end() <= a.len() && bv.end() <= b.len() && cv.end() <= c.len());
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    // SAFETY: bounds checked above; `c` is a unique borrow so it cannot alias.
    unsafe {
        T::gemm_raw(
            av.rows,
            av.cols,
            bv.cols,
            alpha,
            a.as_ptr().add(av.offset),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        )
    }
}

/// `out[rows x n] = x[rows x k] @ w[k x n] + bias`.
pub fn linear<T: Real>(x: &[T], w: &[T], bias: &[T], rows: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * n);
    for _ in 0..rows {
        out.extend_from_slice(bias);
    }
    gemm(T::one(), x, View::rm(rows, k), w, View::rm(k, n), T::one(), &mut out, View::rm(rows, n));
    out
}

/// Accumulates the gradients of [`linear`] and returns `dx`.
pub fn linear_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    rows: usize,
    k: usize,
    n: usize,
    dw: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    gemm(T::one(), x, View::rm(rows, k).t(), dy, View::rm(rows, n), T::one(), dw, View::rm(k, n));
    for row in dy.chunks_exact(n) {
        for (b, &g) in db.iter_mut().zip(row) {
            *b += g;
        }
    }
    let mut dx = vec![T::zero(); rows * k];
    gemm(T::one(), dy, View::rm(rows, n), w, View::rm(k, n).t(), T::zero(), &mut dx, View::rm(rows, k));
    dx
}

pub const LN_EPS: f64 = 1e-5;

/// Returns `(y, xhat, rstd)`.
pub fn layer_norm<T: Real>(x: &[T], gain: &[T], bias: &[T], d: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let dn = T::c(d as f64);
    let eps = T::c(LN_EPS);
    let mut y = Vec::with_capacity(x.len());
    let mut xhat = Vec::with_capacity(x.len());
    let mut rstd = Vec::with_capacity(rows);
    for row in x.chunks_exact(d) {
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let r = T::one() / (var + eps).sqrt();
        rstd.push(r);
        for (i, &v) in row.iter().enumerate() {
            let h = (v - mean) * r;
            xhat.push(h);
            y.push(h * gain[i] + bias[i]);
        }
    }
    (y, xhat, rstd)
}

pub fn layer_norm_backward<T: Real>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    gain: &[T],
    d: usize,
    dgain: &mut [T],
    dbias: &mut [T],
) -> Vec<T> {
    let dn = T::c(d as f64);
    let mut dx = Vec::with_capacity(dy.len());
    let mut dxhat = vec![T::zero(); d];
    for ((g_row, h_row), &r) in dy.chunks_exact(d).zip(xhat.chunks_exact(d)).zip(rstd) {
        let mut sum = T::zero();
        let mut sum_h = T::zero();
        for i in 0..d {
            dgain[i] += g_row[i] * h_row[i];
            dbias[i] += g_row[i];
            let v = g_row[i] * gain[i];
            dxhat[i] = v;
            sum += v;
            sum_h += v * h_row[i];
        }
        for i in 0..d {
            dx.push(r / dn * (dn * dxhat[i] - sum - h_row[i] * sum_h));
        }
    }
    dx
}

const GELU_K: f64 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub fn gelu<T: Real>(u: T) -> T {
    let c = T::c((2.0 / std::f64::consts::PI).sqrt());
    let t = (c * (u + T::c(GELU_K) * u * u * u)).tanh();
    T::c(0.5) * u * (T::one() + t)
}

#[inline]
pub fn gelu_grad<T: Real>(u: T) -> T {
    let c = T::c((2.0 / std::f64::consts::PI).sqrt());
    let t = (c * (u + T::c(GELU_K) * u * u * u)).tanh();
    T::c(0.5) * (T::one() + t)
        + T::c(0.5) * u * (T::one() - t * t) * c * (T::one() + T::c(3.0 * GELU_K) * u * u)
}

/// Numerically stable `log(sum(exp(x)))`.
pub fn log_sum_exp<T: Real>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<T>().ln()
}

pub fn all_finite<T: Real>(xs: &[T]) -> bool {
    xs.iter().all(|x| x.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
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
    fn gemm_matches_naive_with_transposes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.3 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let want = naive(&a, &b, m, k, n);
        let mut c = vec![0.0; m * n];
        gemm(1.0, &a, View::rm(m, k), &b, View::rm(k, n), 0.0, &mut c, View::rm(m, n));
        for (x, y) in c.iter().zip(&want) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
        // a stored transposed
        let mut at = vec![0.0; m * k];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c2 = vec![0.0; m * n];
        gemm(1.0, &at, View::rm(k, m).t(), &b, View::rm(k, n), 0.0, &mut c2, View::rm(m, n));
        assert_eq!(c, c2);
    }

    #[test]
    fn layer_norm_normalizes() {
        let x = [1.0f64, 2.0, 3.0, 4.0];
        let (y, _, _) = layer_norm(&x, &[1.0; 4], &[0.0; 4], 4);
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        let var: f64 = y.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert_relative_eq!(var, 1.0, epsilon = 1e-4);
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &u in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(u + h) - gelu(u - h)) / (2.0 * h);
            assert_relative_eq!(gelu_grad(u), fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn log_sum_exp_is_stable() {
        assert_relative_eq!(log_sum_exp(&[1000.0f64, 1000.0]), 1000.0 + 2f64.ln());
        assert_eq!(log_sum_exp::<f64>(&[]), f64::NEG_INFINITY);
    }
}
