//! Row-major matrix products backed by `matrixmultiply`.

use crate::tensor::Real;

/// Dense row-major matrix view (`rows × cols`, leading dimension `ld`).
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub ld: usize,
    pub transposed: bool,
}

impl<'a, T> MatRef<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows,
            cols,
            ld: cols,
            transposed: false,
        }
    }

    /// Row-major block of `rows × cols` with row stride `ld`.
    pub fn strided(data: &'a [T], rows: usize, cols: usize, ld: usize) -> Self {
        MatRef {
            data,
            rows,
            cols,
            ld,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            transposed: !self.transposed,
            ..self
        }
    }

    fn logical(&self) -> (usize, usize, isize, isize) {
        if self.transposed {
            (self.cols, self.rows, 1, self.ld as isize)
        } else {
            (self.rows, self.cols, self.ld as isize, 1)
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = (self.rows - 1) * self.ld + self.cols - 1;
            assert!(last < self.data.len(), "matrix view exceeds its buffer");
            assert!(self.cols <= self.ld);
        }
    }
}

/// `c = alpha * op(a)·op(b) + beta * c`, with `c` an `m × n` row-major block
/// of leading dimension `ldc`.
pub fn gemm<T: Real>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: &mut [T], ldc: usize) {
    a.check();
    b.check();
    let (m, k, rsa, csa) = a.logical();
    let (k2, n, rsb, csb) = b.logical();
    assert_eq!(k, k2, "inner dimensions differ");
    if m == 0 || n == 0 {
        return;
    }
    assert!(n <= ldc && (m - 1) * ldc + n <= c.len(), "output block exceeds its buffer");
    if k == 0 {
        for row in c.chunks_mut(ldc).take(m) {
            row[..n].iter_mut().for_each(|v| *v = beta * *v);
        }
        return;
    }
    // SAFETY: the asserts above bound every index touched through the strides.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

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
    fn matches_naive_product_with_transposes() {
        let a: Vec<f64> = (0..12).map(|v| v as f64 * 0.5 - 2.0).collect(); // 3x4
        let b: Vec<f64> = (0..20).map(|v| (v as f64).sin()).collect(); // 4x5
        let want = naive(&a, &b, 3, 4, 5);
        let mut c = vec![0.0; 15];
        gemm(1.0, MatRef::new(&a, 3, 4), MatRef::new(&b, 4, 5), 0.0, &mut c, 5);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
        // (bᵀ aᵀ)ᵀ = a b, computed via transposed views
        let mut ct = vec![0.0; 15];
        gemm(1.0, MatRef::new(&b, 4, 5).t(), MatRef::new(&a, 3, 4).t(), 0.0, &mut ct, 3);
        for i in 0..3 {
            for j in 0..5 {
                assert!((ct[j * 3 + i] - want[i * 5 + j]).abs() < 1e-12);
            }
        }
    }
}
