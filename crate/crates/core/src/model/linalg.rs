//! Dense kernels over row-major `f64` slices.

/// Matrix view: base offset into a slice plus row/column strides.
#[derive(Clone, Copy, Debug)]
pub(crate) struct View {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    /// Row-major `rows x cols` matrix starting at `offset`.
    pub fn rm(offset: usize, cols: usize) -> Self {
        Self { offset, rs: cols, cs: 1 }
    }

    /// Transpose of a row-major `rows x cols` matrix starting at `offset`.
    pub fn tr(offset: usize, cols: usize) -> Self {
        Self { offset, rs: 1, cs: cols }
    }

    /// Row-major with an explicit row stride (a column block of a wider matrix).
    pub fn strided(offset: usize, row_stride: usize) -> Self {
        Self { offset, rs: row_stride, cs: 1 }
    }

    fn last(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows.max(1) - 1) * self.rs + (cols.max(1) - 1) * self.cs
    }
}

/// `C = A·B + beta·C` for logical shapes `A: m x k`, `B: k x n`, `C: m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    av: View,
    b: &[f64],
    bv: View,
    beta: f64,
    c: &mut [f64],
    cv: View,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || av.last(m, k) < a.len(), "gemm: A out of bounds");
    assert!(k == 0 || bv.last(k, n) < b.len(), "gemm: B out of bounds");
    assert!(cv.last(m, n) < c.len(), "gemm: C out of bounds");
    // SAFETY: every addressed element lies inside its slice (checked above);
    // `c` is uniquely borrowed and cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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
        );
    }
}

/// `y = x·W + bias` for a row-major `W` of shape `x.len() x y.len()`.
pub(crate) fn vec_mat(x: &[f64], w: &[f64], bias: &[f64], y: &mut [f64]) {
    let n = y.len();
    y.copy_from_slice(bias);
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * n..(i + 1) * n];
        for (yj, &wj) in y.iter_mut().zip(row) {
            *yj += xi * wj;
        }
    }
}

/// Adds `bias` to every row of a row-major `rows x bias.len()` matrix.
pub(crate) fn add_bias(out: &mut [f64], bias: &[f64]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

/// Column sums of a row-major matrix, accumulated into `acc`.
pub(crate) fn add_col_sums(acc: &mut [f64], m: &[f64]) {
    for row in m.chunks_exact(acc.len()) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

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
    fn gemm_matches_naive_with_transposes() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(m, k, n, &a, &b);

        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, View::rm(0, k), &b, View::rm(0, n), 0.0, &mut c, View::rm(0, n));
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        // Same product with A supplied transposed in storage.
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c2 = vec![1.0; m * n];
        gemm(m, k, n, &at, View::tr(0, m), &b, View::rm(0, n), 1.0, &mut c2, View::rm(0, n));
        for (x, y) in c2.iter().zip(&want) {
            assert!((x - (y + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn vec_mat_matches_gemm() {
        let x = [0.5, -1.0, 2.0];
        let w: Vec<f64> = (0..12).map(|i| i as f64 * 0.1).collect();
        let bias = [1.0, 0.0, -1.0, 0.5];
        let mut y = [0.0; 4];
        vec_mat(&x, &w, &bias, &mut y);
        let want = naive(1, 3, 4, &x, &w);
        for j in 0..4 {
            assert!((y[j] - want[j] - bias[j]).abs() < 1e-12);
        }
    }
}
