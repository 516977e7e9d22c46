//! Thin strided-GEMM wrapper over `matrixmultiply`.

/// A strided read-only matrix view.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f32],
    pub rs: isize,
    pub cs: isize,
}

impl<'a> View<'a> {
    /// Row-major `rows × cols`.
    pub fn rm(data: &'a [f32], cols: usize) -> Self {
        Self { data, rs: cols as isize, cs: 1 }
    }

    /// Transpose of a row-major matrix with `cols` columns.
    pub fn rm_t(data: &'a [f32], cols: usize) -> Self {
        Self { data, rs: 1, cs: cols as isize }
    }
}

/// `c[m×n] = alpha · a[m×k] · b[k×n] + beta · c`, with `c` row-major.
pub(crate) fn gemm(m: usize, k: usize, n: usize, alpha: f32, a: View<'_>, b: View<'_>, beta: f32, c: &mut [f32]) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    let max_index = |v: &View<'_>, rows: usize, cols: usize| {
        (rows as isize - 1) * v.rs + (cols as isize - 1) * v.cs
    };
    assert!((max_index(&a, m, k) as usize) < a.data.len());
    assert!((max_index(&b, k, n) as usize) < b.data.len());
    // SAFETY: bounds of every strided access are checked above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_naive_product_with_transposes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f32> = (0..m * k).map(|i| i as f32 * 0.5 - 2.0).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i % 7) as f32 - 3.0).collect();
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, 1.0, View::rm(&a, k), View::rm(&b, n), 0.0, &mut c);
        for i in 0..m {
            for j in 0..n {
                let want: f32 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-4);
            }
        }
        // aᵀ stored as k×m row-major
        let at: Vec<f32> = (0..k * m).map(|idx| a[(idx % m) * k + idx / m]).collect();
        let mut c2 = vec![1.0; m * n];
        gemm(m, k, n, 1.0, View::rm_t(&at, m), View::rm(&b, n), 1.0, &mut c2);
        for (x, y) in c.iter().zip(&c2) {
            assert!((x + 1.0 - y).abs() < 1e-4);
        }
    }
}
