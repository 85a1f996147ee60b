//! Safe strided wrapper around the `matrixmultiply` dgemm kernel.

/// Row/column strides of a matrix operand, in elements.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub rs: usize,
    pub cs: usize,
}

impl Layout {
    /// Dense row-major matrix with `cols` columns.
    pub fn row_major(cols: usize) -> Self {
        Self { rs: cols, cs: 1 }
    }

    /// Transposed view of a dense row-major matrix with `cols` columns.
    pub fn transposed(cols: usize) -> Self {
        Self { rs: 1, cs: cols }
    }

    fn last_index(self, rows: usize, cols: usize) -> usize {
        (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// `c ← alpha · a · b + beta · c` where `a` is m×k and `b` is k×n under the given layouts.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    beta: f64,
    c: &mut [f64],
    lc: Layout,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(lc.last_index(m, n) < c.len(), "gemm: output out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let x = &mut c[i * lc.rs + j * lc.cs];
                *x *= beta;
            }
        }
        return;
    }
    assert!(la.last_index(m, k) < a.len(), "gemm: lhs out of bounds");
    assert!(lb.last_index(k, n) < b.len(), "gemm: rhs out of bounds");
    // SAFETY: every index touched by dgemm is bounded by the asserts above, and `c`
    // is an exclusive borrow disjoint from `a` and `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            la.rs as isize,
            la.cs as isize,
            b.as_ptr(),
            lb.rs as isize,
            lb.cs as isize,
            beta,
            c.as_mut_ptr(),
            lc.rs as isize,
            lc.cs as isize,
        );
    }
}
