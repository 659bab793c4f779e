/// Row/column strides of a matrix operand, in elements.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub rows: isize,
    pub cols: isize,
}

impl Layout {
    /// Row-major `r×c` storage read as-is.
    pub fn row_major(c: usize) -> Self {
        Layout {
            rows: c as isize,
            cols: 1,
        }
    }

    /// Row-major `r×c` storage read as its `c×r` transpose.
    pub fn transposed(c: usize) -> Self {
        Layout {
            rows: 1,
            cols: c as isize,
        }
    }
}

/// `out[m×n] = a[m×k] · b[k×n]` (or `+=` when `accumulate`), `out` row-major.
///
/// The reduction order of every output element is fixed by `k` alone, so the
/// result is bit-reproducible for identical operands.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    out: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            out.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the layouts describe in-bounds strided views of `a` (m×k) and
    // `b` (k×n); `out` is a dense m×n row-major buffer not aliased by either.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rows,
            la.cols,
            b.as_ptr(),
            lb.rows,
            lb.cols,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
