//! Thin row-major wrapper over `matrixmultiply::dgemm`.

/// A dense row-major matrix operand, optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    /// Logical (post-transpose) dimensions.
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        MatRef {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    /// View of the transpose of a stored `[rows, cols]` matrix.
    pub fn t(data: &'a [f64], stored_rows: usize, stored_cols: usize) -> Self {
        debug_assert_eq!(data.len(), stored_rows * stored_cols);
        MatRef {
            data,
            rows: stored_cols,
            cols: stored_rows,
            transposed: true,
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.rows as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = a · b + beta · out`, with `out` row-major `[a.rows, b.cols]`.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, beta: f64, out: &mut [f64]) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(k, b.rows, "gemm inner dimensions");
    assert_eq!(out.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the slices cover exactly the strided extents checked above and
    // `out` does not alias either input.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
