/// Strided operand for [`gemm`]: `data[i * row_stride + j * col_stride]`.
#[derive(Clone, Copy)]
pub struct Strided<'a> {
    pub data: &'a [f64],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> Strided<'a> {
    /// Row-major `rows × cols` matrix.
    pub fn rows(data: &'a [f64], cols: usize) -> Self {
        Strided {
            data,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Strided {
            data,
            row_stride: 1,
            col_stride: cols,
        }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows == 0 || cols == 0 {
            return;
        }
        let last = (rows - 1) * self.row_stride + (cols - 1) * self.col_stride;
        assert!(last < self.data.len(), "strided operand too short");
    }
}

/// `c = beta·c + a·b` with `a: m×k`, `b: k×n` and row-major contiguous `c: m×n`.
pub fn gemm(m: usize, k: usize, n: usize, a: Strided<'_>, b: Strided<'_>, beta: f64, c: &mut [f64]) {
    assert_eq!(c.len(), m * n, "output buffer has wrong length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    a.check(m, k);
    b.check(k, n);
    // SAFETY: extents and strides were bounds-checked against each slice above,
    // and `c` is exclusively borrowed with exactly m·n elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
