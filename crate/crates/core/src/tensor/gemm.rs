//! Strided matrix product on top of `matrixmultiply`.

/// A strided read-only matrix view.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> View<'a> {
    pub fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    /// Row-major view, transposed when `flag` is set.
    pub fn maybe_t(data: &'a [f64], rows: usize, cols: usize, flag: bool) -> Self {
        let v = Self::row_major(data, rows, cols);
        if flag {
            v.t()
        } else {
            v
        }
    }
}

/// `out = beta * out + a * b`, where `out` is written through strides
/// `(rsc, csc)`.
pub(crate) fn gemm(a: View, b: View, beta: f64, out: &mut [f64], rsc: isize, csc: isize) {
    debug_assert_eq!(a.cols, b.rows);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    debug_assert!(out.len() >= m * n);
    // SAFETY: the views and `out` cover every strided element addressed by
    // an m x k by k x n product; the slices outlive the call.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            out.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}
