//! Strided matrix views over flat buffers, dispatched to `matrixmultiply`.

use super::Scalar;

#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, S> {
    pub data: &'a [S],
    pub off: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

pub(crate) struct MatMut<'a, S> {
    pub data: &'a mut [S],
    pub off: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, S> MatRef<'a, S> {
    /// Dense row-major `rows x cols` matrix starting at `off`.
    pub fn dense(data: &'a [S], off: usize, rows: usize, cols: usize) -> Self {
        Self::strided(data, off, rows, cols, cols)
    }

    /// Row-major view with a custom row stride (used for column slices).
    pub fn strided(data: &'a [S], off: usize, rows: usize, cols: usize, rs: usize) -> Self {
        MatRef {
            data,
            off,
            rows,
            cols,
            rs,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn max_index(&self) -> usize {
        self.off + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
    }
}

impl<'a, S> MatMut<'a, S> {
    pub fn dense(data: &'a mut [S], off: usize, rows: usize, cols: usize) -> Self {
        Self::strided(data, off, rows, cols, cols)
    }

    pub fn strided(data: &'a mut [S], off: usize, rows: usize, cols: usize, rs: usize) -> Self {
        MatMut {
            data,
            off,
            rows,
            cols,
            rs,
            cs: 1,
        }
    }

    fn max_index(&self) -> usize {
        self.off + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
    }
}

/// `c = alpha * a * b + beta * c`.
pub(crate) fn gemm<S: Scalar>(alpha: S, a: MatRef<'_, S>, b: MatRef<'_, S>, beta: S, c: MatMut<'_, S>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(a.rows, c.rows, "gemm output rows");
    assert_eq!(b.cols, c.cols, "gemm output cols");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = c.off + i * c.rs + j * c.cs;
                c.data[idx] = if beta == S::zero() {
                    S::zero()
                } else {
                    beta * c.data[idx]
                };
            }
        }
        return;
    }
    assert!(a.max_index() < a.data.len(), "gemm lhs view out of bounds");
    assert!(b.max_index() < b.data.len(), "gemm rhs view out of bounds");
    assert!(c.max_index() < c.data.len(), "gemm output view out of bounds");
    // SAFETY: every view was bounds-checked above, `c` is a distinct mutable borrow,
    // and the strides fit in isize for any buffer that fits in memory.
    unsafe {
        S::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.off),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.off),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.off),
            c.rs as isize,
            c.cs as isize,
        );
    }
}
