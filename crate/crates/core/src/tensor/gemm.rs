//! Bounds-checked strided views over slices, dispatched to `matrixmultiply`.

use super::Scalar;

/// Read-only strided matrix view starting at `offset`.
#[derive(Clone, Copy)]
pub struct MatView<'a, T> {
    pub data: &'a [T],
    pub offset: usize,
    pub rs: isize,
    pub cs: isize,
}

pub struct MatViewMut<'a, T> {
    pub data: &'a mut [T],
    pub offset: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a, T> MatView<'a, T> {
    pub fn row_major(data: &'a [T], cols: usize) -> Self {
        Self::strided(data, 0, cols, 1)
    }

    pub fn strided(data: &'a [T], offset: usize, rs: usize, cs: usize) -> Self {
        MatView {
            data,
            offset,
            rs: rs as isize,
            cs: cs as isize,
        }
    }

    /// Swaps row and column strides.
    pub fn t(self) -> Self {
        MatView {
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }
}

impl<'a, T> MatViewMut<'a, T> {
    pub fn row_major(data: &'a mut [T], cols: usize) -> Self {
        Self::strided(data, 0, cols, 1)
    }

    pub fn strided(data: &'a mut [T], offset: usize, rs: usize, cs: usize) -> Self {
        MatViewMut {
            data,
            offset,
            rs: rs as isize,
            cs: cs as isize,
        }
    }
}

fn last_index(offset: usize, rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    offset + (rows - 1) * rs as usize + (cols - 1) * cs as usize
}

/// `c = a · b + beta · c` for an `m×k` by `k×n` product.
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: MatView<'_, T>,
    b: MatView<'_, T>,
    beta: T,
    c: MatViewMut<'_, T>,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.rs >= 0 && a.cs >= 0 && b.rs >= 0 && b.cs >= 0 && c.rs >= 0 && c.cs >= 0);
    assert!(last_index(c.offset, m, n, c.rs, c.cs) < c.data.len(), "gemm: c out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = c.offset + i * c.rs as usize + j * c.cs as usize;
                c.data[idx] = beta * c.data[idx];
            }
        }
        return;
    }
    assert!(last_index(a.offset, m, k, a.rs, a.cs) < a.data.len(), "gemm: a out of bounds");
    assert!(last_index(b.offset, k, n, b.rs, b.cs) < b.data.len(), "gemm: b out of bounds");
    T::gemm_kernel(m, k, n, a, b, beta, c);
}
