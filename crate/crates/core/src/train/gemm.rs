/// Strided view of a dense matrix.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> Mat<'a> {
    pub fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Mat {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Mat {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn max_index(&self) -> usize {
        (self.rows - 1) * self.rs as usize + (self.cols - 1) * self.cs as usize
    }
}

/// `c = a * b + beta * c` with `c` row-major `a.rows x b.cols`.
pub(crate) fn gemm(a: Mat<'_>, b: Mat<'_>, beta: f64, c: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(c.len(), m * n, "output has the wrong size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(a.max_index() < a.data.len() && b.max_index() < b.data.len(), "strided view out of bounds");
    // SAFETY: every index the kernel touches is below the checked maxima, and
    // `c` is a distinct mutable slice of exactly m*n elements.
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
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn matches_naive_product_with_transposes() {
        let a: alloc::vec::Vec<f64> = (0..6).map(|i| i as f64 - 2.0).collect(); // 2x3
        let b: alloc::vec::Vec<f64> = (0..12).map(|i| (i * 7 % 5) as f64).collect(); // 3x4
        let mut c = vec![1.0; 8];
        gemm(Mat::row_major(&a, 2, 3), Mat::row_major(&b, 3, 4), 1.0, &mut c);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = 1.0 + (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum::<f64>();
                assert_eq!(c[i * 4 + j], want);
            }
        }
        // (b^T)(a^T) = (ab)^T
        let mut ct = vec![0.0; 8];
        gemm(Mat::row_major(&b, 3, 4).t(), Mat::row_major(&a, 2, 3).t(), 0.0, &mut ct);
        for i in 0..2 {
            for j in 0..4 {
                assert_eq!(ct[j * 2 + i], c[i * 4 + j] - 1.0);
            }
        }
    }
}
