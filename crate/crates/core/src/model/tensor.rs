//! Row-major f64 matrices and a strided GEMM wrapper.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data does not match shape {rows}x{cols}");
        Tensor { rows, cols, data }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }
}

/// Logical view of a matrix inside a buffer: `rows x cols` with explicit strides.
#[derive(Clone, Copy)]
pub(crate) struct View {
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl View {
    pub fn of(t: &Tensor, transposed: bool) -> View {
        Self::strided(t.rows, t.cols, t.cols, transposed)
    }

    /// A `rows x cols` block with row stride `ld`, optionally transposed.
    pub fn strided(rows: usize, cols: usize, ld: usize, transposed: bool) -> View {
        if transposed {
            View { rows: cols, cols: rows, rs: 1, cs: ld as isize }
        } else {
            View { rows, cols, rs: ld as isize, cs: 1 }
        }
    }
}

/// `c = alpha * a · b + beta * c` over raw buffers.
///
/// # Safety contract
/// Callers pass slices whose extents cover the views; this is checked in
/// debug builds and by the slice bounds of the public wrappers.
pub(crate) fn gemm_raw(alpha: f64, a: &[f64], av: View, b: &[f64], bv: View, beta: f64, c: &mut [f64], cv: View) {
    assert_eq!(av.cols, bv.rows, "inner dimensions differ");
    assert_eq!((av.rows, bv.cols), (cv.rows, cv.cols), "output shape mismatch");
    debug_assert!(extent(av) <= a.len() && extent(bv) <= b.len() && extent(cv) <= c.len());
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    if av.cols == 0 {
        for r in 0..cv.rows {
            for col in 0..cv.cols {
                let i = r as isize * cv.rs + col as isize * cv.cs;
                c[i as usize] *= beta;
            }
        }
        return;
    }
    // SAFETY: the asserts above plus the extent check guarantee that every
    // index matrixmultiply touches lies inside the given slices.
    unsafe {
        matrixmultiply::dgemm(
            av.rows, av.cols, bv.cols, alpha, a.as_ptr(), av.rs, av.cs, b.as_ptr(), bv.rs, bv.cs, beta,
            c.as_mut_ptr(), cv.rs, cv.cs,
        );
    }
}

fn extent(v: View) -> usize {
    if v.rows == 0 || v.cols == 0 {
        return 0;
    }
    ((v.rows - 1) as isize * v.rs + (v.cols - 1) as isize * v.cs) as usize + 1
}

/// `op(a) · op(b)` as a new tensor.
pub fn matmul(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Tensor {
    let av = View::of(a, ta);
    let bv = View::of(b, tb);
    let mut out = Tensor::zeros(av.rows, bv.cols);
    let cv = View::of(&out, false);
    gemm_raw(1.0, &a.data, av, &b.data, bv, 0.0, &mut out.data, cv);
    out
}

/// `out += op(a) · op(b)`.
pub fn matmul_acc(out: &mut Tensor, a: &Tensor, ta: bool, b: &Tensor, tb: bool) {
    let av = View::of(a, ta);
    let bv = View::of(b, tb);
    let cv = View::of(out, false);
    gemm_raw(1.0, &a.data, av, &b.data, bv, 1.0, &mut out.data, cv);
}

/// In-place softmax of each row; `-inf` entries get probability zero.
pub fn softmax_rows(t: &mut Tensor) {
    let cols = t.cols;
    for row in t.data.chunks_mut(cols.max(1)) {
        softmax_in_place(row);
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        let u = 1.0 / row.len() as f64;
        row.iter_mut().for_each(|x| *x = u);
        return;
    }
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x /= sum);
}

pub fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}
