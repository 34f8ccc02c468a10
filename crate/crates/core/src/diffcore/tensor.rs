use std::fmt;

use crate::parallel::{self, for_each_chunk_mut, rows_per_chunk};

/// Row-major matrix shape. Scalars are `1×1`, vectors are `1×n` or `n×1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub const SCALAR: Shape = Shape { rows: 1, cols: 1 };

    pub fn new(rows: usize, cols: usize) -> Self {
        Shape { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}x{}]", self.rows, self.cols)
    }
}

/// Dense row-major `f64` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            rows * cols,
            data.len(),
            "tensor payload length does not match {rows}x{cols}"
        );
        Tensor {
            shape: Shape::new(rows, cols),
            data,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::full(rows, cols, 0.0)
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Tensor::new(rows, cols, vec![value; rows * cols])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(1, 1, vec![value])
    }

    pub fn row(values: &[f64]) -> Self {
        Tensor::new(1, values.len(), values.to_vec())
    }

    pub fn column(values: &[f64]) -> Self {
        Tensor::new(values.len(), 1, values.to_vec())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Tensor::new(rows, cols, data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape.rows
    }

    pub fn cols(&self) -> usize {
        self.shape.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.shape.cols;
        self.data[r * cols + c] = v;
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.shape.cols;
        &self.data[r * c..(r + 1) * c]
    }

    /// The single value of a `1×1` tensor.
    pub fn item(&self) -> f64 {
        assert!(self.shape.is_scalar(), "item() on {}", self.shape);
        self.data[0]
    }

    pub(crate) fn reshaped(mut self, rows: usize, cols: usize) -> Self {
        assert_eq!(rows * cols, self.data.len());
        self.shape = Shape::new(rows, cols);
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64 + Sync + Send) -> Tensor {
        let mut out = self.data.clone();
        for_each_chunk_mut(&mut out, parallel::ELEM_CHUNK, |_, c| {
            for v in c {
                *v = f(*v);
            }
        });
        Tensor::new(self.rows(), self.cols(), out)
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(c, r, out)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self += other` (same shape).
    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        let src = &other.data;
        for_each_chunk_mut(&mut self.data, parallel::ELEM_CHUNK, |ci, c| {
            let base = ci * parallel::ELEM_CHUNK;
            for (k, v) in c.iter_mut().enumerate() {
                *v += src[base + k];
            }
        });
    }

    pub fn sum(&self) -> f64 {
        parallel::chunked_sum(self.data.len(), |i| self.data[i])
    }
}

/// Rows of the output computed per dgemm call.
const GEMM_ROW_BLOCK: usize = 256;

/// Strided view of a matrix operand.
#[derive(Clone, Copy)]
pub(crate) struct MatView<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatView<'a> {
    pub fn of(t: &'a Tensor) -> Self {
        MatView {
            data: t.data(),
            rows: t.rows(),
            cols: t.cols(),
            row_stride: t.cols(),
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        MatView {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }
}

/// `out (+)= a · b` with `a: m×k`, `b: k×n`, `out: m×n` row-major.
///
/// Output rows are split into fixed blocks so the result does not depend on
/// the number of worker threads.
pub(crate) fn gemm_into(a: MatView<'_>, b: MatView<'_>, out: &mut [f64], accumulate: bool) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    debug_assert_eq!(k, b.rows);
    debug_assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    if k == 0 {
        if !accumulate {
            out.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let block = GEMM_ROW_BLOCK.max(rows_per_chunk(n).min(4096));
    for_each_chunk_mut(out, block * n, |bi, chunk| {
        let r0 = bi * block;
        let rows = chunk.len() / n;
        let a_off = r0 * a.row_stride;
        // SAFETY: the view strides address only elements of `a.data` and
        // `b.data` (checked by the shape bookkeeping of the callers) and
        // `chunk` is exactly `rows × n` with row stride `n`.
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a.data.as_ptr().add(a_off),
                a.row_stride as isize,
                a.col_stride as isize,
                b.data.as_ptr(),
                b.row_stride as isize,
                b.col_stride as isize,
                beta,
                chunk.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

/// `post(x·w + b)` in blocks of output rows; `post` runs on each block
/// right after its product.
pub(crate) fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor, post: impl Fn(&mut [f64]) + Sync + Send) -> Tensor {
    let (m, k, n) = (x.rows(), x.cols(), w.cols());
    let mut out = Vec::with_capacity(m * n);
    for _ in 0..m {
        out.extend_from_slice(b.data());
    }
    if n == 0 {
        return Tensor::new(m, n, out);
    }
    for_each_chunk_mut(&mut out, GEMM_ROW_BLOCK * n, |bi, chunk| {
        let rows = chunk.len() / n;
        if k > 0 {
            // SAFETY: rows `bi·block ..` of `x` exist because `out` has `m`
            // rows of `n`; `w` is `k×n` row-major.
            unsafe {
                matrixmultiply::dgemm(
                    rows,
                    k,
                    n,
                    1.0,
                    x.data().as_ptr().add(bi * GEMM_ROW_BLOCK * k),
                    k as isize,
                    1,
                    w.data().as_ptr(),
                    n as isize,
                    1,
                    1.0,
                    chunk.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        post(chunk);
    });
    Tensor::new(m, n, out)
}

/// Rows of the shared dimension reduced per partial product in `aᵀ·b`.
const REDUCE_ROW_BLOCK: usize = 2048;

/// `aᵀ · b` for `a: m×k`, `b: m×n`, reducing over `m` in fixed-size blocks
/// whose partial products are summed in block order.
pub(crate) fn gemm_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    debug_assert_eq!(m, b.rows());
    let blocks = m.div_ceil(REDUCE_ROW_BLOCK).max(1);
    let partials = parallel::map_indices(blocks, |bi| {
        let r0 = bi * REDUCE_ROW_BLOCK;
        let r1 = (r0 + REDUCE_ROW_BLOCK).min(m);
        let mut out = vec![0.0; k * n];
        if r1 > r0 && k > 0 && n > 0 {
            // SAFETY: rows r0..r1 of both operands lie inside their buffers.
            unsafe {
                matrixmultiply::dgemm(
                    k,
                    r1 - r0,
                    n,
                    1.0,
                    a.data().as_ptr().add(r0 * k),
                    1,
                    k as isize,
                    b.data().as_ptr().add(r0 * n),
                    n as isize,
                    1,
                    0.0,
                    out.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        out
    });
    let mut iter = partials.into_iter();
    let mut acc = iter.next().unwrap_or_else(|| vec![0.0; k * n]);
    for p in iter {
        for (x, y) in acc.iter_mut().zip(p) {
            *x += y;
        }
    }
    Tensor::new(k, n, acc)
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols(), b.rows(), "matmul {} x {}", a.shape(), b.shape());
    let mut out = vec![0.0; a.rows() * b.cols()];
    gemm_into(MatView::of(a), MatView::of(b), &mut out, false);
    Tensor::new(a.rows(), b.cols(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Tensor, b: &Tensor) -> Tensor {
        Tensor::from_fn(a.rows(), b.cols(), |i, j| {
            (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum()
        })
    }

    fn pseudo(rows: usize, cols: usize, seed: u64) -> Tensor {
        Tensor::from_fn(rows, cols, |i, j| {
            let x = (i * 7919 + j * 104729) as f64 + seed as f64;
            (x * 0.618).sin()
        })
    }

    #[test]
    fn matmul_matches_naive_across_blocks() {
        let a = pseudo(600, 13, 1);
        let b = pseudo(13, 7, 2);
        let c = matmul(&a, &b);
        let d = naive(&a, &b);
        for (x, y) in c.data().iter().zip(d.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gemm_tn_matches_transpose_product() {
        let a = pseudo(5000, 6, 3);
        let b = pseudo(5000, 4, 4);
        let c = gemm_tn(&a, &b);
        let d = naive(&a.transpose(), &b);
        for (x, y) in c.data().iter().zip(d.data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn transposed_view_product() {
        let a = pseudo(9, 5, 5);
        let b = pseudo(4, 5, 6);
        let mut out = vec![0.0; 9 * 4];
        gemm_into(MatView::of(&a), MatView::of(&b).t(), &mut out, false);
        let d = naive(&a, &b.transpose());
        for (x, y) in out.iter().zip(d.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
