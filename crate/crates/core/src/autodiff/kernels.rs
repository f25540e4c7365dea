//! Flat-array compute kernels behind the graph operations.
//!
//! Each kernel has a sequential implementation and, with the `parallel`
//! feature (on by default), a rayon variant that splits work across
//! independent output rows or elements. Both variants perform the per-output
//! arithmetic in the same order, so results are bit-identical regardless of
//! feature flags or thread count; the public entry points dispatch on work
//! size. The `_seq`/`_par` pairs stay public so the bench suite can compare
//! them directly.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Minimum multiply-add count before a matrix kernel goes parallel.
pub const PAR_MATMUL_THRESHOLD: usize = 32 * 1024;

/// Minimum element count before an elementwise kernel goes parallel.
pub const PAR_MAP_THRESHOLD: usize = 64 * 1024;

/// `C = A * B` with `A: m x k`, `B: k x n`, all row-major.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    if m > 1 && m * k * n >= PAR_MATMUL_THRESHOLD {
        return matmul_par(a, b, m, k, n);
    }
    matmul_seq(a, b, m, k, n)
}

pub fn matmul_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for (i, row) in out.chunks_mut(n.max(1)).enumerate().take(m) {
        matmul_row(a, b, i, k, n, row);
    }
    out
}

#[cfg(feature = "parallel")]
pub fn matmul_par(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    out.par_chunks_mut(n.max(1))
        .enumerate()
        .take(m)
        .for_each(|(i, row)| matmul_row(a, b, i, k, n, row));
    out
}

#[inline]
fn matmul_row(a: &[f64], b: &[f64], i: usize, k: usize, n: usize, row: &mut [f64]) {
    for t in 0..k {
        let av = a[i * k + t];
        let brow = &b[t * n..(t + 1) * n];
        for (r, &bv) in row.iter_mut().zip(brow) {
            *r += av * bv;
        }
    }
}

/// `C = A * B^T` with `A: m x k`, `B: n x k`; the result is `m x n`.
/// This is the similarity-matrix kernel: row i of A dotted with row j of B.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    if m > 1 && m * k * n >= PAR_MATMUL_THRESHOLD {
        return matmul_nt_par(a, b, m, k, n);
    }
    matmul_nt_seq(a, b, m, k, n)
}

pub fn matmul_nt_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for (i, row) in out.chunks_mut(n.max(1)).enumerate().take(m) {
        matmul_nt_row(a, b, i, k, n, row);
    }
    out
}

#[cfg(feature = "parallel")]
pub fn matmul_nt_par(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    out.par_chunks_mut(n.max(1))
        .enumerate()
        .take(m)
        .for_each(|(i, row)| matmul_nt_row(a, b, i, k, n, row));
    out
}

#[inline]
fn matmul_nt_row(a: &[f64], b: &[f64], i: usize, k: usize, n: usize, row: &mut [f64]) {
    let arow = &a[i * k..(i + 1) * k];
    for (j, r) in row.iter_mut().enumerate().take(n) {
        let brow = &b[j * k..(j + 1) * k];
        let mut acc = 0.0;
        for (&av, &bv) in arow.iter().zip(brow) {
            acc += av * bv;
        }
        *r = acc;
    }
}

/// `C = A^T * B` with `A: rows x a_cols`, `B: rows x b_cols`; the result is
/// `a_cols x b_cols`. Used by the matrix-product backward passes.
pub fn matmul_tn(a: &[f64], b: &[f64], rows: usize, a_cols: usize, b_cols: usize) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    if a_cols > 1 && rows * a_cols * b_cols >= PAR_MATMUL_THRESHOLD {
        return matmul_tn_par(a, b, rows, a_cols, b_cols);
    }
    matmul_tn_seq(a, b, rows, a_cols, b_cols)
}

pub fn matmul_tn_seq(a: &[f64], b: &[f64], rows: usize, a_cols: usize, b_cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a_cols * b_cols];
    for (t, row) in out.chunks_mut(b_cols.max(1)).enumerate().take(a_cols) {
        matmul_tn_row(a, b, t, rows, a_cols, b_cols, row);
    }
    out
}

#[cfg(feature = "parallel")]
pub fn matmul_tn_par(a: &[f64], b: &[f64], rows: usize, a_cols: usize, b_cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a_cols * b_cols];
    out.par_chunks_mut(b_cols.max(1))
        .enumerate()
        .take(a_cols)
        .for_each(|(t, row)| matmul_tn_row(a, b, t, rows, a_cols, b_cols, row));
    out
}

#[inline]
fn matmul_tn_row(
    a: &[f64],
    b: &[f64],
    t: usize,
    rows: usize,
    a_cols: usize,
    b_cols: usize,
    row: &mut [f64],
) {
    for i in 0..rows {
        let av = a[i * a_cols + t];
        let brow = &b[i * b_cols..(i + 1) * b_cols];
        for (r, &bv) in row.iter_mut().zip(brow) {
            *r += av * bv;
        }
    }
}

/// Apply `f` to every element, preserving order.
pub fn map_unary<F>(x: &[f64], f: F) -> Vec<f64>
where
    F: Fn(f64) -> f64 + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if x.len() >= PAR_MAP_THRESHOLD {
        return map_unary_par(x, f);
    }
    map_unary_seq(x, f)
}

pub fn map_unary_seq<F>(x: &[f64], f: F) -> Vec<f64>
where
    F: Fn(f64) -> f64,
{
    x.iter().map(|&v| f(v)).collect()
}

#[cfg(feature = "parallel")]
pub fn map_unary_par<F>(x: &[f64], f: F) -> Vec<f64>
where
    F: Fn(f64) -> f64 + Sync + Send,
{
    x.par_iter().map(|&v| f(v)).collect()
}

/// Combine two equal-length slices elementwise with `f`.
pub fn map_binary<F>(x: &[f64], y: &[f64], f: F) -> Vec<f64>
where
    F: Fn(f64, f64) -> f64 + Sync + Send,
{
    debug_assert_eq!(x.len(), y.len());
    #[cfg(feature = "parallel")]
    if x.len() >= PAR_MAP_THRESHOLD {
        return x
            .par_iter()
            .zip(y.par_iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
    }
    x.iter().zip(y).map(|(&a, &b)| f(a, b)).collect()
}

/// Euclidean norm of each row of a `rows x cols` matrix.
pub fn row_l2_norms(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    if rows > 1 && rows * cols >= PAR_MAP_THRESHOLD {
        return (0..rows)
            .into_par_iter()
            .map(|i| row_norm(&x[i * cols..(i + 1) * cols]))
            .collect();
    }
    (0..rows)
        .map(|i| row_norm(&x[i * cols..(i + 1) * cols]))
        .collect()
}

#[inline]
fn row_norm(row: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &v in row {
        acc += v * v;
    }
    acc.sqrt()
}

/// Plain dot product of two equal-length slices.
pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        acc += a * b;
    }
    acc
}
