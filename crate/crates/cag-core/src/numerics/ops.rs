//! Dense kernels: matrix multiply and row softmax.
//!
//! Kernels are generic over [`FloatElem`] so the same code path serves f32
//! training and f64 acceptance checks. Each output row is produced by a
//! single fixed-order accumulation, so parallel and sequential scheduling
//! give bitwise identical results.

use num_traits::Float;

use super::{DType, NumericsError, Tensor, TensorData};
use crate::parallel::{for_each_chunk_mut, Exec};

/// Scalar types the numeric kernels operate on.
pub trait FloatElem: Float + Send + Sync + std::fmt::Debug + 'static {
    const DTYPE: DType;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl FloatElem for f32 {
    const DTYPE: DType = DType::F32;
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl FloatElem for f64 {
    const DTYPE: DType = DType::F64;
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

// Row-parallelism only pays off once the multiply is reasonably large.
const MATMUL_PAR_MIN_OPS: usize = 1 << 18;

/// `out[m×n] = a[m×k] · b[k×n]`, row-major slices.
pub fn matmul_into<T: FloatElem>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let exec = if m * k * n >= MATMUL_PAR_MIN_OPS { Exec::Auto } else { Exec::Sequential };
    for_each_chunk_mut(exec, out, n, |i, row| {
        row.fill(T::zero());
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in row.iter_mut().zip(b_row) {
                *o = *o + a_ip * b_pj;
            }
        }
    });
}

/// `out[m×n] = a[m×k] · b[n×k]^T`.
pub fn matmul_nt_into<T: FloatElem>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (x, y) in a_row.iter().zip(b_row) {
                acc = acc + *x * *y;
            }
            out[i * n + j] = acc;
        }
    }
}

/// `out[k×n] = a[m×k]^T · b[m×n]`.
pub fn matmul_tn_into<T: FloatElem>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    out.fill(T::zero());
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let o_row = &mut out[p * n..(p + 1) * n];
            for (o, &b_ij) in o_row.iter_mut().zip(b_row) {
                *o = *o + a_ip * b_ij;
            }
        }
    }
}

/// Standard matrix product of two rank-2 tensors of the same float dtype.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    let (m, ka) = a.matrix_dims()?;
    let (kb, n) = b.matrix_dims()?;
    if ka != kb {
        return Err(NumericsError::DimMismatch {
            lhs: a.dims().to_vec(),
            rhs: b.dims().to_vec(),
        });
    }
    match (a.data(), b.data()) {
        (TensorData::F32(av), TensorData::F32(bv)) => {
            let mut out = vec![0.0f32; m * n];
            matmul_into(av, bv, m, ka, n, &mut out);
            Tensor::from_f32(vec![m, n], out)
        }
        (TensorData::F64(av), TensorData::F64(bv)) => {
            let mut out = vec![0.0f64; m * n];
            matmul_into(av, bv, m, ka, n, &mut out);
            Tensor::from_f64(vec![m, n], out)
        }
        (TensorData::Bool(_), _) | (_, TensorData::Bool(_)) => Err(NumericsError::UnsupportedDtype {
            dtype: DType::Bool,
            op: "matmul",
        }),
        _ => Err(NumericsError::DtypeMismatch { lhs: a.dtype(), rhs: b.dtype() }),
    }
}

/// Row-wise softmax over a row-major `rows×cols` slice, stabilized by
/// row-max subtraction. `-inf` entries map to exactly zero weight; a row
/// with no finite entry is an error (`row_offset` shifts the reported row
/// index when the slice is a sub-block of a larger matrix).
pub fn softmax_rows_in_place<T: FloatElem>(
    x: &mut [T],
    rows: usize,
    cols: usize,
    row_offset: usize,
) -> Result<(), NumericsError> {
    debug_assert_eq!(x.len(), rows * cols);
    for r in 0..rows {
        let row = &mut x[r * cols..(r + 1) * cols];
        let mut max = T::neg_infinity();
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        if !max.is_finite() {
            return Err(NumericsError::DegenerateRow { row: row_offset + r });
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            // exp(-inf - max) = 0 exactly, which keeps masked keys at zero.
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    Ok(())
}

/// Row-wise softmax over a rank-2 float tensor.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor, NumericsError> {
    let (rows, cols) = x.matrix_dims()?;
    match x.data() {
        TensorData::F32(v) => {
            let mut out = v.clone();
            softmax_rows_in_place(&mut out, rows, cols, 0)?;
            Tensor::from_f32(vec![rows, cols], out)
        }
        TensorData::F64(v) => {
            let mut out = v.clone();
            softmax_rows_in_place(&mut out, rows, cols, 0)?;
            Tensor::from_f64(vec![rows, cols], out)
        }
        TensorData::Bool(_) => Err(NumericsError::UnsupportedDtype {
            dtype: DType::Bool,
            op: "softmax_rows",
        }),
    }
}
