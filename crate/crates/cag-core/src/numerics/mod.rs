//! Minimal dense numeric kernel: tensors, matmul, softmax, a counter-based
//! deterministic RNG, and the bit-exact CAGT tensor file format.

mod io;
mod ops;
mod rng;
mod tensor;

pub use io::{decode_tensor, encode_tensor, read_tensor, write_tensor, CAGT_MAGIC, CAGT_VERSION};
pub use ops::{
    matmul, matmul_into, matmul_nt_into, matmul_tn_into, softmax_rows, softmax_rows_in_place,
    FloatElem,
};
pub use rng::RngKey;
pub use tensor::{DType, Tensor, TensorData};

use thiserror::Error;

/// Errors from tensor construction, kernels, and the CAGT file format.
#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("dimension mismatch: lhs {lhs:?}, rhs {rhs:?}")]
    DimMismatch { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("data length {len} does not match dims {dims:?}")]
    LengthMismatch { len: usize, dims: Vec<usize> },
    #[error("zero-sized dimension in {dims:?}")]
    ZeroDim { dims: Vec<usize> },
    #[error("dtype {dtype:?} not supported by {op}")]
    UnsupportedDtype { dtype: DType, op: &'static str },
    #[error("dtypes {lhs:?} and {rhs:?} do not match")]
    DtypeMismatch { lhs: DType, rhs: DType },
    #[error("tensor is not a matrix: dims {dims:?}")]
    NotAMatrix { dims: Vec<usize> },
    #[error("softmax row {row} has no finite entry")]
    DegenerateRow { row: usize },
    #[error("bad magic {found:?}, expected \"CAGT\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported format version {0}")]
    BadVersion(u8),
    #[error("unknown dtype code {0}")]
    BadDtypeCode(u8),
    #[error("reserved header byte must be 0, got {0}")]
    BadReserved(u8),
    #[error("truncated payload: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("invalid bool byte {0}")]
    BadBool(u8),
    #[error("trailing bytes after payload: {0}")]
    TrailingBytes(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
