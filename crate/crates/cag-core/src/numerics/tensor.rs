//! Row-major dense tensor with dynamic dtype.

use super::NumericsError;

/// Element type of a [`Tensor`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    Bool,
}

impl DType {
    /// Wire code used by the CAGT file format.
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::Bool => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<DType> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::Bool),
            _ => None,
        }
    }

    /// Bytes per element in the serialized payload.
    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::Bool => 1,
        }
    }
}

/// Backing storage, one variant per dtype.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    Bool(Vec<bool>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::Bool(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::Bool(_) => DType::Bool,
        }
    }
}

/// Row-major multi-dimensional array. Empty `dims` is a scalar with one
/// element. All dims are positive; data length always equals the product
/// of dims.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: TensorData,
}

fn numel(dims: &[usize]) -> usize {
    dims.iter().product()
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Tensor, NumericsError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(NumericsError::ZeroDim { dims });
        }
        if data.len() != numel(&dims) {
            return Err(NumericsError::LengthMismatch { len: data.len(), dims });
        }
        Ok(Tensor { dims, data })
    }

    pub fn from_f32(dims: Vec<usize>, data: Vec<f32>) -> Result<Tensor, NumericsError> {
        Tensor::new(dims, TensorData::F32(data))
    }

    pub fn from_f64(dims: Vec<usize>, data: Vec<f64>) -> Result<Tensor, NumericsError> {
        Tensor::new(dims, TensorData::F64(data))
    }

    pub fn from_bool(dims: Vec<usize>, data: Vec<bool>) -> Result<Tensor, NumericsError> {
        Tensor::new(dims, TensorData::Bool(data))
    }

    pub fn zeros(dtype: DType, dims: Vec<usize>) -> Result<Tensor, NumericsError> {
        let n = numel(&dims);
        let data = match dtype {
            DType::F32 => TensorData::F32(vec![0.0; n]),
            DType::F64 => TensorData::F64(vec![0.0; n]),
            DType::Bool => TensorData::Bool(vec![false; n]),
        };
        Tensor::new(dims, data)
    }

    pub fn scalar_f64(value: f64) -> Tensor {
        Tensor { dims: vec![], data: TensorData::F64(vec![value]) }
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    /// Total element count (1 for a scalar).
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // dims are positive, so there is always at least one element
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<&[f64]> {
        match &self.data {
            TensorData::F64(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<&[bool]> {
        match &self.data {
            TensorData::Bool(v) => Some(v),
            _ => None,
        }
    }

    /// (rows, cols) of a rank-2 tensor.
    pub fn matrix_dims(&self) -> Result<(usize, usize), NumericsError> {
        match self.dims.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(NumericsError::NotAMatrix { dims: self.dims.clone() }),
        }
    }

    /// True when every float entry is finite. Bool tensors are always finite.
    pub fn all_finite(&self) -> bool {
        match &self.data {
            TensorData::F32(v) => v.iter().all(|x| x.is_finite()),
            TensorData::F64(v) => v.iter().all(|x| x.is_finite()),
            TensorData::Bool(_) => true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_must_match_dims() {
        let err = Tensor::from_f32(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, NumericsError::LengthMismatch { len: 5, .. }));
    }

    #[test]
    fn zero_dim_rejected() {
        let err = Tensor::from_f64(vec![2, 0], vec![]).unwrap_err();
        assert!(matches!(err, NumericsError::ZeroDim { .. }));
    }

    #[test]
    fn scalar_has_one_element() {
        let t = Tensor::from_f64(vec![], vec![7.5]).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.ndim(), 0);
        assert_eq!(t.as_f64().unwrap(), &[7.5]);
    }

    #[test]
    fn finiteness_check() {
        let t = Tensor::from_f64(vec![2], vec![1.0, f64::NEG_INFINITY]).unwrap();
        assert!(!t.all_finite());
        let t = Tensor::from_f32(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(t.all_finite());
    }
}
