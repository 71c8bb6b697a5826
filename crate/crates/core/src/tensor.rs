use std::fmt;

use crate::error::TensorError;

/// Element type tag, used by checkpoints and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Dtype> {
        match tag {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Float element trait: everything the kernels need from f32/f64.
///
/// Training runs in f32; gradient checking runs in f64. Keeping the kernels
/// generic means both paths exercise the very same code.
pub trait Scalar:
    num_traits::Float + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    /// Reads one element; `bytes` must hold exactly `DTYPE.size()` bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("f32 needs 4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("f64 needs 8 bytes"))
    }
}

/// Dense row-major tensor. Layout for rank-4 is NCHW; flat offset of
/// `(n, c, h, w)` is `((n*C + c)*H + h)*W + w`.
#[derive(Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    /// Builds a tensor, checking that `data` matches the shape product and
    /// that no extent is zero.
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self, TensorError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroExtent { shape });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLenMismatch {
                expected,
                got: data.len(),
                shape,
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, S::zero())
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        assert!(
            shape.iter().all(|&d| d > 0),
            "tensor shape {shape:?} contains a zero extent"
        );
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// A 1-element tensor holding `value`.
    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let numel: usize = shape.iter().product();
        assert!(shape.iter().all(|&d| d > 0));
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(|i| f(i)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Interprets the shape as (N, C, H, W); errors if the rank is not 4.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize), TensorError> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            other => Err(TensorError::BadRank {
                op,
                expected: 4,
                got: other.to_vec(),
            }),
        }
    }

    /// Value of the single element of a scalar tensor.
    pub fn item(&self) -> Result<S, TensorError> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(TensorError::NotScalar {
                numel: self.data.len(),
            })
        }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Element at (n, c, h, w). Convenience for tests; panics out of range.
    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> S {
        let (_, cc, hh, ww) = self
            .dims4("at4")
            .expect("at4 requires a rank-4 tensor");
        self.data[((n * cc + c) * hh + h) * ww + w]
    }

    /// In-place `self += other`; shapes must match exactly.
    pub fn add_assign(&mut self, other: &Tensor<S>) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::DimMismatch {
                op: "add_assign",
                dim: "numel",
                expected: self.numel(),
                got: other.numel(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + *b;
        }
        Ok(())
    }

    /// Casts element-wise through f64. Used to move a model between the
    /// training dtype and the gradient-check dtype.
    /// Reinterprets the buffer under a new shape with the same element
    /// count; the data is moved, never copied.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self, TensorError> {
        Tensor::new(shape, self.data)
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| T::from_f64(v.to_f64())).collect(),
        }
    }
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{} elements]", self.data.len())
        }
    }
}

/// Integer map tensor for class labels and predictions. Values are class
/// indices `0..C-1`; 255 is the reserved void/ignore id.
#[derive(Clone, PartialEq)]
pub struct IntTensor {
    shape: Vec<usize>,
    data: Vec<u8>,
}

/// Reserved label id meaning "no annotation here"; excluded from the loss
/// and from every metric.
pub const VOID: u8 = 255;

impl IntTensor {
    pub fn new(shape: Vec<usize>, data: Vec<u8>) -> Result<Self, TensorError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroExtent { shape });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLenMismatch {
                expected,
                got: data.len(),
                shape,
            });
        }
        Ok(IntTensor { shape, data })
    }

    pub fn full(shape: &[usize], value: u8) -> Self {
        assert!(shape.iter().all(|&d| d > 0));
        let numel = shape.iter().product();
        IntTensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }
}

impl fmt::Debug for IntTensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "IntTensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{} elements]", self.data.len())
        }
    }
}

/// Argmax locations recorded by max-pooling, consumed by unpooling and by
/// the pooling backward pass. `indices[i]` is the flat offset into the
/// *pre-pool* tensor that produced pooled element `i`.
#[derive(Clone, PartialEq, Debug)]
pub struct IndexMap {
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    indices: Vec<u32>,
}

impl IndexMap {
    pub(crate) fn new(input_shape: Vec<usize>, output_shape: Vec<usize>, indices: Vec<u32>) -> Self {
        debug_assert_eq!(output_shape.iter().product::<usize>(), indices.len());
        IndexMap {
            input_shape,
            output_shape,
            indices,
        }
    }

    /// Shape of the tensor the pool consumed (= shape unpooling produces).
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    /// Shape of the pooled tensor (= shape unpooling consumes).
    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }
}
