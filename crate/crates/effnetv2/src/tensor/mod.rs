//! Dense 4-D tensors and the reverse-mode tape that differentiates them.
//!
//! Everything is NCHW. Tensors are immutable and cheaply cloneable (the
//! buffer is behind an `Arc`); ops never mutate their inputs. Vectors,
//! matrices, and scalars are represented with singleton dimensions, e.g. a
//! bias is `(1, c, 1, 1)` and a loss is `(1, 1, 1, 1)`.

mod tape;


pub use tape::{Tape, Var};

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Element type tag, used by checkpoints and diagnostics.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    /// Stable one-byte tag used in the checkpoint container.
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::F32 => write!(f, "f32"),
            DType::F64 => write!(f, "f64"),
        }
    }
}

/// Floating-point element of a tensor. Implemented for `f32` and `f64`;
/// training runs in either precision, gradient checking uses `f64`.
pub trait Scalar:
    num_traits::Float + Copy + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    const DTYPE: DType;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    /// Append the little-endian encoding of `self` to `out`.
    fn write_le(self, out: &mut Vec<u8>);
    /// Decode from little-endian bytes; `bytes.len()` must equal the dtype size.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("f32 is 4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64(x: f64) -> Self {
        x
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("f64 is 8 bytes"))
    }
}

/// NCHW extent of a tensor.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    /// Shape of a scalar value.
    pub fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    /// Shape of a per-channel vector (bias, batch-norm parameter).
    pub fn channels(c: usize) -> Self {
        Shape::new(1, c, 1, 1)
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat index of `(n, c, h, w)`. No bounds check; callers index within
    /// loops already bounded by the shape.
    #[inline(always)]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Immutable dense tensor. Cloning shares the buffer.
#[derive(Clone, Debug)]
pub struct Tensor<T> {
    shape: Shape,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(
                "tensor",
                format!("buffer of {} elements for shape {shape}", data.len()),
            ));
        }
        Ok(Tensor { shape, data: Arc::new(data) })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor { shape, data: Arc::new(vec![T::zero(); shape.len()]) }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor { shape, data: Arc::new(vec![value; shape.len()]) }
    }

    pub fn scalar(value: T) -> Self {
        Tensor::full(Shape::scalar(), value)
    }

    /// Build from a function of the flat index.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize) -> T) -> Self {
        let data = (0..shape.len()).map(|i| f(i)).collect();
        Tensor { shape, data: Arc::new(data) }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline(always)]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.shape.at(n, c, h, w)]
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> Result<T> {
        if self.shape.len() != 1 {
            return Err(Error::shape("item", format!("tensor of shape {} is not a scalar", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Mutable view of the buffer, copying only if it is shared.
    pub fn make_mut(&mut self) -> &mut [T] {
        Arc::<Vec<T>>::make_mut(&mut self.data).as_mut_slice()
    }

    /// Same values reinterpreted in another precision.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect();
        Tensor { shape: self.shape, data: Arc::new(data) }
    }

    /// Largest absolute element (0 for empty tensors).
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, &x| m.max(x.to_f64().abs()))
    }
}

/// Padding rule for convolutions.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Padding {
    /// Output spatial size `ceil(input / stride)`; for odd kernels the deficit
    /// splits with the extra row/column on the bottom/right.
    Same,
    /// No padding; output `floor((input - kernel) / stride) + 1`.
    Valid,
}

/// Whether stateful ops (batch norm, dropout, stochastic depth) behave as in
/// training or inference.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Eval,
}

/// Output rows/cols and top/left padding for one spatial axis.
///
/// Returns `(out, pad_before)`. `Same` keeps `out = ceil(in / stride)` with
/// `pad_before = (k - 1) / 2` regardless of stride, so a stride-2 layer halves
/// odd and even extents alike.
pub(crate) fn conv_extent(input: usize, kernel: usize, stride: usize, padding: Padding) -> Result<(usize, isize)> {
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            Ok((out, ((kernel - 1) / 2) as isize))
        }
        Padding::Valid => {
            if input < kernel {
                return Err(Error::shape(
                    "conv2d",
                    format!("valid padding needs input >= kernel, got {input} < {kernel}"),
                ));
            }
            Ok(((input - kernel) / stride + 1, 0))
        }
    }
}
