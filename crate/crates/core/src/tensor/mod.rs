//! Dense N-dimensional tensors with reverse-mode automatic differentiation.
//!
//! Volumes follow the axis order `(channel, x, y, z)`, with an optional
//! leading batch axis. Storage is contiguous row-major (z fastest).

mod conv;
mod gradcheck;
mod tape;

pub use gradcheck::{finite_diff_check, finite_diff_check_sampled};
pub use tape::{Gradients, Op, Tape, Var};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;
use thiserror::Error;

/// Scalar element type for tensors: f32 for training throughput, f64 for
/// oracle-grade verification.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const BYTES: usize;
    fn dtype_name() -> &'static str;
    fn write_le(self, buf: &mut Vec<u8>);
    fn read_le(buf: &[u8]) -> Self;
}

impl Scalar for f32 {
    const BYTES: usize = 4;
    fn dtype_name() -> &'static str {
        "f32le"
    }
    fn write_le(self, buf: &mut Vec<u8>) {
        buf.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(buf: &[u8]) -> Self {
        f32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]])
    }
}

impl Scalar for f64 {
    const BYTES: usize = 8;
    fn dtype_name() -> &'static str {
        "f64le"
    }
    fn write_le(self, buf: &mut Vec<u8>) {
        buf.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(buf: &[u8]) -> Self {
        f64::from_le_bytes([
            buf[0], buf[1], buf[2], buf[3], buf[4], buf[5], buf[6], buf[7],
        ])
    }
}

/// Shorthand for converting an f64 literal into the active scalar type.
#[inline]
pub fn s<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("f64 -> Scalar conversion")
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{context}: size mismatch on {axis} axis: expected {expected}, got {got}")]
    AxisMismatch {
        context: &'static str,
        axis: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{context}: expected tensor of rank 4 (C,X,Y,Z) or 5 (N,C,X,Y,Z), got shape {shape:?}")]
    BadRank {
        context: &'static str,
        shape: Vec<usize>,
    },
    #[error("{context}: shape {shape:?} has a zero extent")]
    ZeroExtent {
        context: &'static str,
        shape: Vec<usize>,
    },
    #[error("{context}: data length {len} does not match shape {shape:?}")]
    DataLength {
        context: &'static str,
        shape: Vec<usize>,
        len: usize,
    },
    #[error("conv3d: stride-1 convolution requires odd kernel extents for symmetric padding, got {extent} on {axis}")]
    EvenKernel { axis: &'static str, extent: usize },
    #[error("max_pool3d: {axis} extent {extent} is not divisible by stride {stride}; choose a volume shape divisible by the pooling stride")]
    PoolIndivisible {
        axis: &'static str,
        extent: usize,
        stride: usize,
    },
    #[error("backward: loss node must be scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{context}: stride must be >= 1")]
    BadStride { context: &'static str },
}

/// Dense tensor: contiguous row-major storage plus a shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        if shape.iter().any(|&e| e == 0) {
            return Err(TensorError::ZeroExtent {
                context: "Tensor::new",
                shape,
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::DataLength {
                context: "Tensor::new",
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        Tensor {
            shape: shape.to_vec(),
            data: values.iter().map(|&v| s(v)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map_to<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }

    /// Interpret the shape as `(batch, channels, x, y, z)`. Rank-4 tensors
    /// are a batch of one.
    pub fn volume_dims(&self, context: &'static str) -> Result<VolumeDims, TensorError> {
        match self.shape.len() {
            4 => Ok(VolumeDims {
                batch: 1,
                channels: self.shape[0],
                x: self.shape[1],
                y: self.shape[2],
                z: self.shape[3],
                batched: false,
            }),
            5 => Ok(VolumeDims {
                batch: self.shape[0],
                channels: self.shape[1],
                x: self.shape[2],
                y: self.shape[3],
                z: self.shape[4],
                batched: true,
            }),
            _ => Err(TensorError::BadRank {
                context,
                shape: self.shape.clone(),
            }),
        }
    }
}

/// Shape of a (possibly batched) volume tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VolumeDims {
    pub batch: usize,
    pub channels: usize,
    pub x: usize,
    pub y: usize,
    pub z: usize,
    pub batched: bool,
}

impl VolumeDims {
    pub fn spatial(&self) -> [usize; 3] {
        [self.x, self.y, self.z]
    }

    pub fn spatial_numel(&self) -> usize {
        self.x * self.y * self.z
    }

    pub fn channel_numel(&self) -> usize {
        self.spatial_numel()
    }

    /// Rebuild a shape vector with the same rank convention and new
    /// channel/spatial extents.
    pub fn to_shape(&self, channels: usize, spatial: [usize; 3]) -> Vec<usize> {
        if self.batched {
            vec![self.batch, channels, spatial[0], spatial[1], spatial[2]]
        } else {
            vec![channels, spatial[0], spatial[1], spatial[2]]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_new_validates_length() {
        let err = Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::DataLength { .. }));
    }

    #[test]
    fn tensor_new_rejects_zero_extent() {
        let err = Tensor::<f64>::new(vec![2, 0, 3], vec![]).unwrap_err();
        assert!(matches!(err, TensorError::ZeroExtent { .. }));
    }

    #[test]
    fn volume_dims_rank4_and_rank5() {
        let t = Tensor::<f32>::zeros(&[2, 4, 4, 4]);
        let d = t.volume_dims("test").unwrap();
        assert_eq!((d.batch, d.channels, d.x, d.y, d.z), (1, 2, 4, 4, 4));
        assert!(!d.batched);

        let t = Tensor::<f32>::zeros(&[3, 2, 4, 4, 4]);
        let d = t.volume_dims("test").unwrap();
        assert_eq!((d.batch, d.channels), (3, 2));
        assert!(d.batched);

        assert!(Tensor::<f32>::zeros(&[4, 4]).volume_dims("test").is_err());
    }
}
