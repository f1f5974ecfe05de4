//! Dense row-major tensors and the reverse-mode differentiation engine.
//!
//! Real tensors are generic over [`Real`] (`f32` for training throughput,
//! `f64` for the finite-difference oracles). Complex tensors appear only as
//! intermediates of the Fourier-domain pipeline.

pub mod fft;
pub mod gradcheck;
pub mod graph;

use num_complex::Complex;
use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Scalar element of a real tensor.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    /// Dtype code used by the tensor file format.
    const DTYPE_CODE: u8;

    fn of_f64(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 conversion")
    }
    fn of_usize(v: usize) -> Self {
        <Self as FromPrimitive>::from_usize(v).expect("usize conversion")
    }
    fn as_f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("f64 conversion")
    }
}

impl Real for f32 {
    const DTYPE_CODE: u8 = 0;
}
impl Real for f64 {
    const DTYPE_CODE: u8 = 1;
}

/// Dense real tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(dims: &[usize]) -> Self {
        Tensor { dims: dims.to_vec(), data: vec![T::zero(); dims.iter().product()] }
    }

    pub fn filled(dims: &[usize], v: T) -> Self {
        Tensor { dims: dims.to_vec(), data: vec![v; dims.iter().product()] }
    }

    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Dims(format!(
                "dims {:?} imply {} elements, got {}",
                dims,
                n,
                data.len()
            )));
        }
        Ok(Tensor { dims: dims.to_vec(), data })
    }

    pub fn scalar(v: T) -> Self {
        Tensor { dims: vec![1], data: vec![v] }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
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

    /// Reinterpret the buffer with new extents of equal element count.
    pub fn reshaped(&self, dims: &[usize]) -> Result<Self> {
        Tensor::from_vec(dims, self.data.clone())
    }

    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::NotScalar(self.data.len()));
        }
        Ok(self.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::of_f64(v.as_f64())).collect(),
        }
    }

    /// Last two extents, which every spatial operation treats as (height, width).
    pub fn spatial(&self) -> Result<(usize, usize)> {
        if self.dims.len() < 2 {
            return Err(Error::Dims(format!("need at least rank 2, got {:?}", self.dims)));
        }
        Ok((self.dims[self.dims.len() - 2], self.dims[self.dims.len() - 1]))
    }
}

/// Dense complex tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CTensor<T> {
    dims: Vec<usize>,
    data: Vec<Complex<T>>,
}

impl<T: Real> CTensor<T> {
    pub fn zeros(dims: &[usize]) -> Self {
        CTensor { dims: dims.to_vec(), data: vec![Complex::new(T::zero(), T::zero()); dims.iter().product()] }
    }

    pub fn from_vec(dims: &[usize], data: Vec<Complex<T>>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Dims(format!(
                "dims {:?} imply {} elements, got {}",
                dims,
                n,
                data.len()
            )));
        }
        Ok(CTensor { dims: dims.to_vec(), data })
    }

    pub fn from_real(t: &Tensor<T>) -> Self {
        CTensor {
            dims: t.dims.clone(),
            data: t.data.iter().map(|&v| Complex::new(v, T::zero())).collect(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[Complex<T>] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex<T>] {
        &mut self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }

    /// Elementwise magnitudes as a real tensor.
    pub fn modulus(&self) -> Tensor<T> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|z| z.norm()).collect(),
        }
    }

    /// Real parts as a real tensor.
    pub fn real_part(&self) -> Tensor<T> {
        Tensor { dims: self.dims.clone(), data: self.data.iter().map(|z| z.re).collect() }
    }

    pub fn spatial(&self) -> Result<(usize, usize)> {
        if self.dims.len() < 2 {
            return Err(Error::Dims(format!("need at least rank 2, got {:?}", self.dims)));
        }
        Ok((self.dims[self.dims.len() - 2], self.dims[self.dims.len() - 1]))
    }
}

/// Tensor loaded from a file, before the caller commits to a precision.
#[derive(Debug, Clone)]
pub enum DynTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl DynTensor {
    pub fn dims(&self) -> &[usize] {
        match self {
            DynTensor::F32(t) => t.dims(),
            DynTensor::F64(t) => t.dims(),
        }
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        match self {
            DynTensor::F32(t) => t.clone(),
            DynTensor::F64(t) => t.cast(),
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        match self {
            DynTensor::F32(t) => t.cast(),
            DynTensor::F64(t) => t.clone(),
        }
    }
}

pub(crate) fn is_power_of_two(n: usize) -> bool {
    n >= 1 && n & (n - 1) == 0
}

/// Corner-aligned interpolation weights along one axis: for each output
/// index, the two source indices and the fractional weight of the second.
pub(crate) fn bilinear_axis_weights(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            if n_out == 1 || n_in == 1 {
                return (0, 0, 0.0);
            }
            let pos = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
            let i0 = pos.floor() as usize;
            let i0 = i0.min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}
