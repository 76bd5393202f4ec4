use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating point element type of a tensor. `f64` is used for gradient
/// checks, `f32` for training.
pub trait Real: Float + Debug + Default + Sum + Send + Sync + 'static {
    const DTYPE: &'static str;

    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";

    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Row-major dense array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "tensor of shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn scalar(x: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![x],
        }
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Tensor::new(shape, data.iter().map(|&x| T::of(x)).collect())
    }

    /// A `rows x cols` matrix from row slices of equal length.
    pub fn from_rows(rows: &[Vec<f64>], cols: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Dimension(format!(
                    "row {i} has width {}, expected {cols}",
                    r.len()
                )));
            }
            data.extend(r.iter().map(|&x| T::of(x)));
        }
        Ok(Tensor {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::of(x.as_f64())).collect(),
        }
    }
}

pub(crate) fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => {
            let cols = shape[shape.len() - 1];
            (shape[..shape.len() - 1].iter().product(), cols)
        }
    }
}
