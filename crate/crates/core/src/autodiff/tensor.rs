use rustfft::num_complex::Complex64;

use crate::{Error, Result};

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Dense row-major `f64` tensor. An empty shape is a scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel_of(&shape) != data.len() {
            return Err(Error::contract(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel_of(&shape),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Like [`Tensor::new`] but panics on a size mismatch; for internal use
    /// where the size is correct by construction.
    pub fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(numel_of(&shape), data.len(), "shape {shape:?} does not match buffer");
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel_of(shape)],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel_of(shape)],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(values: &[f64]) -> Self {
        Self {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel_of(shape) != self.data.len() {
            return Err(Error::contract(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn to_complex(&self) -> ComplexTensor {
        ComplexTensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        )
    }
}

/// Dense row-major complex tensor; appears only inside spectral subgraphs.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexTensor {
    shape: Vec<usize>,
    data: Vec<Complex64>,
}

impl ComplexTensor {
    pub fn new(shape: Vec<usize>, data: Vec<Complex64>) -> Result<Self> {
        if numel_of(&shape) != data.len() {
            return Err(Error::contract(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel_of(&shape),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_parts(shape: Vec<usize>, data: Vec<Complex64>) -> Self {
        assert_eq!(numel_of(&shape), data.len(), "shape {shape:?} does not match buffer");
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![Complex64::new(0.0, 0.0); numel_of(shape)],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn re(&self) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|z| z.re).collect())
    }

    pub fn im(&self) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|z| z.im).collect())
    }

    pub fn abs(&self) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|z| z.norm()).collect())
    }
}
