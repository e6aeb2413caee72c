use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::SplitMix64;

/// Dense row-major tensor. Plain value type: parameters, constants, and
/// results extracted from a trace all live here. Gradients are tracked by
/// the [`crate::tape::Tape`], not on the tensor itself.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![F::zero(); numel] }
    }

    pub fn scalar(x: F) -> Self {
        Tensor { shape: vec![1], data: vec![x] }
    }

    pub fn filled(shape: Vec<usize>, x: F) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![x; numel] }
    }

    /// Row vector [1, d].
    pub fn row(values: Vec<F>) -> Self {
        Tensor { shape: vec![1, values.len()], data: values }
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let cols = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged rows".to_string()));
        }
        let data: Vec<F> = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), cols], data)
    }

    /// Xavier/Glorot uniform init, bound sqrt(6 / (fan_in + fan_out)), drawn
    /// from the fixed splitmix64 stream.
    pub fn xavier(rows: usize, cols: usize, rng: &mut SplitMix64) -> Self {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| F::of(rng.uniform(-bound, bound))).collect();
        Tensor { shape: vec![rows, cols], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    pub fn at2(&self, i: usize, j: usize) -> F {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, x: F) {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j] = x;
    }

    pub fn row_slice(&self, i: usize) -> &[F] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|v| v.as_f64() as f32).collect()
    }

    pub fn from_f32(shape: Vec<usize>, values: &[f32]) -> Result<Self> {
        Tensor::new(shape, values.iter().map(|&v| F::of(v as f64)).collect())
    }

    pub fn max_abs_diff(&self, other: &Tensor<F>) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}
