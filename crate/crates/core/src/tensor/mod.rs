//! Dense tensor values and the reverse-mode differentiation tape.
//!
//! Tensors are row-major 64-bit real arrays. The plain operations here
//! compute values only; [`tape::Tape`] wraps the same kernels and records
//! backward rules so a scalar loss can be differentiated with respect to
//! any leaf that requires gradients.

mod adam;
pub mod tape;

pub use adam::{adam_step, AdamState};
pub use tape::{GradientMap, Tape, Var};

use crate::error::{Error, Result};
use rand::Rng;

/// Dense n-dimensional array of 64-bit reals, stored row-major.
///
/// `requires_grad` marks the tensor as a differentiation leaf when it is
/// inserted into a [`Tape`]; `tape_id` is filled in by the tape at that
/// point and identifies the tensor's node for gradient lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    tape_id: Option<usize>,
}

impl Tensor {
    /// Builds a tensor from a shape and row-major data.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            tape_id: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            tape_id: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            tape_id: None,
        }
    }

    /// 2-D convenience constructor (rows × cols).
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        if r == 0 {
            return Err(Error::shape("from_rows: empty row list"));
        }
        let c = rows[0].len();
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("from_rows: ragged rows"));
        }
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    /// Uniform random tensor in `[lo, hi)` drawn from `rng`.
    pub fn rand_uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.random_range(lo..hi)).collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
            tape_id: None,
        }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn tape_id(&self) -> Option<usize> {
        self.tape_id
    }

    pub(crate) fn set_tape_id(&mut self, id: usize) {
        self.tape_id = Some(id);
    }

    /// A tensor is scalar when it holds exactly one element.
    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(Error::contract(format!(
                "item() on non-scalar tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Row-major element access for 2-D tensors.
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn has_nan(&self) -> bool {
        self.data.iter().any(|x| !x.is_finite())
    }

    /// Matrix product of two 2-D tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (self, other);
        if a.shape.len() != 2 || b.shape.len() != 2 {
            return Err(Error::shape(format!(
                "matmul expects 2-D operands, got {:?} and {:?}",
                a.shape, b.shape
            )));
        }
        let (n, k) = (a.shape[0], a.shape[1]);
        let (k2, m) = (b.shape[0], b.shape[1]);
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions disagree: {:?} x {:?}",
                a.shape, b.shape
            )));
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for p in 0..k {
                let aip = a.data[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &b.data[p * m..(p + 1) * m];
                let orow = &mut out[i * m..(i + 1) * m];
                for j in 0..m {
                    orow[j] += aip * brow[j];
                }
            }
        }
        Tensor::new(vec![n, m], out)
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::shape(format!(
                "transpose expects a 2-D tensor, got {:?}",
                self.shape
            )));
        }
        let (n, m) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = self.data[i * m + j];
            }
        }
        Tensor::new(vec![m, n], out)
    }

    pub fn relu(&self) -> Tensor {
        self.map(|x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map(sigmoid_scalar)
    }

    pub fn square(&self) -> Tensor {
        self.map(|x| x * x)
    }

    pub fn sqrt(&self) -> Tensor {
        self.map(f64::sqrt)
    }

    /// Mean of all elements, as a scalar tensor.
    pub fn mean(&self) -> Tensor {
        Tensor::scalar(self.data.iter().sum::<f64>() / self.numel() as f64)
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&self) -> Tensor {
        Tensor::scalar(self.data.iter().sum::<f64>())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "div", |a, b| a / b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| c * x)
    }

    pub fn add_const(&self, c: f64) -> Tensor {
        self.map(|x| x + c)
    }

    /// Adds a length-C bias vector to every row of an N×C tensor.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::shape(format!(
                "add_bias expects a 2-D input, got {:?}",
                self.shape
            )));
        }
        let (n, c) = (self.shape[0], self.shape[1]);
        if bias.numel() != c {
            return Err(Error::shape(format!(
                "bias length {} does not match {} columns",
                bias.numel(),
                c
            )));
        }
        let mut out = self.data.clone();
        for i in 0..n {
            for j in 0..c {
                out[i * c + j] += bias.data[j];
            }
        }
        Tensor::new(vec![n, c], out)
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
            requires_grad: false,
            tape_id: None,
        }
    }

    /// Binary elementwise op. Exact-shape, or scalar broadcast on either side.
    fn zip(&self, other: &Tensor, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect();
            return Tensor::new(self.shape.clone(), data);
        }
        if other.is_scalar() {
            let b = other.data[0];
            return Tensor::new(
                self.shape.clone(),
                self.data.iter().map(|&a| f(a, b)).collect(),
            );
        }
        if self.is_scalar() {
            let a = self.data[0];
            return Tensor::new(
                other.shape.clone(),
                other.data.iter().map(|&b| f(a, b)).collect(),
            );
        }
        Err(Error::shape(format!(
            "{name}: shapes {:?} and {:?} are not exact-equal and neither is scalar",
            self.shape, other.shape
        )))
    }
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
