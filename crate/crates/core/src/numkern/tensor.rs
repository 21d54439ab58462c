//! Dense row-major tensors, real or complex.

use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    Real,
    Complex,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Storage {
    Real(Vec<f64>),
    Complex(Vec<Complex64>),
}

/// Shape plus row-major storage. Complex cotangents hold `(dL/dre, dL/dim)`
/// in the real and imaginary slots.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    storage: Storage,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn zeros(shape: &[usize], dtype: Dtype) -> Self {
        let n = numel(shape);
        let storage = match dtype {
            Dtype::Real => Storage::Real(vec![0.0; n]),
            Dtype::Complex => Storage::Complex(vec![Complex64::new(0.0, 0.0); n]),
        };
        Self {
            shape: shape.to_vec(),
            storage,
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(&other.shape, other.dtype())
    }

    pub fn from_real(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel(shape),
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            storage: Storage::Real(data),
        })
    }

    pub fn from_complex(shape: &[usize], data: Vec<Complex64>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel(shape),
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            storage: Storage::Complex(data),
        })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            storage: Storage::Real(vec![value]),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    pub fn dtype(&self) -> Dtype {
        match self.storage {
            Storage::Real(_) => Dtype::Real,
            Storage::Complex(_) => Dtype::Complex,
        }
    }

    pub fn is_complex(&self) -> bool {
        matches!(self.storage, Storage::Complex(_))
    }

    pub fn storage(&self) -> &Storage {
        &self.storage
    }

    /// Real payload. Panics on a complex tensor.
    pub fn re(&self) -> &[f64] {
        match &self.storage {
            Storage::Real(v) => v,
            Storage::Complex(_) => panic!("real view of complex tensor {:?}", self.shape),
        }
    }

    pub fn re_mut(&mut self) -> &mut [f64] {
        match &mut self.storage {
            Storage::Real(v) => v,
            Storage::Complex(_) => panic!("real view of complex tensor"),
        }
    }

    /// Complex payload. Panics on a real tensor.
    pub fn cx(&self) -> &[Complex64] {
        match &self.storage {
            Storage::Complex(v) => v,
            Storage::Real(_) => panic!("complex view of real tensor {:?}", self.shape),
        }
    }

    pub fn cx_mut(&mut self) -> &mut [Complex64] {
        match &mut self.storage {
            Storage::Complex(v) => v,
            Storage::Real(_) => panic!("complex view of real tensor"),
        }
    }

    pub fn into_real(self) -> Vec<f64> {
        match self.storage {
            Storage::Real(v) => v,
            Storage::Complex(_) => panic!("into_real on complex tensor"),
        }
    }

    pub fn into_complex(self) -> Vec<Complex64> {
        match self.storage {
            Storage::Complex(v) => v,
            Storage::Real(_) => panic!("into_complex on real tensor"),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Promote to complex with zero imaginary part (no-op for complex).
    pub fn to_complex(&self) -> Tensor {
        match &self.storage {
            Storage::Complex(_) => self.clone(),
            Storage::Real(v) => Tensor {
                shape: self.shape.clone(),
                storage: Storage::Complex(v.iter().map(|&x| Complex64::new(x, 0.0)).collect()),
            },
        }
    }

    pub fn real_part(&self) -> Tensor {
        match &self.storage {
            Storage::Real(_) => self.clone(),
            Storage::Complex(v) => Tensor {
                shape: self.shape.clone(),
                storage: Storage::Real(v.iter().map(|z| z.re).collect()),
            },
        }
    }

    /// Frobenius norm over all (real and imaginary) components.
    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    pub fn norm_sqr(&self) -> f64 {
        match &self.storage {
            Storage::Real(v) => v.iter().map(|x| x * x).sum(),
            Storage::Complex(v) => v.iter().map(|z| z.norm_sqr()).sum(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        match &self.storage {
            Storage::Real(v) => v.iter().fold(0.0, |m, x| m.max(x.abs())),
            Storage::Complex(v) => v.iter().fold(0.0, |m, z| m.max(z.norm())),
        }
    }

    pub fn is_finite(&self) -> bool {
        match &self.storage {
            Storage::Real(v) => v.iter().all(|x| x.is_finite()),
            Storage::Complex(v) => v.iter().all(|z| z.re.is_finite() && z.im.is_finite()),
        }
    }

    /// `self += other`, elementwise. Shapes and dtypes must agree.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        match (&mut self.storage, &other.storage) {
            (Storage::Real(a), Storage::Real(b)) => {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
            }
            (Storage::Complex(a), Storage::Complex(b)) => {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
            }
            _ => panic!("add_assign dtype mismatch"),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        match &mut self.storage {
            Storage::Real(a) => a.iter_mut().for_each(|x| *x *= factor),
            Storage::Complex(a) => a.iter_mut().for_each(|x| *x *= factor),
        }
    }

    /// Flat view as real components: complex values expand to `(re, im)` pairs.
    pub fn components(&self) -> Vec<f64> {
        match &self.storage {
            Storage::Real(v) => v.clone(),
            Storage::Complex(v) => v.iter().flat_map(|z| [z.re, z.im]).collect(),
        }
    }

    /// Inverse of [`Tensor::components`].
    pub fn from_components(shape: &[usize], dtype: Dtype, data: Vec<f64>) -> Result<Self> {
        match dtype {
            Dtype::Real => Self::from_real(shape, data),
            Dtype::Complex => {
                if data.len() % 2 != 0 {
                    return Err(Error::Shape("odd component count for complex tensor".into()));
                }
                let v = data.chunks_exact(2).map(|c| Complex64::new(c[0], c[1])).collect();
                Self::from_complex(shape, v)
            }
        }
    }

    /// Number of real degrees of freedom.
    pub fn n_components(&self) -> usize {
        match &self.storage {
            Storage::Real(v) => v.len(),
            Storage::Complex(v) => 2 * v.len(),
        }
    }

    pub fn component(&self, i: usize) -> f64 {
        match &self.storage {
            Storage::Real(v) => v[i],
            Storage::Complex(v) => {
                if i % 2 == 0 {
                    v[i / 2].re
                } else {
                    v[i / 2].im
                }
            }
        }
    }

    pub fn set_component(&mut self, i: usize, value: f64) {
        match &mut self.storage {
            Storage::Real(v) => v[i] = value,
            Storage::Complex(v) => {
                if i % 2 == 0 {
                    v[i / 2].re = value
                } else {
                    v[i / 2].im = value
                }
            }
        }
    }

    /// Real inner product `sum(re(a)*re(b) + im(a)*im(b))`.
    pub fn dot(&self, other: &Tensor) -> f64 {
        match (&self.storage, &other.storage) {
            (Storage::Real(a), Storage::Real(b)) => a.iter().zip(b).map(|(x, y)| x * y).sum(),
            (Storage::Complex(a), Storage::Complex(b)) => a
                .iter()
                .zip(b)
                .map(|(x, y)| x.re * y.re + x.im * y.im)
                .sum(),
            _ => panic!("dot dtype mismatch"),
        }
    }
}
