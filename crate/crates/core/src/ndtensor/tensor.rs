use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Extents of a dense array: one to three positive axes.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.len() > 3 {
            return Err(Error::Argument(format!(
                "shape must have 1 to 3 axes, got {dims:?}"
            )));
        }
        if dims.contains(&0) {
            return Err(Error::Argument(format!(
                "shape extents must be positive, got {dims:?}"
            )));
        }
        Ok(Shape(dims.to_vec()))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// `(rows, cols)` view: a vector is one row, a 3-axis array folds its
    /// leading axes into rows.
    pub fn as_rows_cols(&self) -> (usize, usize) {
        let cols = *self.0.last().expect("non-empty shape");
        (self.numel() / cols, cols)
    }
}

/// Dense row-major array of scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(Error::Argument(format!(
                "shape {dims:?} holds {} values, got {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let n = shape.numel();
        Ok(Tensor {
            shape,
            data: vec![T::zero(); n],
        })
    }

    pub fn filled(dims: &[usize], value: T) -> Result<Self> {
        let mut t = Self::zeros(dims)?;
        t.data.iter_mut().for_each(|x| *x = value);
        Ok(t)
    }

    pub fn scalar(x: T) -> Self {
        Tensor {
            shape: Shape(vec![1]),
            data: vec![x],
        }
    }

    pub fn vector(data: Vec<T>) -> Result<Self> {
        let n = data.len();
        Self::from_vec(&[n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::from_vec(&[rows, cols], data)
    }

    /// Builds from `f64` literals; convenient in tests.
    pub fn from_f64(dims: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(dims, data.iter().map(|&x| T::lit(x)).collect())
    }

    pub(crate) fn from_parts(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Single value of a one-element tensor.
    pub fn item(&self) -> Option<T> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn reshaped(&self, dims: &[usize]) -> Result<Self> {
        Self::from_vec(dims, self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

fn view<T>(data: &[T], rows: usize, cols: usize) -> ArrayView2<'_, T> {
    ArrayView2::from_shape((rows, cols), data).expect("buffer matches declared matrix shape")
}

fn collect<T: Scalar>(c: ndarray::Array2<T>) -> Vec<T> {
    if c.is_standard_layout() {
        c.into_raw_vec_and_offset().0
    } else {
        c.iter().copied().collect()
    }
}

/// `a [m×k] · b [k×n]`.
pub(crate) fn matmul<T: Scalar>(a: &[T], m: usize, k: usize, b: &[T], n: usize) -> Vec<T> {
    collect(view(a, m, k).dot(&view(b, k, n)))
}

/// `aᵀ · b` where `a` is stored `[k×m]` and `b` is `[k×n]`.
pub(crate) fn matmul_tn<T: Scalar>(a: &[T], k: usize, m: usize, b: &[T], n: usize) -> Vec<T> {
    collect(view(a, k, m).t().dot(&view(b, k, n)))
}

/// `a · bᵀ` where `a` is `[m×k]` and `b` is stored `[n×k]`.
pub(crate) fn matmul_nt<T: Scalar>(a: &[T], m: usize, k: usize, b: &[T], n: usize) -> Vec<T> {
    collect(view(a, m, k).dot(&view(b, n, k).t()))
}
