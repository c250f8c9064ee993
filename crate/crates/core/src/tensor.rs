//! Dense row-major tensors of rank 1 to 4.
//!
//! The axis order is (batch, channels, rows, cols); lower ranks drop leading
//! axes. This is the single numeric currency of the whole crate: patches,
//! feature maps, weights and descriptors are all `Tensor`s.

use std::fmt;

use num_traits::Float;

use crate::error::{Error, Result};

/// Scalar element type of a [`Tensor`].
///
/// Implemented for `f32` (training, checkpoints, descriptor files) and `f64`
/// (gradient checking, where central differences need the extra precision).
pub trait Scalar:
    Float + Send + Sync + fmt::Debug + fmt::Display + std::iter::Sum + 'static
{
    /// General matrix multiply `C := alpha·A·B + beta·C` with explicit
    /// row/column strides per operand. `m × k`, `k × n`, `m × n`.
    ///
    /// # Safety
    /// The pointers must be valid for the strided extents implied by
    /// `(m, k, n)` and the stride arguments.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64(v: f64) -> Self {
        num_traits::cast(v).expect("f64 conversion")
    }

    fn to_f64(self) -> f64 {
        num_traits::cast(self).expect("f64 conversion")
    }
}

impl Scalar for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Dense tensor with explicit shape and row-major data.
///
/// Invariants: every extent ≥ 1, rank between 1 and 4, and
/// `data.len() == shape.iter().product()`.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor from a shape and row-major data, validating the
    /// invariants.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Self::check_shape(shape)?;
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::shape("tensor", "data length", expected, data.len()));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// All-zeros tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::check_shape(shape).expect("valid shape");
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    /// Tensor whose elements are produced by `f(flat_index)`.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        Self::check_shape(shape).expect("valid shape");
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    fn check_shape(shape: &[usize]) -> Result<()> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(Error::invalid(
                "tensor",
                format!("rank must be 1..=4, got {}", shape.len()),
            ));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::invalid(
                "tensor",
                format!("all extents must be >= 1, got {shape:?}"),
            ));
        }
        Ok(())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::check_shape(shape)?;
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::shape(
                "reshape",
                "element count",
                self.data.len(),
                expected,
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    /// Extents of a rank-4 tensor, with a structured error naming the axis
    /// when the rank is wrong.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        if self.rank() != 4 {
            return Err(Error::shape(op, "rank", 4, self.rank()));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2], self.shape[3]))
    }

    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.rank() != 2 {
            return Err(Error::shape(op, "rank", 2, self.rank()));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    /// Element at a multi-index; test/debug convenience, not a hot path.
    pub fn at(&self, idx: &[usize]) -> T {
        assert_eq!(idx.len(), self.rank(), "index rank");
        let mut flat = 0;
        for (i, (&ix, &ext)) in idx.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of range on axis {i}");
            flat = flat * ext + ix;
        }
        self.data[flat]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same-shape check yielding a structured error.
    pub fn require_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            for (axis, (&a, &b)) in self.shape.iter().zip(&other.shape).enumerate() {
                if a != b {
                    let name = ["axis 0", "axis 1", "axis 2", "axis 3"][axis];
                    return Err(Error::shape(op, name, a, b));
                }
            }
            return Err(Error::shape(op, "rank", self.rank(), other.rank()));
        }
        Ok(())
    }

    /// Converts the element type, e.g. an `f32` network into the `f64` copy
    /// the gradient checker runs on.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64(Scalar::to_f64(v)))
                .collect(),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{} values]", self.data.len())
        }
    }
}

/// A value tensor paired with its accumulated cotangent of identical shape.
#[derive(Clone, Debug)]
pub struct GradPair<T: Scalar = f32> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> GradPair<T> {
    pub fn new(value: Tensor<T>, grad: Tensor<T>) -> Result<Self> {
        value.require_same_shape(&grad, "grad pair")?;
        Ok(GradPair { value, grad })
    }

    /// Pairs a value with an all-zero cotangent.
    pub fn seeded(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        GradPair { value, grad }
    }
}
