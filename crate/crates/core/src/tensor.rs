//! Dense row-major `f32` tensors and the multiply-accumulate counter.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Sub};

use crate::error::{shape_err, Result};

/// Dense tensor with an explicit shape; the last dimension varies fastest.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() {
            return Err(shape_err("tensor must have at least one dimension"));
        }
        if shape.contains(&0) {
            return Err(shape_err(format!("zero-sized dimension in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(shape_err(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: impl Into<Vec<usize>>, value: f32) -> Result<Self> {
        let shape = shape.into();
        let len = shape.iter().product();
        Self::new(shape, vec![value; len])
    }

    /// Builds a tensor whose elements are produced by `f` in row-major order.
    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut() -> f32) -> Result<Self> {
        let shape = shape.into();
        let len = shape.iter().product();
        Self::new(shape, (0..len).map(|_| f()).collect())
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Flat offset of a multi-index; panics on rank mismatch or out-of-range coordinates.
    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
                acc * d + i
            })
    }

    pub fn get(&self, index: &[usize]) -> f32 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f32) {
        let at = self.offset(index);
        self.data[at] = value;
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Interprets the tensor as `[H, W, C]`.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match *self.shape.as_slice() {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(shape_err(format!("expected rank-3 [H,W,C], got {:?}", self.shape))),
        }
    }

    /// Interprets the tensor as `[T, H, W, C]`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [t, h, w, c] => Ok((t, h, w, c)),
            _ => Err(shape_err(format!("expected rank-4 [T,H,W,C], got {:?}", self.shape))),
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= PREVIEW {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}..", &self.data[..PREVIEW])
        }
    }
}

/// Number of multiply-accumulate operations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MacCount(pub u64);

impl MacCount {
    pub const ZERO: MacCount = MacCount(0);

    pub fn of(dims: &[usize]) -> Self {
        MacCount(dims.iter().map(|&d| d as u64).product())
    }

    pub fn get(self) -> u64 {
        self.0
    }
}

impl Add for MacCount {
    type Output = MacCount;
    fn add(self, rhs: MacCount) -> MacCount {
        MacCount(self.0 + rhs.0)
    }
}

impl AddAssign for MacCount {
    fn add_assign(&mut self, rhs: MacCount) {
        self.0 += rhs.0;
    }
}

impl Sub for MacCount {
    type Output = MacCount;
    fn sub(self, rhs: MacCount) -> MacCount {
        MacCount(self.0 - rhs.0)
    }
}

impl Sum for MacCount {
    fn sum<I: Iterator<Item = MacCount>>(iter: I) -> MacCount {
        iter.fold(MacCount::ZERO, Add::add)
    }
}

impl fmt::Display for MacCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} MAC", self.0)
    }
}
