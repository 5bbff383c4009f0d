//! Dense 4-D grids in (batch, channels, rows, cols) layout.
//!
//! Row-major storage: the flat index of (b, c, r, w) is
//! `((b*C + c)*R + r)*W + w`, so a (b, c) plane is one contiguous slice.

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct Shape {
    pub batch: usize,
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub const fn new(batch: usize, channels: usize, rows: usize, cols: usize) -> Self {
        Shape {
            batch,
            channels,
            rows,
            cols,
        }
    }

    /// Total number of elements.
    pub const fn len(&self) -> usize {
        self.batch * self.channels * self.rows * self.cols
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements in one (batch, channel) plane.
    pub const fn plane_len(&self) -> usize {
        self.rows * self.cols
    }

    /// Scalar shape used by loss nodes.
    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{}x{}x{}",
            self.batch, self.channels, self.rows, self.cols
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Grid<T> {
    pub fn zeros(shape: Shape) -> Self {
        Grid {
            shape,
            data: vec![T::zero(); shape.len()],
        }
    }

    pub fn filled(shape: Shape, value: T) -> Self {
        Grid {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {} wants {} values, got {}", shape, shape.len(), data.len()),
            ));
        }
        Ok(Grid { shape, data })
    }

    /// Single scalar value wrapped in a 1x1x1x1 grid.
    pub fn scalar(value: T) -> Self {
        Grid {
            shape: Shape::scalar(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn idx(&self, b: usize, c: usize, r: usize, w: usize) -> usize {
        debug_assert!(
            b < self.shape.batch
                && c < self.shape.channels
                && r < self.shape.rows
                && w < self.shape.cols
        );
        ((b * self.shape.channels + c) * self.shape.rows + r) * self.shape.cols + w
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, r: usize, w: usize) -> T {
        self.data[self.idx(b, c, r, w)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, r: usize, w: usize, v: T) {
        let i = self.idx(b, c, r, w);
        self.data[i] = v;
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

    /// Contiguous (batch, channel) plane.
    #[inline]
    pub fn plane(&self, b: usize, c: usize) -> &[T] {
        let n = self.shape.plane_len();
        let start = (b * self.shape.channels + c) * n;
        &self.data[start..start + n]
    }

    #[inline]
    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [T] {
        let n = self.shape.plane_len();
        let start = (b * self.shape.channels + c) * n;
        &mut self.data[start..start + n]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Grid<T> {
        Grid {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise sum of all entries.
    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Adds `other` elementwise; shapes must match.
    pub fn add_assign(&mut self, other: &Grid<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "add_assign",
                format!("{} vs {}", self.shape, other.shape),
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Errors unless every entry is finite.
    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::Domain(format!("{what}: non-finite entries")))
        }
    }

    /// Converts element type (used at float32 storage boundaries).
    pub fn cast<U: Scalar>(&self) -> Grid<U> {
        Grid {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }
}
