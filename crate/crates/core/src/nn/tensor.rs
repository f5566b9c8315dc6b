use serde::{Deserialize, Serialize};

use super::Scalar;
use crate::error::{Error, Result};

/// Channel-major 4D shape `(C, D, H, W)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape4 {
    pub c: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(c: usize, d: usize, h: usize, w: usize) -> Self {
        Self { c, d, h, w }
    }

    pub fn spatial(&self) -> usize {
        self.d * self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.c * self.spatial()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn with_channels(self, c: usize) -> Self {
        Self { c, ..self }
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.c, self.d, self.h, self.w]
    }
}

impl std::fmt::Display for Shape4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.c, self.d, self.h, self.w)
    }
}

/// Dense activation tensor, batch size one.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub shape: Shape4,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape4) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.len()],
        }
    }

    pub fn from_vec(shape: Shape4, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "{} values for shape {shape}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.shape.spatial();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Stack channels of `a` followed by channels of `b`.
    pub fn concat(a: &Self, b: &Self) -> Result<Self> {
        if (a.shape.d, a.shape.h, a.shape.w) != (b.shape.d, b.shape.h, b.shape.w) {
            return Err(Error::Shape(format!(
                "cannot concatenate {} and {}",
                a.shape, b.shape
            )));
        }
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Ok(Self {
            shape: a.shape.with_channels(a.shape.c + b.shape.c),
            data,
        })
    }

    /// Split along channels at `c`; inverse of [`Tensor::concat`].
    pub fn split(self, c: usize) -> (Self, Self) {
        let n = self.shape.spatial();
        let mut data = self.data;
        let tail = data.split_off(c * n);
        (
            Self {
                shape: self.shape.with_channels(c),
                data,
            },
            Self {
                shape: self.shape.with_channels(self.shape.c - c),
                data: tail,
            },
        )
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a = *a + *b);
    }
}
