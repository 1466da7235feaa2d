use std::fmt;

/// Shape of a tensor: rank 0, 1, or 2 is all the models here need.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Scalar,
    Vector(usize),
    Matrix { rows: usize, cols: usize },
}

impl Shape {
    pub fn numel(self) -> usize {
        match self {
            Shape::Scalar => 1,
            Shape::Vector(n) => n,
            Shape::Matrix { rows, cols } => rows * cols,
        }
    }

    /// Row count used by the row-oriented ops (`concat`, `slice`): a vector
    /// of length `n` is treated as `n` rows of width 1.
    pub(crate) fn row_count(self) -> Option<usize> {
        match self {
            Shape::Scalar => None,
            Shape::Vector(n) => Some(n),
            Shape::Matrix { rows, .. } => Some(rows),
        }
    }

    pub(crate) fn row_width(self) -> usize {
        match self {
            Shape::Scalar => 1,
            Shape::Vector(_) => 1,
            Shape::Matrix { cols, .. } => cols,
        }
    }

    pub(crate) fn with_rows(self, rows: usize) -> Shape {
        match self {
            Shape::Scalar => Shape::Scalar,
            Shape::Vector(_) => Shape::Vector(rows),
            Shape::Matrix { cols, .. } => Shape::Matrix { rows, cols },
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Scalar => write!(f, "scalar"),
            Shape::Vector(n) => write!(f, "[{n}]"),
            Shape::Matrix { rows, cols } => write!(f, "[{rows}x{cols}]"),
        }
    }
}

/// Dense row-major tensor of `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn scalar(value: f64) -> Self {
        Tensor { shape: Shape::Scalar, data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: Shape::Vector(data.len()), data }
    }

    /// Row-major matrix; panics if `data.len() != rows * cols` since that is
    /// a programming error, not a runtime condition.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Tensor { shape: Shape::Matrix { rows, cols }, data }
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor { shape, data: vec![0.0; shape.numel()] }
    }

    pub(crate) fn from_parts(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), shape.numel(), "tensor data length mismatch");
        Tensor { shape, data }
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Tensor { shape, data: vec![value; shape.numel()] }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// The single value of a scalar tensor. Panics on non-scalars.
    pub fn item(&self) -> f64 {
        assert!(matches!(self.shape, Shape::Scalar), "item() on {}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
