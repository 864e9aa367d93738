use crate::error::{dim_err, Result};

/// Dense row-major real array.
///
/// `grad` is only populated when the tensor was used as a differentiable
/// input to a [`Graph`](super::Graph) and read back after `backward`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(dim_err!("shape {shape:?} has a zero extent"));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(dim_err!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self::new(shape, vec![value; len]).expect("full: shape has zero extent")
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(dim_err!("ragged rows"));
        }
        Self::new(&[r, c], rows.concat())
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(&[1, 1], vec![value]).unwrap()
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading extent; the row count of a matrix view.
    pub fn rows(&self) -> usize {
        if self.shape.len() <= 1 {
            1
        } else {
            self.shape[0]
        }
    }

    /// Product of trailing extents; the column count of a matrix view.
    pub fn cols(&self) -> usize {
        if self.shape.len() <= 1 {
            self.data.len()
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(dim_err!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            ));
        }
        self.shape = shape.to_vec();
        self.grad = None;
        Ok(self)
    }

    /// Rows `start..start + len` of a matrix view.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.rows() || len == 0 {
            return Err(dim_err!(
                "row slice {start}..{} out of {}",
                start + len,
                self.rows()
            ));
        }
        let c = self.cols();
        Self::new(&[len, c], self.data[start * c..(start + len) * c].to_vec())
    }

    /// Columns `start..start + len` of a matrix view.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Self> {
        let c = self.cols();
        if start + len > c || len == 0 {
            return Err(dim_err!("column slice {start}..{} out of {c}", start + len));
        }
        let mut out = Vec::with_capacity(self.rows() * len);
        for r in 0..self.rows() {
            out.extend_from_slice(&self.row(r)[start..start + len]);
        }
        Self::new(&[self.rows(), len], out)
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Self> {
        let c = parts.first().map(|t| t.cols()).ok_or_else(|| dim_err!("empty concat"))?;
        if parts.iter().any(|t| t.cols() != c) {
            return Err(dim_err!("concat_rows column mismatch"));
        }
        let rows = parts.iter().map(|t| t.rows()).sum::<usize>();
        let data = parts.iter().flat_map(|t| t.data.iter().copied()).collect();
        Self::new(&[rows, c], data)
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Self> {
        let r = parts.first().map(|t| t.rows()).ok_or_else(|| dim_err!("empty concat"))?;
        if parts.iter().any(|t| t.rows() != r) {
            return Err(dim_err!("concat_cols row mismatch"));
        }
        let c: usize = parts.iter().map(|t| t.cols()).sum();
        let mut data = Vec::with_capacity(r * c);
        for row in 0..r {
            for t in parts {
                data.extend_from_slice(t.row(row));
            }
        }
        Self::new(&[r, c], data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::new(&self.shape, self.data.iter().map(|&v| f(v)).collect()).unwrap()
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(dim_err!("{:?} vs {:?}", self.shape, other.shape));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::new(&self.shape, data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Rounds every value to the nearest `f32`, matching what a checkpoint
    /// stores.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }
}
