//! Dense row-major `f64` matrices and the primitive operations the tape records.
//!
//! Every operation validates shapes and rejects non-finite results, so a
//! [`Tensor`] that exists is always finite.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("matrix is not positive definite: Cholesky failed at pivot {pivot}")]
    Singular { pivot: usize },
    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// A dense real matrix. Vectors are `1×n` or `n×1` tensors and scalars `1×1`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({}x{}) [", self.rows, self.cols)?;
        for r in 0..self.rows {
            if r > 0 {
                write!(f, "; ")?;
            }
            for c in 0..self.cols {
                if c > 0 {
                    write!(f, ", ")?;
                }
                write!(f, "{}", self[(r, c)])?;
            }
        }
        write!(f, "]")
    }
}

impl std::ops::Index<(usize, usize)> for Tensor {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Tensor {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(LinalgError::NonFinite { op })
    }
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LinalgError::Dimension {
                op: "new",
                lhs: (rows, cols),
                rhs: (data.len(), 1),
            });
        }
        check_finite("new", &data)?;
        Ok(Self { rows, cols, data })
    }

    /// Builds a tensor from nested rows; panics on ragged or non-finite input.
    /// Intended for literals in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(rows.len(), cols, data).expect("finite literal")
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(value.is_finite());
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 1.0)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t[(i, i)] = 1.0;
        }
        t
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut t = Self::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            t[(i, i)] = *v;
        }
        t
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn col_vector(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a `1×1` tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.shape(), (1, 1), "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn row(&self, r: usize) -> Tensor {
        Tensor::row_vector(&self.data[r * self.cols..(r + 1) * self.cols])
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Rows `idx` gathered in order.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &r in idx {
            data.extend_from_slice(self.row_slice(r));
        }
        Tensor {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Same data reinterpreted with a new shape of equal size.
    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Tensor> {
        if rows * cols != self.len() {
            return Err(LinalgError::Dimension {
                op: "reshape",
                lhs: self.shape(),
                rhs: (rows, cols),
            });
        }
        Ok(Tensor {
            rows,
            cols,
            data: self.data.clone(),
        })
    }

    /// Applies `f` elementwise, failing if any result is non-finite.
    pub fn map(&self, op: &'static str, mut f: impl FnMut(f64) -> f64) -> Result<Tensor> {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        check_finite(op, &data)?;
        Ok(Tensor {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(LinalgError::Dimension {
                op,
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let data: Vec<f64> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        check_finite(op, &data)?;
        Ok(Tensor {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(LinalgError::Dimension {
                op: "matmul",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let out_row = &mut out[i * m..(i + 1) * m];
            let a_row = &self.data[i * k..(i + 1) * k];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * m..(p + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        check_finite("matmul", &out)?;
        Ok(Tensor {
            rows: n,
            cols: m,
            data: out,
        })
    }

    /// `selfᵀ · other` without materialising the transpose.
    pub fn t_matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rows != other.rows {
            return Err(LinalgError::Dimension {
                op: "t_matmul",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let (n, k, m) = (self.cols, self.rows, other.cols);
        let mut out = vec![0.0; n * m];
        for p in 0..k {
            let a_row = &self.data[p * n..(p + 1) * n];
            let b_row = &other.data[p * m..(p + 1) * m];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out[i * m..(i + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        check_finite("t_matmul", &out)?;
        Ok(Tensor {
            rows: n,
            cols: m,
            data: out,
        })
    }

    /// `self · otherᵀ` without materialising the transpose.
    pub fn matmul_t(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.cols {
            return Err(LinalgError::Dimension {
                op: "matmul_t",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let (n, k, m) = (self.rows, self.cols, other.rows);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..m {
                let b_row = &other.data[j * k..(j + 1) * k];
                out[i * m + j] = a_row.iter().zip(b_row).map(|(a, b)| a * b).sum();
            }
        }
        check_finite("matmul_t", &out)?;
        Ok(Tensor {
            rows: n,
            cols: m,
            data: out,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "subtract", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "elementwise-multiply", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Result<Tensor> {
        self.map("scalar-scale", |v| v * s)
    }

    pub fn transpose(&self) -> Tensor {
        Tensor::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn relu(&self) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v.max(0.0)).collect(),
        }
    }

    pub fn concat_cols(&self, other: &Tensor) -> Result<Tensor> {
        if self.rows != other.rows {
            return Err(LinalgError::Dimension {
                op: "concat-columns",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(self.row_slice(r));
            data.extend_from_slice(other.row_slice(r));
        }
        Ok(Tensor {
            rows: self.rows,
            cols,
            data,
        })
    }

    pub fn concat_rows(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.cols {
            return Err(LinalgError::Dimension {
                op: "concat-rows",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Tensor {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    /// Appends a trailing column of ones, `[X | 1]`.
    pub fn append_ones(&self) -> Tensor {
        self.concat_cols(&Tensor::ones(self.rows, 1))
            .expect("row counts agree")
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    /// Squared residual norm per row, averaged over rows.
    pub fn mse(&self, target: &Tensor) -> Result<f64> {
        if self.shape() != target.shape() {
            return Err(LinalgError::Dimension {
                op: "mean-squared-error",
                lhs: self.shape(),
                rhs: target.shape(),
            });
        }
        if self.rows == 0 {
            return Err(LinalgError::Contract("mean-squared-error of empty batch".into()));
        }
        let s: f64 = self
            .data
            .iter()
            .zip(&target.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let v = s / self.rows as f64;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(LinalgError::NonFinite {
                op: "mean-squared-error",
            })
        }
    }

    /// Outer product `a ⊗ b` of two vectors (either orientation): `len(a) × len(b)`.
    pub fn outer(&self, other: &Tensor) -> Result<Tensor> {
        if !self.is_vector() || !other.is_vector() {
            return Err(LinalgError::Dimension {
                op: "outer-product",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let data: Vec<f64> = self
            .data
            .iter()
            .flat_map(|&a| other.data.iter().map(move |&b| a * b))
            .collect();
        check_finite("outer-product", &data)?;
        Ok(Tensor {
            rows: self.len(),
            cols: other.len(),
            data,
        })
    }

    pub fn is_vector(&self) -> bool {
        self.rows == 1 || self.cols == 1
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Largest `|a_ij − a_ji|`; infinite for non-square input.
    pub fn asymmetry(&self) -> f64 {
        if self.rows != self.cols {
            return f64::INFINITY;
        }
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in 0..i {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// `(A + Aᵀ)/2`.
    pub fn symmetrized(&self) -> Result<Tensor> {
        if self.rows != self.cols {
            return Err(LinalgError::Dimension {
                op: "symmetrize",
                lhs: self.shape(),
                rhs: self.shape(),
            });
        }
        Ok(Tensor::from_fn(self.rows, self.cols, |i, j| {
            0.5 * (self[(i, j)] + self[(j, i)])
        }))
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub(crate) fn add_scaled_assign(&mut self, other: &Tensor, s: f64) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }
}

/// The closed set of differentiable operations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    Matmul,
    Add,
    Subtract,
    Multiply,
    Scale(f64),
    Transpose,
    Relu,
    ConcatColumns,
    AppendOnes,
    Sum,
    MeanSquaredError,
    Outer,
    SpdSolve,
}

impl Primitive {
    pub fn arity(self) -> usize {
        match self {
            Primitive::Scale(_)
            | Primitive::Transpose
            | Primitive::Relu
            | Primitive::AppendOnes
            | Primitive::Sum => 1,
            _ => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Matmul => "matmul",
            Primitive::Add => "add",
            Primitive::Subtract => "subtract",
            Primitive::Multiply => "elementwise-multiply",
            Primitive::Scale(_) => "scalar-scale",
            Primitive::Transpose => "transpose",
            Primitive::Relu => "relu",
            Primitive::ConcatColumns => "concat-columns",
            Primitive::AppendOnes => "row-append-ones",
            Primitive::Sum => "sum",
            Primitive::MeanSquaredError => "mean-squared-error",
            Primitive::Outer => "outer-product",
            Primitive::SpdSolve => "spd-solve",
        }
    }

    /// Evaluates the primitive on plain tensors.
    pub fn forward(self, inputs: &[&Tensor]) -> Result<Tensor> {
        if inputs.len() != self.arity() {
            return Err(LinalgError::Contract(format!(
                "{} expects {} inputs, got {}",
                self.name(),
                self.arity(),
                inputs.len()
            )));
        }
        match self {
            Primitive::Matmul => inputs[0].matmul(inputs[1]),
            Primitive::Add => inputs[0].add(inputs[1]),
            Primitive::Subtract => inputs[0].sub(inputs[1]),
            Primitive::Multiply => inputs[0].hadamard(inputs[1]),
            Primitive::Scale(s) => inputs[0].scale(s),
            Primitive::Transpose => Ok(inputs[0].transpose()),
            Primitive::Relu => Ok(inputs[0].relu()),
            Primitive::ConcatColumns => inputs[0].concat_cols(inputs[1]),
            Primitive::AppendOnes => Ok(inputs[0].append_ones()),
            Primitive::Sum => {
                let s = inputs[0].sum();
                if s.is_finite() {
                    Ok(Tensor::scalar(s))
                } else {
                    Err(LinalgError::NonFinite { op: "sum" })
                }
            }
            Primitive::MeanSquaredError => inputs[0].mse(inputs[1]).map(Tensor::scalar),
            Primitive::Outer => inputs[0].outer(inputs[1]),
            Primitive::SpdSolve => crate::linalg::spd_solve(inputs[0], inputs[1]),
        }
    }
}
