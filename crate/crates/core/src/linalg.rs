//! Cholesky factorisation, SPD solves and spectral diagnostics.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::tensor::{LinalgError, Result, Tensor};

/// Relative tolerance on `|a_ij − a_ji|` accepted as symmetric.
pub const SYMMETRY_TOL: f64 = 1e-9;

/// Lower-triangular factor `L` with `A = L·Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    lower: Vec<f64>,
}

impl Cholesky {
    /// Factors a symmetric positive-definite matrix. Only the lower triangle is read
    /// once symmetry has been checked.
    pub fn factor(a: &Tensor) -> Result<Self> {
        let (n, m) = a.shape();
        if n != m {
            return Err(LinalgError::Dimension {
                op: "cholesky",
                lhs: a.shape(),
                rhs: a.shape(),
            });
        }
        let asym = a.asymmetry();
        if asym > SYMMETRY_TOL * a.max_abs().max(1.0) {
            return Err(LinalgError::NotSymmetric { asymmetry: asym });
        }
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[j * n + k] * l[j * n + k];
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(LinalgError::Singular { pivot: j });
            }
            let djj = d.sqrt();
            l[j * n + j] = djj;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / djj;
            }
        }
        Ok(Self { n, lower: l })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn lower(&self) -> Tensor {
        Tensor::new(self.n, self.n, self.lower.clone()).expect("finite factor")
    }

    /// Solves `A·X = B` by forward and back substitution.
    pub fn solve(&self, b: &Tensor) -> Result<Tensor> {
        let n = self.n;
        if b.rows() != n {
            return Err(LinalgError::Dimension {
                op: "spd-solve",
                lhs: (n, n),
                rhs: b.shape(),
            });
        }
        let p = b.cols();
        let mut x = b.data().to_vec();
        let l = &self.lower;
        for c in 0..p {
            // L·y = b
            for i in 0..n {
                let mut s = x[i * p + c];
                for k in 0..i {
                    s -= l[i * n + k] * x[k * p + c];
                }
                x[i * p + c] = s / l[i * n + i];
            }
            // Lᵀ·x = y
            for i in (0..n).rev() {
                let mut s = x[i * p + c];
                for k in (i + 1)..n {
                    s -= l[k * n + i] * x[k * p + c];
                }
                x[i * p + c] = s / l[i * n + i];
            }
        }
        Tensor::new(n, p, x).map_err(|_| LinalgError::NonFinite { op: "spd-solve" })
    }

    pub fn log_det(&self) -> f64 {
        (0..self.n).map(|i| 2.0 * self.lower[i * self.n + i].ln()).sum()
    }
}

/// Solves `a·X = b` for symmetric positive-definite `a`.
pub fn spd_solve(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Cholesky::factor(a)?.solve(b)
}

/// `a⁻¹` for SPD `a`, computed as a solve against the identity.
pub fn spd_inverse(a: &Tensor) -> Result<Tensor> {
    spd_solve(a, &Tensor::eye(a.rows()))
}

fn to_nalgebra(a: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(a.rows(), a.cols(), a.data())
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn symmetric_eigenvalues(a: &Tensor) -> Result<Vec<f64>> {
    if a.rows() != a.cols() {
        return Err(LinalgError::Dimension {
            op: "eigenvalues",
            lhs: a.shape(),
            rhs: a.shape(),
        });
    }
    let sym = a.symmetrized()?;
    let mut ev: Vec<f64> = SymmetricEigen::new(to_nalgebra(&sym))
        .eigenvalues
        .iter()
        .copied()
        .collect();
    ev.sort_by(|x, y| x.total_cmp(y));
    Ok(ev)
}

/// Ratio of extreme singular values of a symmetric matrix.
///
/// Returns `f64::INFINITY` when the smallest singular value is at or below the
/// numerical-rank threshold `n·ε_mach·σ_max`.
pub fn condition_number(a: &Tensor) -> Result<f64> {
    let ev = symmetric_eigenvalues(a)?;
    let sv: Vec<f64> = ev.iter().map(|v| v.abs()).collect();
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if max == 0.0 {
        return Ok(f64::INFINITY);
    }
    let floor = a.rows() as f64 * f64::EPSILON * max;
    if min <= floor {
        Ok(f64::INFINITY)
    } else {
        Ok(max / min)
    }
}
