//! Small dense linear-algebra kernels used by the variational families and
//! target models.
//!
//! # Matrix storage
//!
//! [`DenseMatrix`] stores entries row-major in one contiguous `Vec<f64>`.
//! [`LowerTriangular`] stores a lower-triangular square matrix packed
//! row-major (row `i` contributes `i + 1` entries, diagonal included), so a
//! `d x d` factor takes `d (d + 1) / 2` slots.
//!
//! # Numerical stability
//!
//! - The symmetric eigenvalue extremes use a cyclic Jacobi iteration with an
//!   off-diagonal tolerance of `1e-12` relative to the Frobenius norm and at
//!   most 100 sweeps; results are accurate to about `1e-8` relative error,
//!   which is what the downstream smoothness constants need.
//! - Cholesky fails with [`LinalgError::NotPositiveDefinite`] on any
//!   non-positive pivot rather than producing NaNs.
//! - Log-determinants go through `ln |pivot|` sums (LU with partial pivoting
//!   for dense inputs) and refuse pivots below `1e-300` in magnitude so the
//!   result is finite or an explicit [`LinalgError::NumericallySingular`].

use thiserror::Error;

/// Pivots smaller than this magnitude are treated as exact zeros.
const SINGULAR_PIVOT: f64 = 1e-300;

/// Relative off-diagonal tolerance for the Jacobi eigenvalue iteration.
const JACOBI_TOL: f64 = 1e-12;

/// Maximum number of full Jacobi sweeps before giving up.
const JACOBI_MAX_SWEEPS: usize = 100;

/// Relative tolerance for the symmetry pre-check on eigenvalue inputs.
const SYMMETRY_TOL: f64 = 1e-10;

/// Errors from the linear-algebra kernels.
#[derive(Debug, Error, PartialEq)]
pub enum LinalgError {
    /// Operand shapes do not line up.
    #[error("dimension mismatch: {context} (got {got}, expected {expected})")]
    DimensionMismatch {
        context: &'static str,
        got: String,
        expected: String,
    },
    /// The matrix is not symmetric within tolerance.
    #[error("matrix is not symmetric: |a[{i}][{j}] - a[{j}][{i}]| = {diff:e}")]
    NotSymmetric { i: usize, j: usize, diff: f64 },
    /// A Cholesky pivot was non-positive.
    #[error("matrix is not positive definite (pivot {pivot:e} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    /// A pivot magnitude fell below the representable threshold.
    #[error("matrix is numerically singular (pivot magnitude {pivot:e} at index {index})")]
    NumericallySingular { index: usize, pivot: f64 },
    /// The Jacobi iteration did not reach tolerance within the sweep budget.
    #[error("eigenvalue iteration did not converge in {sweeps} sweeps (off-diagonal {offdiag:e})")]
    NoConvergence { sweeps: usize, offdiag: f64 },
}

type Result<T> = std::result::Result<T, LinalgError>;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    /// Builds a matrix from row-major data; `data.len()` must be `rows * cols`.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LinalgError::DimensionMismatch {
                context: "DenseMatrix::new data length",
                got: data.len().to_string(),
                expected: (rows * cols).to_string(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// All-zero matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Identity matrix of order `n`.
    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Row-major backing slice.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    /// `true` when every entry is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Matrix-vector product `A x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(LinalgError::DimensionMismatch {
                context: "matvec operand length",
                got: x.len().to_string(),
                expected: self.cols.to_string(),
            });
        }
        let mut out = vec![0.0; self.rows];
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            out[i] = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
        Ok(out)
    }

    /// Matrix product `A B`.
    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(LinalgError::DimensionMismatch {
                context: "matmul inner dimension",
                got: other.rows.to_string(),
                expected: self.cols.to_string(),
            });
        }
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.data[k * other.cols + j];
                }
            }
        }
        Ok(out)
    }

    /// Transposed copy.
    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Sum of squared entries.
    pub fn frobenius_norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    /// Log of the absolute determinant via LU with partial pivoting.
    ///
    /// Any pivot with magnitude below `1e-300` makes the matrix numerically
    /// singular and is reported as an error instead of returning `-inf`.
    pub fn logabsdet(&self) -> Result<f64> {
        if !self.is_square() {
            return Err(LinalgError::DimensionMismatch {
                context: "logabsdet requires a square matrix",
                got: format!("{}x{}", self.rows, self.cols),
                expected: "square".to_string(),
            });
        }
        let n = self.rows;
        let mut a = self.data.clone();
        let mut acc = 0.0;
        for k in 0..n {
            // Partial pivoting: bring the largest remaining column entry up.
            let mut pivot_row = k;
            let mut pivot_mag = a[k * n + k].abs();
            for r in (k + 1)..n {
                let mag = a[r * n + k].abs();
                if mag > pivot_mag {
                    pivot_mag = mag;
                    pivot_row = r;
                }
            }
            if pivot_mag < SINGULAR_PIVOT {
                return Err(LinalgError::NumericallySingular {
                    index: k,
                    pivot: pivot_mag,
                });
            }
            if pivot_row != k {
                for c in 0..n {
                    a.swap(k * n + c, pivot_row * n + c);
                }
            }
            let pivot = a[k * n + k];
            acc += pivot.abs().ln();
            for r in (k + 1)..n {
                let factor = a[r * n + k] / pivot;
                if factor == 0.0 {
                    continue;
                }
                for c in (k + 1)..n {
                    a[r * n + c] -= factor * a[k * n + c];
                }
                a[r * n + k] = 0.0;
            }
        }
        Ok(acc)
    }

    /// Dense inverse via Gauss-Jordan elimination with partial pivoting.
    pub fn invert(&self) -> Result<DenseMatrix> {
        if !self.is_square() {
            return Err(LinalgError::DimensionMismatch {
                context: "invert requires a square matrix",
                got: format!("{}x{}", self.rows, self.cols),
                expected: "square".to_string(),
            });
        }
        let n = self.rows;
        let mut a = self.data.clone();
        let mut inv = DenseMatrix::identity(n).data;
        for k in 0..n {
            let mut pivot_row = k;
            let mut pivot_mag = a[k * n + k].abs();
            for r in (k + 1)..n {
                let mag = a[r * n + k].abs();
                if mag > pivot_mag {
                    pivot_mag = mag;
                    pivot_row = r;
                }
            }
            if pivot_mag < SINGULAR_PIVOT {
                return Err(LinalgError::NumericallySingular {
                    index: k,
                    pivot: pivot_mag,
                });
            }
            if pivot_row != k {
                for c in 0..n {
                    a.swap(k * n + c, pivot_row * n + c);
                    inv.swap(k * n + c, pivot_row * n + c);
                }
            }
            let pivot = a[k * n + k];
            for c in 0..n {
                a[k * n + c] /= pivot;
                inv[k * n + c] /= pivot;
            }
            for r in 0..n {
                if r == k {
                    continue;
                }
                let factor = a[r * n + k];
                if factor == 0.0 {
                    continue;
                }
                for c in 0..n {
                    a[r * n + c] -= factor * a[k * n + c];
                    inv[r * n + c] -= factor * inv[k * n + c];
                }
            }
        }
        DenseMatrix::new(n, n, inv)
    }
}

/// Lower-triangular square matrix, packed row-major with the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct LowerTriangular {
    dim: usize,
    data: Vec<f64>,
}

impl LowerTriangular {
    /// All-zero factor of order `dim`.
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; dim * (dim + 1) / 2],
        }
    }

    /// Identity factor of order `dim`.
    pub fn identity(dim: usize) -> Self {
        let mut t = Self::zeros(dim);
        for i in 0..dim {
            let idx = t.index(i, i);
            t.data[idx] = 1.0;
        }
        t
    }

    /// Builds from packed row-major data of length `dim (dim + 1) / 2`.
    pub fn from_packed(dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != dim * (dim + 1) / 2 {
            return Err(LinalgError::DimensionMismatch {
                context: "LowerTriangular::from_packed data length",
                got: data.len().to_string(),
                expected: (dim * (dim + 1) / 2).to_string(),
            });
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Packed row-major backing slice.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    fn index(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i < self.dim);
        i * (i + 1) / 2 + j
    }

    /// Entry `(i, j)`; zero above the diagonal.
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.dim && j < self.dim);
        if j > i {
            0.0
        } else {
            self.data[self.index(i, j)]
        }
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let idx = self.index(i, j);
        self.data[idx] = v;
    }

    /// Expands to a dense matrix with explicit zeros above the diagonal.
    pub fn to_dense(&self) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(self.dim, self.dim);
        for i in 0..self.dim {
            for j in 0..=i {
                m.set(i, j, self.get(i, j));
            }
        }
        m
    }

    /// Matrix-vector product `L x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(LinalgError::DimensionMismatch {
                context: "triangular matvec operand length",
                got: x.len().to_string(),
                expected: self.dim.to_string(),
            });
        }
        let mut out = vec![0.0; self.dim];
        for i in 0..self.dim {
            let mut acc = 0.0;
            for j in 0..=i {
                acc += self.data[i * (i + 1) / 2 + j] * x[j];
            }
            out[i] = acc;
        }
        Ok(out)
    }

    /// Sum of squared stored entries.
    pub fn frobenius_norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    /// Log of the absolute determinant: sum of `ln |diagonal|`.
    pub fn logabsdet(&self) -> Result<f64> {
        let mut acc = 0.0;
        for i in 0..self.dim {
            let d = self.get(i, i);
            if d.abs() < SINGULAR_PIVOT {
                return Err(LinalgError::NumericallySingular {
                    index: i,
                    pivot: d.abs(),
                });
            }
            acc += d.abs().ln();
        }
        Ok(acc)
    }

    /// Solves `L y = b` by forward substitution.
    pub fn forward_solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.dim {
            return Err(LinalgError::DimensionMismatch {
                context: "forward_solve operand length",
                got: b.len().to_string(),
                expected: self.dim.to_string(),
            });
        }
        let mut y = vec![0.0; self.dim];
        for i in 0..self.dim {
            let mut acc = b[i];
            for j in 0..i {
                acc -= self.get(i, j) * y[j];
            }
            let d = self.get(i, i);
            if d.abs() < SINGULAR_PIVOT {
                return Err(LinalgError::NumericallySingular {
                    index: i,
                    pivot: d.abs(),
                });
            }
            y[i] = acc / d;
        }
        Ok(y)
    }

    /// Solves `L^T x = b` by backward substitution.
    pub fn transpose_solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.dim {
            return Err(LinalgError::DimensionMismatch {
                context: "transpose_solve operand length",
                got: b.len().to_string(),
                expected: self.dim.to_string(),
            });
        }
        let mut x = vec![0.0; self.dim];
        for i in (0..self.dim).rev() {
            let mut acc = b[i];
            for j in (i + 1)..self.dim {
                acc -= self.get(j, i) * x[j];
            }
            let d = self.get(i, i);
            if d.abs() < SINGULAR_PIVOT {
                return Err(LinalgError::NumericallySingular {
                    index: i,
                    pivot: d.abs(),
                });
            }
            x[i] = acc / d;
        }
        Ok(x)
    }
}

/// Sum of squared entries of a raw slice (vectors and flat gradients).
pub fn frobenius_norm_sq(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn check_symmetric(a: &DenseMatrix) -> Result<()> {
    if !a.is_square() {
        return Err(LinalgError::DimensionMismatch {
            context: "symmetric operation requires a square matrix",
            got: format!("{}x{}", a.rows(), a.cols()),
            expected: "square".to_string(),
        });
    }
    for i in 0..a.rows() {
        for j in (i + 1)..a.cols() {
            let x = a.get(i, j);
            let y = a.get(j, i);
            let diff = (x - y).abs();
            let scale = 1.0_f64.max(x.abs()).max(y.abs());
            if diff > SYMMETRY_TOL * scale {
                return Err(LinalgError::NotSymmetric { i, j, diff });
            }
        }
    }
    Ok(())
}

/// Smallest and largest eigenvalue of a symmetric matrix.
///
/// Runs a cyclic Jacobi iteration (rotations only; eigenvectors are not
/// accumulated) until the off-diagonal Frobenius mass falls below `1e-12`
/// relative to the matrix norm, with a 100-sweep budget. Inputs are checked
/// for symmetry within `1e-10` relative tolerance first.
pub fn sym_eig_extremes(a: &DenseMatrix) -> Result<(f64, f64)> {
    check_symmetric(a)?;
    let n = a.rows();
    if n == 0 {
        return Err(LinalgError::DimensionMismatch {
            context: "sym_eig_extremes requires a non-empty matrix",
            got: "0x0".to_string(),
            expected: "n >= 1".to_string(),
        });
    }
    if n == 1 {
        let v = a.get(0, 0);
        return Ok((v, v));
    }
    // Work on a symmetrized copy so tiny input asymmetries cannot drift.
    let mut w = a.clone();
    for i in 0..n {
        for j in 0..i {
            let s = 0.5 * (w.get(i, j) + w.get(j, i));
            w.set(i, j, s);
            w.set(j, i, s);
        }
    }
    let fro = w.frobenius_norm_sq().sqrt();
    let target = JACOBI_TOL * fro.max(f64::MIN_POSITIVE);

    let off_norm = |m: &DenseMatrix| -> f64 {
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let v = m.get(i, j);
                    acc += v * v;
                }
            }
        }
        acc.sqrt()
    };

    let mut off = off_norm(&w);
    let mut sweeps = 0;
    while off > target {
        if sweeps >= JACOBI_MAX_SWEEPS {
            return Err(LinalgError::NoConvergence {
                sweeps,
                offdiag: off,
            });
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = w.get(p, q);
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let app = w.get(p, p);
                let aqq = w.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                // Stable tangent of the rotation angle.
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // Apply the rotation J(p, q)^T W J(p, q) in place.
                for k in 0..n {
                    if k != p && k != q {
                        let akp = w.get(k, p);
                        let akq = w.get(k, q);
                        let new_kp = c * akp - s * akq;
                        let new_kq = s * akp + c * akq;
                        w.set(k, p, new_kp);
                        w.set(p, k, new_kp);
                        w.set(k, q, new_kq);
                        w.set(q, k, new_kq);
                    }
                }
                let new_pp = app - t * apq;
                let new_qq = aqq + t * apq;
                w.set(p, p, new_pp);
                w.set(q, q, new_qq);
                w.set(p, q, 0.0);
                w.set(q, p, 0.0);
            }
        }
        sweeps += 1;
        off = off_norm(&w);
    }
    let mut lo = w.get(0, 0);
    let mut hi = lo;
    for i in 1..n {
        let v = w.get(i, i);
        lo = lo.min(v);
        hi = hi.max(v);
    }
    Ok((lo, hi))
}

/// Cholesky factorization of a symmetric positive-definite matrix.
///
/// Returns the lower-triangular `L` with `L L^T = A`, reading only the lower
/// triangle of the (symmetry-checked) input. A non-positive pivot reports
/// [`LinalgError::NotPositiveDefinite`].
pub fn cholesky_spd(a: &DenseMatrix) -> Result<LowerTriangular> {
    check_symmetric(a)?;
    let n = a.rows();
    let mut l = LowerTriangular::zeros(n);
    for i in 0..n {
        for j in 0..=i {
            let mut acc = a.get(i, j);
            for k in 0..j {
                acc -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if acc <= 0.0 {
                    return Err(LinalgError::NotPositiveDefinite {
                        index: i,
                        pivot: acc,
                    });
                }
                l.set(i, j, acc.sqrt());
            } else {
                l.set(i, j, acc / l.get(j, j));
            }
        }
    }
    Ok(l)
}

/// Solves `A x = b` for symmetric positive-definite `A` via Cholesky.
pub fn solve_spd(a: &DenseMatrix, b: &[f64]) -> Result<Vec<f64>> {
    let l = cholesky_spd(a)?;
    let y = l.forward_solve(b)?;
    l.transpose_solve(&y)
}
