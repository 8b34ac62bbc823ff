//! Minimal dense linear-algebra and nonlinearity kernels.
//!
//! Everything runs in 64-bit precision and accumulates in row-major index
//! order, so identical inputs produce bitwise identical outputs. That
//! determinism is what the golden-file and checkpoint tests lean on.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumError {
    #[error("shape mismatch in {op}: left is {left:?}, right is {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error(
        "matrix is not positive definite (pivot {pivot:.3e} at column {col}); \
         increase the ridge regularization"
    )]
    NotPositiveDefinite { col: usize, pivot: f64 },
}

pub type NumResult<T> = Result<T, NumError>;

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Build from row-major data. Panics if the length does not match;
    /// this is a programming error, not an input error.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "row-major data length mismatch");
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vector {
        Vector::from_vec((0..self.rows).map(|i| self.get(i, j)).collect())
    }

    pub fn matmul(&self, other: &Matrix) -> NumResult<Matrix> {
        if self.cols != other.rows {
            return Err(NumError::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a_ik = self.data[i * self.cols + k];
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for j in 0..other.cols {
                    out_row[j] += a_ik * b_row[j];
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &Vector) -> NumResult<Vector> {
        if self.cols != v.dim() {
            return Err(NumError::ShapeMismatch {
                op: "matvec",
                left: self.shape(),
                right: (v.dim(), 1),
            });
        }
        let mut out = vec![0.0; self.rows];
        for i in 0..self.rows {
            let row = self.row(i);
            let mut acc = 0.0;
            for j in 0..self.cols {
                acc += row[j] * v.data[j];
            }
            out[i] = acc;
        }
        Ok(Vector::from_vec(out))
    }

    /// Computes `selfᵀ · v` without materializing the transpose.
    pub fn tr_matvec(&self, v: &Vector) -> NumResult<Vector> {
        if self.rows != v.dim() {
            return Err(NumError::ShapeMismatch {
                op: "tr_matvec",
                left: (self.cols, self.rows),
                right: (v.dim(), 1),
            });
        }
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let row = self.row(i);
            let vi = v.data[i];
            for j in 0..self.cols {
                out[j] += row[j] * vi;
            }
        }
        Ok(Vector::from_vec(out))
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> NumResult<Matrix> {
        if self.shape() != other.shape() {
            return Err(NumError::ShapeMismatch {
                op: "add",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn elem_mul(&self, other: &Matrix) -> NumResult<Matrix> {
        if self.shape() != other.shape() {
            return Err(NumError::ShapeMismatch {
                op: "elem_mul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|a| a * s).collect(),
        }
    }

    /// In-place `self += v ⊗ w` (rank-one update), used by the backward passes.
    pub fn add_outer(&mut self, v: &Vector, w: &Vector) -> NumResult<()> {
        if self.rows != v.dim() || self.cols != w.dim() {
            return Err(NumError::ShapeMismatch {
                op: "add_outer",
                left: self.shape(),
                right: (v.dim(), w.dim()),
            });
        }
        for i in 0..self.rows {
            let vi = v.data[i];
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for j in 0..self.cols {
                row[j] += vi * w.data[j];
            }
        }
        Ok(())
    }
}

/// Rank-one product `v ⊗ w` as a fresh matrix.
pub fn outer(v: &Vector, w: &Vector) -> Matrix {
    let mut m = Matrix::zeros(v.dim(), w.dim());
    m.add_outer(v, w).expect("shapes match by construction");
    m
}

/// Dense `f64` vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn zeros(dim: usize) -> Self {
        Vector {
            data: vec![0.0; dim],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Vector { data }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        self.data[i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, v: f64) {
        self.data[i] = v;
    }

    pub fn add(&self, other: &Vector) -> NumResult<Vector> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Vector) -> NumResult<Vector> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Vector) -> NumResult<Vector> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn add_assign(&mut self, other: &Vector) -> NumResult<()> {
        if self.dim() != other.dim() {
            return Err(NumError::ShapeMismatch {
                op: "add_assign",
                left: (self.dim(), 1),
                right: (other.dim(), 1),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Vector {
        Vector {
            data: self.data.iter().map(|a| a * s).collect(),
        }
    }

    pub fn dot(&self, other: &Vector) -> NumResult<f64> {
        if self.dim() != other.dim() {
            return Err(NumError::ShapeMismatch {
                op: "dot",
                left: (self.dim(), 1),
                right: (other.dim(), 1),
            });
        }
        let mut acc = 0.0;
        for (a, b) in self.data.iter().zip(&other.data) {
            acc += a * b;
        }
        Ok(acc)
    }

    pub fn norm2(&self) -> f64 {
        let mut acc = 0.0;
        for a in &self.data {
            acc += a * a;
        }
        acc.sqrt()
    }

    /// L2-normalize, leaving the zero vector untouched.
    pub fn normalized(&self) -> Vector {
        let n = self.norm2();
        if n == 0.0 {
            self.clone()
        } else {
            self.scale(1.0 / n)
        }
    }

    fn zip_with(
        &self,
        other: &Vector,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> NumResult<Vector> {
        if self.dim() != other.dim() {
            return Err(NumError::ShapeMismatch {
                op,
                left: (self.dim(), 1),
                right: (other.dim(), 1),
            });
        }
        Ok(Vector {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }
}

/// Elementwise logistic function, each output in (0, 1).
pub fn sigmoid(v: &Vector) -> Vector {
    Vector::from_vec(v.data.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect())
}

/// Elementwise hyperbolic tangent, each output in (-1, 1).
pub fn tanh_act(v: &Vector) -> Vector {
    Vector::from_vec(v.data.iter().map(|&x| x.tanh()).collect())
}

/// Softmax with max-subtraction so that inputs up to |x| = 700 stay finite.
pub fn softmax(v: &Vector) -> Vector {
    debug_assert!(v.dim() >= 1);
    let max = v.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.data.iter().map(|&x| (x - max).exp()).collect();
    let mut sum = 0.0;
    for e in &out {
        sum += e;
    }
    for e in &mut out {
        *e /= sum;
    }
    Vector::from_vec(out)
}

/// Log of the softmax, computed stably in one pass.
pub fn log_softmax(v: &Vector) -> Vector {
    let max = v.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &x in &v.data {
        sum += (x - max).exp();
    }
    let log_z = max + sum.ln();
    Vector::from_vec(v.data.iter().map(|&x| x - log_z).collect())
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky(a: &Matrix) -> NumResult<Matrix> {
    let n = a.rows();
    if a.cols() != n {
        return Err(NumError::ShapeMismatch {
            op: "cholesky",
            left: a.shape(),
            right: (n, n),
        });
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut diag = a.get(j, j);
        for k in 0..j {
            diag -= l.get(j, k) * l.get(j, k);
        }
        if diag <= 0.0 || !diag.is_finite() {
            return Err(NumError::NotPositiveDefinite {
                col: j,
                pivot: diag,
            });
        }
        let ljj = diag.sqrt();
        l.set(j, j, ljj);
        for i in (j + 1)..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / ljj);
        }
    }
    Ok(l)
}

/// Solves `L x = b` for lower-triangular `L`.
fn forward_solve(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let mut x = b.to_vec();
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s -= l.get(i, k) * x[k];
        }
        x[i] = s / l.get(i, i);
    }
    x
}

/// Solves `Lᵀ x = b` for lower-triangular `L`.
fn backward_solve_transpose(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in (i + 1)..n {
            s -= l.get(k, i) * x[k];
        }
        x[i] = s / l.get(i, i);
    }
    x
}

/// Solves the SPD system `A x = b` given the Cholesky factor `L` of `A`.
pub fn cholesky_solve(l: &Matrix, b: &Vector) -> Vector {
    let y = forward_solve(l, b.data());
    Vector::from_vec(backward_solve_transpose(l, &y))
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
/// Returns unsorted (eigenvalues, eigenvector columns).
fn jacobi_eigen(sym: &Matrix) -> (Vec<f64>, Matrix) {
    let n = sym.rows();
    let mut a = sym.clone();
    let mut v = Matrix::identity(n);
    let scale = {
        let mut s = 0.0;
        for x in a.data() {
            s += x * x;
        }
        s.sqrt().max(1.0)
    };
    let tol = 1e-15 * scale;
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a.get(p, q) * a.get(p, q);
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (theta * theta + 1.0).sqrt())
                } else {
                    -1.0 / (-theta + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let vals = (0..n).map(|i| a.get(i, i)).collect();
    (vals, v)
}

/// Solves the symmetric-definite generalized eigenproblem `A u = λ B u`.
///
/// `a` must be symmetric and `b` symmetric positive-definite. The returned
/// eigenvalues are sorted descending and the eigenvector columns are
/// B-orthonormal (`uᵢᵀ B uⱼ = δᵢⱼ`). The route is Cholesky whitening of `B`,
/// a Jacobi eigendecomposition of the whitened matrix, and a back-transform.
pub fn sym_generalized_eig(a: &Matrix, b: &Matrix) -> NumResult<(Vector, Matrix)> {
    let n = a.rows();
    if a.cols() != n {
        return Err(NumError::ShapeMismatch {
            op: "sym_generalized_eig",
            left: a.shape(),
            right: (n, n),
        });
    }
    if b.shape() != (n, n) {
        return Err(NumError::ShapeMismatch {
            op: "sym_generalized_eig",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let l = cholesky(b)?;
    // M = L⁻¹ A, column by column.
    let mut m = Matrix::zeros(n, n);
    for j in 0..n {
        let col: Vec<f64> = (0..n).map(|i| a.get(i, j)).collect();
        let solved = forward_solve(&l, &col);
        for i in 0..n {
            m.set(i, j, solved[i]);
        }
    }
    // C = M L⁻ᵀ = (L⁻¹ Mᵀ)ᵀ, row by row.
    let mut c = Matrix::zeros(n, n);
    for i in 0..n {
        let solved = forward_solve(&l, m.row(i));
        for j in 0..n {
            c.set(i, j, solved[j]);
        }
    }
    // Symmetrize away the roundoff before Jacobi.
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (c.get(i, j) + c.get(j, i));
            c.set(i, j, avg);
            c.set(j, i, avg);
        }
    }
    let (vals, y) = jacobi_eigen(&c);
    // Back-transform u = L⁻ᵀ y; B-orthonormality is inherited from yᵀy = I.
    let mut u = Matrix::zeros(n, n);
    for j in 0..n {
        let col: Vec<f64> = (0..n).map(|i| y.get(i, j)).collect();
        let solved = backward_solve_transpose(&l, &col);
        for i in 0..n {
            u.set(i, j, solved[i]);
        }
    }
    // Sort descending by eigenvalue; stable so ties keep Jacobi order.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| vals[j].partial_cmp(&vals[i]).expect("finite eigenvalues"));
    let sorted_vals = Vector::from_vec(order.iter().map(|&i| vals[i]).collect());
    let mut sorted_u = Matrix::zeros(n, n);
    for (new_j, &old_j) in order.iter().enumerate() {
        // Canonical sign: the entry of largest magnitude is positive.
        let mut pivot = 0usize;
        let mut best = 0.0;
        for i in 0..n {
            let x = u.get(i, old_j).abs();
            if x > best {
                best = x;
                pivot = i;
            }
        }
        let flip = if u.get(pivot, old_j) < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            sorted_u.set(i, new_j, flip * u.get(i, old_j));
        }
    }
    Ok((sorted_vals, sorted_u))
}
