//! Dense linear algebra and integration kernels.
//!
//! Everything here works on small matrices (n ≤ 20) stored row-major. The
//! routines are pure and reentrant.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest integration step accepted by [`IntegratorConfig`].
pub const MAX_STEP: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("non-finite derivative during integration at t = {t}")]
    IntegrationFault { t: f64 },
    #[error("matrix is not symmetric (max deviation {deviation:e})")]
    Asymmetric { deviation: f64 },
    #[error("closed-loop matrix is not Hurwitz; Lyapunov equation has no SPD solution")]
    NotHurwitz,
    #[error("matrix is not positive definite (min eigenvalue {min_eig:e})")]
    NotPositiveDefinite { min_eig: f64 },
    #[error("singular linear system")]
    Singular,
    #[error("(A, C) pair is not observable; observability matrix is rank deficient")]
    Unobservable,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid integrator step {0}; need 0 < dt <= {MAX_STEP}")]
    InvalidStep(f64),
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, d) in diag.iter().enumerate() {
            m[(i, i)] = *d;
        }
        m
    }

    pub fn from_row_slice(rows: usize, cols: usize, data: &[f64]) -> Result<Self, NumericsError> {
        if rows * cols != data.len() {
            return Err(NumericsError::Dimension(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data: data.to_vec() })
    }

    /// Builds a matrix from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericsError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(NumericsError::Dimension("ragged rows".into()));
        }
        Ok(Self { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn column(v: &[f64]) -> Self {
        Self { rows: v.len(), cols: 1, data: v.to_vec() }
    }

    pub fn row(v: &[f64]) -> Self {
        Self { rows: 1, cols: v.len(), data: v.to_vec() }
    }

    /// `a bᵀ`
    pub fn outer(a: &[f64], b: &[f64]) -> Self {
        let mut m = Self::zeros(a.len(), b.len());
        for (i, ai) in a.iter().enumerate() {
            for (j, bj) in b.iter().enumerate() {
                m.data[i * b.len() + j] = ai * bj;
            }
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row_slice(r).to_vec()).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let orow = &other.data[k * other.cols..(k + 1) * other.cols];
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec dimension mismatch");
        (0..self.rows).map(|i| dot(self.row_slice(i), v)).collect()
    }

    /// `selfᵀ v` without materializing the transpose.
    pub fn tr_matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, v.len(), "tr_matvec dimension mismatch");
        let mut out = vec![0.0; self.cols];
        for (i, vi) in v.iter().enumerate() {
            axpy(*vi, self.row_slice(i), &mut out);
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|a| a * s).collect() }
    }

    /// `self += s * other`
    pub fn add_scaled(&mut self, s: f64, other: &Matrix) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        axpy(s, &other.data, &mut self.data);
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `(M + Mᵀ) / 2`
    pub fn symmetrize(&self) -> Matrix {
        assert!(self.is_square());
        let n = self.rows;
        let mut s = self.clone();
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (self[(i, j)] + self[(j, i)]);
                s[(i, j)] = v;
                s[(j, i)] = v;
            }
        }
        s
    }

    pub fn asymmetry(&self) -> f64 {
        let n = self.rows;
        let mut dev: f64 = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                dev = dev.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        dev
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += a * x`
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn sub_vec(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Fixed-step integration settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub step: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self { step: 1e-3 }
    }
}

impl IntegratorConfig {
    pub fn new(step: f64) -> Result<Self, NumericsError> {
        if !(step > 0.0 && step <= MAX_STEP) {
            return Err(NumericsError::InvalidStep(step));
        }
        Ok(Self { step })
    }
}

/// One classical fourth-order Runge–Kutta step of `ẋ = deriv(x, t)`.
pub fn rk4_step<F>(mut deriv: F, state: &[f64], t: f64, dt: f64) -> Result<Vec<f64>, NumericsError>
where
    F: FnMut(&[f64], f64) -> Vec<f64>,
{
    let n = state.len();
    let check = |k: &[f64], at: f64| {
        if all_finite(k) {
            Ok(())
        } else {
            Err(NumericsError::IntegrationFault { t: at })
        }
    };
    let k1 = deriv(state, t);
    check(&k1, t)?;
    let mut tmp = state.to_vec();
    axpy(0.5 * dt, &k1, &mut tmp);
    let k2 = deriv(&tmp, t + 0.5 * dt);
    check(&k2, t + 0.5 * dt)?;
    tmp.copy_from_slice(state);
    axpy(0.5 * dt, &k2, &mut tmp);
    let k3 = deriv(&tmp, t + 0.5 * dt);
    check(&k3, t + 0.5 * dt)?;
    tmp.copy_from_slice(state);
    axpy(dt, &k3, &mut tmp);
    let k4 = deriv(&tmp, t + dt);
    check(&k4, t + dt)?;
    let mut out = state.to_vec();
    for i in 0..n {
        out[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    Ok(out)
}

fn symmetry_tolerance(m: &Matrix) -> f64 {
    1e-10 * m.max_abs().max(1.0)
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in ascending order and the matching eigenvectors as
/// the columns of the second value.
pub fn sym_eig(m: &Matrix) -> Result<(Vec<f64>, Matrix), NumericsError> {
    if !m.is_square() {
        return Err(NumericsError::Dimension("sym_eig needs a square matrix".into()));
    }
    let dev = m.asymmetry();
    if dev > symmetry_tolerance(m) {
        return Err(NumericsError::Asymmetric { deviation: dev });
    }
    let n = m.rows();
    let mut a = m.symmetrize();
    let mut v = Matrix::identity(n);
    let scale = a.frobenius_norm();
    if scale == 0.0 {
        return Ok((vec![0.0; n], v));
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[(i, j)] * a[(i, j)];
            }
        }
        if off.sqrt() <= 1e-16 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let vals = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vecs = Matrix::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        for r in 0..n {
            vecs[(r, col)] = v[(r, i)];
        }
    }
    Ok((vals, vecs))
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn sym_eig_min(m: &Matrix) -> Result<f64, NumericsError> {
    let (vals, _) = sym_eig(m)?;
    Ok(vals.first().copied().unwrap_or(0.0))
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn sym_eig_range(m: &Matrix) -> Result<(f64, f64), NumericsError> {
    let (vals, _) = sym_eig(m)?;
    Ok((vals.first().copied().unwrap_or(0.0), vals.last().copied().unwrap_or(0.0)))
}

/// Solves `A x = b` by LU decomposition with partial pivoting.
pub fn lu_solve(a: &Matrix, b: &[f64]) -> Result<Vec<f64>, NumericsError> {
    if !a.is_square() || a.rows() != b.len() {
        return Err(NumericsError::Dimension("lu_solve needs square A and matching b".into()));
    }
    let n = a.rows();
    let mut lu = a.clone();
    let mut x = b.to_vec();
    let tol = 1e-14 * a.max_abs().max(f64::MIN_POSITIVE);
    for k in 0..n {
        let (piv, pval) = (k..n)
            .map(|r| (r, lu[(r, k)].abs()))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .expect("non-empty pivot range");
        if pval <= tol {
            return Err(NumericsError::Singular);
        }
        if piv != k {
            for c in 0..n {
                let tmp = lu[(k, c)];
                lu[(k, c)] = lu[(piv, c)];
                lu[(piv, c)] = tmp;
            }
            x.swap(k, piv);
        }
        for r in (k + 1)..n {
            let f = lu[(r, k)] / lu[(k, k)];
            if f == 0.0 {
                continue;
            }
            for c in k..n {
                lu[(r, c)] -= f * lu[(k, c)];
            }
            x[r] -= f * x[k];
        }
    }
    for k in (0..n).rev() {
        let mut s = x[k];
        for c in (k + 1)..n {
            s -= lu[(k, c)] * x[c];
        }
        x[k] = s / lu[(k, k)];
    }
    Ok(x)
}

/// Characteristic polynomial `[1, a₁, …, aₙ]` of `λⁿ + a₁λⁿ⁻¹ + … + aₙ`
/// (Faddeev–LeVerrier).
pub fn char_poly(a: &Matrix) -> Vec<f64> {
    assert!(a.is_square());
    let n = a.rows();
    let mut coeffs = vec![1.0];
    let mut m = Matrix::identity(n);
    for k in 1..=n {
        let am = a.matmul(&m);
        let ck = -am.trace() / k as f64;
        coeffs.push(ck);
        m = am;
        for i in 0..n {
            m[(i, i)] += ck;
        }
    }
    coeffs
}

/// Monic polynomial with the given real roots, highest degree first.
pub fn poly_from_roots(roots: &[f64]) -> Vec<f64> {
    let mut p = vec![1.0];
    for r in roots {
        let mut next = vec![0.0; p.len() + 1];
        for (i, c) in p.iter().enumerate() {
            next[i] += c;
            next[i + 1] -= r * c;
        }
        p = next;
    }
    p
}

/// Routh–Hurwitz test on a monic polynomial (highest degree first).
fn poly_is_hurwitz(coeffs: &[f64]) -> bool {
    let n = coeffs.len() - 1;
    if n == 0 {
        return true;
    }
    if coeffs.iter().any(|c| *c <= 0.0) {
        return false;
    }
    let mut prev: Vec<f64> = coeffs.iter().step_by(2).copied().collect();
    let mut cur: Vec<f64> = coeffs.iter().skip(1).step_by(2).copied().collect();
    for _ in 0..n {
        if cur.is_empty() {
            break;
        }
        if cur[0] <= 0.0 {
            return false;
        }
        let next: Vec<f64> = (0..prev.len().saturating_sub(1))
            .map(|i| {
                let c_next = cur.get(i + 1).copied().unwrap_or(0.0);
                (cur[0] * prev[i + 1] - prev[0] * c_next) / cur[0]
            })
            .collect();
        prev = cur;
        cur = next;
    }
    true
}

/// True when every eigenvalue of `a` has negative real part.
pub fn is_hurwitz(a: &Matrix) -> bool {
    a.is_square() && poly_is_hurwitz(&char_poly(a))
}

/// Solves `AclᵀP + P·Acl = −S` by Kronecker vectorization and dense LU.
pub fn solve_lyapunov(acl: &Matrix, s: &Matrix) -> Result<Matrix, NumericsError> {
    if !acl.is_square() || !s.is_square() || acl.rows() != s.rows() {
        return Err(NumericsError::Dimension("solve_lyapunov needs matching square matrices".into()));
    }
    if !is_hurwitz(acl) {
        return Err(NumericsError::NotHurwitz);
    }
    let min_eig = sym_eig_min(s)?;
    if min_eig <= 0.0 {
        return Err(NumericsError::NotPositiveDefinite { min_eig });
    }
    let n = acl.rows();
    // Row-major vec(P): index i*n + j. (AᵀP)_ij = Σ_k A_ki P_kj, (PA)_ij = Σ_k P_ik A_kj.
    let mut kron = Matrix::zeros(n * n, n * n);
    for i in 0..n {
        for j in 0..n {
            let row = i * n + j;
            for k in 0..n {
                kron[(row, k * n + j)] += acl[(k, i)];
                kron[(row, i * n + k)] += acl[(k, j)];
            }
        }
    }
    let rhs: Vec<f64> = s.as_slice().iter().map(|v| -v).collect();
    let p = lu_solve(&kron, &rhs)?;
    Ok(Matrix::from_row_slice(n, n, &p)?.symmetrize())
}

/// Evaluates the matrix polynomial `p(A)` (coefficients highest degree first).
pub fn matrix_poly(a: &Matrix, coeffs: &[f64]) -> Matrix {
    let n = a.rows();
    let mut acc = Matrix::zeros(n, n);
    for c in coeffs {
        acc = acc.matmul(a);
        for i in 0..n {
            acc[(i, i)] += c;
        }
    }
    acc
}

/// Observer gain `K` (n×1) placing the eigenvalues of `A − K C` at `poles`,
/// via Ackermann's formula on the dual pair `(Aᵀ, Cᵀ)`.
pub fn place_observer_gain(a: &Matrix, c: &Matrix, poles: &[f64]) -> Result<Matrix, NumericsError> {
    let n = a.rows();
    if !a.is_square() || c.rows() != 1 || c.cols() != n || poles.len() != n {
        return Err(NumericsError::Dimension(
            "place_observer_gain needs A n×n, C 1×n and n poles".into(),
        ));
    }
    let desired = poly_from_roots(poles);
    let current = char_poly(a);
    let scale = desired.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if current.iter().zip(&desired).all(|(x, y)| (x - y).abs() <= 1e-12 * scale) {
        // Already placed: no output injection needed, even for unobservable pairs.
        return Ok(Matrix::zeros(n, 1));
    }
    let mut obs = Matrix::zeros(n, n);
    let mut row = c.clone();
    for r in 0..n {
        for j in 0..n {
            obs[(r, j)] = row[(0, j)];
        }
        row = row.matmul(a);
    }
    let mut e_last = vec![0.0; n];
    e_last[n - 1] = 1.0;
    let v = match lu_solve(&obs, &e_last) {
        Ok(v) => v,
        Err(NumericsError::Singular) => return Err(NumericsError::Unobservable),
        Err(e) => return Err(e),
    };
    let phi = matrix_poly(a, &desired);
    Ok(Matrix::column(&phi.matvec(&v)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn rk4_zero_field_is_identity() {
        let out = rk4_step(|x, _| vec![0.0; x.len()], &[1.0, 2.0], 0.0, 0.37).unwrap();
        assert_eq!(out, vec![1.0, 2.0]);
    }

    #[test]
    fn rk4_exponential_decay() {
        let out = rk4_step(|x, _| vec![-x[0]], &[1.0], 0.0, 0.1).unwrap();
        assert!(close(out[0], (-0.1f64).exp(), 1e-7), "{}", out[0]);
    }

    #[test]
    fn rk4_time_integrand_is_exact() {
        let out = rk4_step(|_, t| vec![t], &[0.0], 0.0, 1.0).unwrap();
        assert!(close(out[0], 0.5, 1e-15));
    }

    #[test]
    fn rk4_reports_fault_time() {
        let err = rk4_step(|_, t| vec![if t > 2.0 { f64::NAN } else { 1.0 }], &[0.0], 2.0, 0.5);
        assert_eq!(err, Err(NumericsError::IntegrationFault { t: 2.25 }));
    }

    #[test]
    fn integrator_step_bounds() {
        assert!(IntegratorConfig::new(1e-3).is_ok());
        assert!(IntegratorConfig::new(0.0).is_err());
        assert!(IntegratorConfig::new(0.02).is_err());
    }

    #[test]
    fn eig_min_examples() {
        assert!(close(sym_eig_min(&Matrix::identity(3)).unwrap(), 1.0, 1e-14));
        assert!(close(sym_eig_min(&Matrix::from_diag(&[2.0, -1.0, 5.0])).unwrap(), -1.0, 1e-14));
        let m = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        assert!(close(sym_eig_min(&m).unwrap(), 1.0, 1e-12));
    }

    #[test]
    fn eig_rejects_asymmetric() {
        let m = Matrix::from_rows(&[vec![1.0, 0.0], vec![1e-6, 1.0]]).unwrap();
        assert!(matches!(sym_eig_min(&m), Err(NumericsError::Asymmetric { .. })));
    }

    #[test]
    fn eig_residual_is_small() {
        let m = Matrix::from_rows(&[
            vec![4.0, 1.0, -2.0, 0.5],
            vec![1.0, 3.0, 0.0, 1.0],
            vec![-2.0, 0.0, 1.0, 0.3],
            vec![0.5, 1.0, 0.3, -2.0],
        ])
        .unwrap();
        let (vals, vecs) = sym_eig(&m).unwrap();
        let scale = m.frobenius_norm();
        for (c, lambda) in vals.iter().enumerate() {
            let v: Vec<f64> = (0..4).map(|r| vecs[(r, c)]).collect();
            let mv = m.matvec(&v);
            let res: f64 = mv.iter().zip(&v).map(|(a, b)| (a - lambda * b).powi(2)).sum::<f64>().sqrt();
            assert!(res <= 1e-9 * scale, "residual {res}");
        }
    }

    #[test]
    fn lyapunov_decoupled_cases() {
        let p = solve_lyapunov(&Matrix::identity(2).scale(-1.0), &Matrix::identity(2).scale(2.0)).unwrap();
        assert!(p.sub(&Matrix::identity(2)).max_abs() < 1e-12);
        let p = solve_lyapunov(&Matrix::from_diag(&[-1.0, -2.0]), &Matrix::from_diag(&[2.0, 4.0])).unwrap();
        assert!(p.sub(&Matrix::identity(2)).max_abs() < 1e-12);
    }

    #[test]
    fn lyapunov_rejects_unstable() {
        let acl = Matrix::from_rows(&[vec![0.0, 1.0], vec![2.0, -3.0]]).unwrap();
        assert_eq!(solve_lyapunov(&acl, &Matrix::identity(2)), Err(NumericsError::NotHurwitz));
    }

    #[test]
    fn hurwitz_checks() {
        assert!(is_hurwitz(&Matrix::from_rows(&[vec![0.0, 1.0], vec![-2.0, -3.0]]).unwrap()));
        assert!(!is_hurwitz(&Matrix::from_rows(&[vec![-0.6, -1.0], vec![0.0, 0.0]]).unwrap()));
        // eigenvalues -1 ± 2i
        assert!(is_hurwitz(&Matrix::from_rows(&[vec![-1.0, 2.0], vec![-2.0, -1.0]]).unwrap()));
        // eigenvalues 0.1 ± i
        assert!(!is_hurwitz(&Matrix::from_rows(&[vec![0.1, 1.0], vec![-1.0, 0.1]]).unwrap()));
        let third = Matrix::from_diag(&[-1.0, -2.0, -3.0]);
        assert!(is_hurwitz(&third));
    }

    #[test]
    fn char_poly_matches_roots() {
        let a = Matrix::from_diag(&[-1.0, -2.0, -3.0]);
        let cp = char_poly(&a);
        let expected = poly_from_roots(&[-1.0, -2.0, -3.0]);
        for (x, y) in cp.iter().zip(&expected) {
            assert!(close(*x, *y, 1e-12));
        }
    }

    #[test]
    fn observer_gain_convex_set() {
        let a = Matrix::from_rows(&[vec![-0.6, -1.0], vec![0.0, 0.0]]).unwrap();
        let c = Matrix::row(&[1.0, 0.0]);
        let k = place_observer_gain(&a, &c, &[-5.0, -6.0]).unwrap();
        assert!(close(k[(0, 0)], 10.4, 1e-10) && close(k[(1, 0)], -30.0, 1e-10), "{k:?}");
    }

    #[test]
    fn observer_gain_already_placed() {
        let a = Matrix::identity(2).scale(-1.0);
        let c = Matrix::row(&[1.0, 0.0]);
        let k = place_observer_gain(&a, &c, &[-1.0, -1.0]).unwrap();
        assert!(k.max_abs() == 0.0);
        // (−I, [1 0]) is unobservable, so moving the poles is impossible.
        assert_eq!(place_observer_gain(&a, &c, &[-2.0, -3.0]), Err(NumericsError::Unobservable));
        let a = Matrix::from_rows(&[vec![-1.0, 1.0], vec![0.0, -1.0]]).unwrap();
        let k = place_observer_gain(&a, &c, &[-1.0, -1.0]).unwrap();
        assert!(k.max_abs() < 1e-12);
    }

    #[test]
    fn observer_gain_obstacle() {
        let a = Matrix::from_rows(&[vec![-1.0, -1.0], vec![-0.5, -0.5]]).unwrap();
        let c = Matrix::row(&[1.0, 0.0]);
        let k = place_observer_gain(&a, &c, &[-3.0, -4.0]).unwrap();
        assert!(close(k[(0, 0)], 5.5, 1e-10) && close(k[(1, 0)], -9.25, 1e-10), "{k:?}");
    }
}
