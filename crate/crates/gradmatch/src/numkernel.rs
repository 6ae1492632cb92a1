//! Dense real linear algebra used by the rest of the crate: symmetric
//! eigendecomposition, minimum-norm least squares, SPD solves, and condition
//! numbers.
//!
//! Everything here runs on small dense matrices (at most a few hundred rows or
//! columns), so the implementations favor robustness over asymptotic speed:
//! cyclic Jacobi for symmetric eigenproblems and one-sided (Hestenes) Jacobi
//! for the SVD behind `lstsq_min_norm`. One-sided Jacobi resolves tiny
//! singular values accurately, which is what makes the numerical-rank cutoff
//! at `1e-10 * sigma_max` trustworthy for exactly rank-deficient inputs.

use thiserror::Error;

/// Relative cutoff on singular values for numerical rank decisions.
pub const RANK_RTOL: f64 = 1e-10;

/// Condition-number sentinel for rank-deficient matrices (documented stand-in
/// for infinity; never NaN).
pub const COND_SENTINEL: f64 = f64::MAX;

#[derive(Debug, Error)]
pub enum NumError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("matrix is not symmetric (max asymmetry {max_asym:e} exceeds tolerance)")]
    NotSymmetric { max_asym: f64 },
    #[error("matrix is not positive definite (pivot {pivot:e} at index {index})")]
    NotPositiveDefinite { pivot: f64, index: usize },
}

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
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
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "entry count must equal rows*cols");
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

    pub fn diag(entries: &[f64]) -> Self {
        let n = entries.len();
        let mut m = Matrix::zeros(n, n);
        for (i, &e) in entries.iter().enumerate() {
            m.set(i, i, e);
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

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.get(k, j);
                }
            }
        }
        out
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len(), "matvec shape mismatch");
        let mut out = vec![0.0; self.rows];
        for r in 0..self.rows {
            let row = self.row(r);
            out[r] = dot(row, x);
        }
        out
    }

    /// Computes `A^T x` without forming the transpose.
    pub fn tr_matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, x.len(), "tr_matvec shape mismatch");
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let xr = x[r];
            if xr == 0.0 {
                continue;
            }
            let row = self.row(r);
            for c in 0..self.cols {
                out[c] += row[c] * xr;
            }
        }
        out
    }

    /// Gram matrix `(1/scale) A^T A`.
    pub fn gram_scaled(&self, scale: f64) -> Matrix {
        let mut g = Matrix::zeros(self.cols, self.cols);
        for r in 0..self.rows {
            let row = self.row(r);
            for i in 0..self.cols {
                let ri = row[i];
                if ri == 0.0 {
                    continue;
                }
                for j in i..self.cols {
                    g.data[i * self.cols + j] += ri * row[j];
                }
            }
        }
        for i in 0..self.cols {
            for j in i..self.cols {
                let v = g.get(i, j) / scale;
                g.set(i, j, v);
                g.set(j, i, v);
            }
        }
        g
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn trace(&self) -> f64 {
        assert!(self.is_square());
        (0..self.rows).map(|i| self.get(i, i)).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute asymmetry `|a_ij - a_ji|`.
    pub fn max_asymmetry(&self) -> f64 {
        let mut m = 0.0_f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols.min(self.rows) {
                m = m.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        m
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Symmetric eigendecomposition `A = V diag(S) V^T` with ascending
/// eigenvalues and orthonormal eigenvector columns.
#[derive(Clone, Debug)]
pub struct SymEig {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
}

impl SymEig {
    /// Reassembles `V diag(S) V^T`.
    pub fn reconstruct(&self) -> Matrix {
        let n = self.eigenvalues.len();
        let v = &self.eigenvectors;
        let mut out = Matrix::zeros(n, n);
        for k in 0..n {
            let s = self.eigenvalues[k];
            for i in 0..n {
                let vik = v.get(i, k) * s;
                if vik == 0.0 {
                    continue;
                }
                for j in 0..n {
                    let cur = out.get(i, j);
                    out.set(i, j, cur + vik * v.get(j, k));
                }
            }
        }
        out
    }
}

fn check_symmetric(a: &Matrix) -> Result<(), NumError> {
    if !a.is_square() {
        return Err(NumError::Dimension(format!(
            "expected square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let scale = a.max_abs().max(1e-300);
    let asym = a.max_asymmetry();
    if asym > 1e-12 * scale {
        return Err(NumError::NotSymmetric { max_asym: asym });
    }
    Ok(())
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
pub fn sym_eig(a: &Matrix) -> Result<SymEig, NumError> {
    check_symmetric(a)?;
    let n = a.rows();
    let mut m = a.clone();
    // Symmetrize exactly so rotations preserve symmetry bit for bit.
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m.get(i, j) + m.get(j, i));
            m.set(i, j, v);
            m.set(j, i, v);
        }
    }
    let mut v = Matrix::identity(n);
    let scale = m.max_abs().max(1e-300);
    for _sweep in 0..100 {
        let mut off = 0.0_f64;
        for i in 0..n {
            for j in (i + 1)..n {
                off = off.max(m.get(i, j).abs());
            }
        }
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq.abs() <= 1e-18 * scale {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // Update rows/columns p and q of the working matrix.
                for k in 0..n {
                    if k != p && k != q {
                        let akp = m.get(k, p);
                        let akq = m.get(k, q);
                        let new_kp = c * akp - s * akq;
                        let new_kq = s * akp + c * akq;
                        m.set(k, p, new_kp);
                        m.set(p, k, new_kp);
                        m.set(k, q, new_kq);
                        m.set(q, k, new_kq);
                    }
                }
                let new_pp = app - t * apq;
                let new_qq = aqq + t * apq;
                m.set(p, p, new_pp);
                m.set(q, q, new_qq);
                m.set(p, q, 0.0);
                m.set(q, p, 0.0);
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.get(i, i).partial_cmp(&m.get(j, j)).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&i| m.get(i, i)).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (new_col, &old_col) in order.iter().enumerate() {
        for r in 0..n {
            vectors.set(r, new_col, v.get(r, old_col));
        }
    }
    Ok(SymEig {
        eigenvalues,
        eigenvectors: vectors,
    })
}

/// Thin singular value decomposition `A = U diag(S) V^T`.
///
/// `u` is `m x k`, `v` is `n x k`, with `k = min(m, n)` and singular values
/// sorted descending. Columns of `u` belonging to zero singular values are
/// zero vectors.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

/// One-sided (Hestenes) Jacobi SVD. Wide inputs are handled by factoring the
/// transpose and swapping the roles of `u` and `v`.
pub fn svd(a: &Matrix) -> Svd {
    if a.rows() < a.cols() {
        let t = svd(&a.transpose());
        return Svd {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        };
    }
    let m = a.rows();
    let n = a.cols();
    // Work on columns: `work[j]` is the j-th column of the rotated A.
    let mut work: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut v = Matrix::identity(n);
    let eps = 1e-15;
    for _sweep in 0..60 {
        let mut rotated = false;
        for i in 0..n {
            for j in (i + 1)..n {
                let alpha = dot(&work[i], &work[i]);
                let beta = dot(&work[j], &work[j]);
                let gamma = dot(&work[i], &work[j]);
                if gamma == 0.0 || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = if zeta >= 0.0 {
                    1.0 / (zeta + (1.0 + zeta * zeta).sqrt())
                } else {
                    -1.0 / (-zeta + (1.0 + zeta * zeta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..m {
                    let wi = work[i][r];
                    let wj = work[j][r];
                    work[i][r] = c * wi - s * wj;
                    work[j][r] = s * wi + c * wj;
                }
                for r in 0..n {
                    let vi = v.get(r, i);
                    let vj = v.get(r, j);
                    v.set(r, i, c * vi - s * vj);
                    v.set(r, j, s * vi + c * vj);
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = work.iter().map(|col| norm2(col)).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap());
    let mut u = Matrix::zeros(m, n);
    let mut v_sorted = Matrix::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    for (new_col, &old_col) in order.iter().enumerate() {
        let s = norms[old_col];
        sigma.push(s);
        if s > 0.0 {
            for r in 0..m {
                u.set(r, new_col, work[old_col][r] / s);
            }
        }
        for r in 0..n {
            v_sorted.set(r, new_col, v.get(r, old_col));
        }
    }
    Svd {
        u,
        sigma,
        v: v_sorted,
    }
}

/// Result of a least-squares solve.
#[derive(Clone, Debug)]
pub struct LstsqSolution {
    pub x: Vec<f64>,
    pub rank: usize,
    pub residual: f64,
}

/// Minimum-norm least squares: among all minimizers of `||Ax - b||`, returns
/// the one of smallest Euclidean norm. Rank deficiency is reported via `rank`
/// (numerical rank at `RANK_RTOL * sigma_max`), never as an error.
pub fn lstsq_min_norm(a: &Matrix, b: &[f64]) -> Result<LstsqSolution, NumError> {
    if a.rows() != b.len() {
        return Err(NumError::Dimension(format!(
            "lstsq: matrix has {} rows but rhs has {} entries",
            a.rows(),
            b.len()
        )));
    }
    let decomp = svd(a);
    let sigma_max = decomp.sigma.first().copied().unwrap_or(0.0);
    let cutoff = RANK_RTOL * sigma_max;
    let mut x = vec![0.0; a.cols()];
    let mut rank = 0usize;
    for (k, &s) in decomp.sigma.iter().enumerate() {
        if s <= cutoff || s == 0.0 {
            continue;
        }
        rank += 1;
        let uk = decomp.u.column(k);
        let coef = dot(&uk, b) / s;
        for (i, xi) in x.iter_mut().enumerate() {
            *xi += coef * decomp.v.get(i, k);
        }
    }
    let ax = a.matvec(&x);
    let residual = ax
        .iter()
        .zip(b)
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        .sqrt();
    Ok(LstsqSolution { x, rank, residual })
}

/// Solves `Ax = b` for symmetric positive-definite `A` by Cholesky
/// factorization. A non-positive pivot is reported as a definiteness error.
pub fn solve_spd(a: &Matrix, b: &[f64]) -> Result<Vec<f64>, NumError> {
    check_symmetric(a)?;
    let n = a.rows();
    if b.len() != n {
        return Err(NumError::Dimension(format!(
            "solve_spd: matrix is {}x{} but rhs has {} entries",
            n,
            n,
            b.len()
        )));
    }
    // Lower-triangular factor, row-major.
    let mut l = vec![0.0_f64; n * n];
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if d <= 0.0 {
            return Err(NumError::NotPositiveDefinite { pivot: d, index: j });
        }
        let ljj = d.sqrt();
        l[j * n + j] = ljj;
        for i in (j + 1)..n {
            let mut v = a.get(i, j);
            for k in 0..j {
                v -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = v / ljj;
        }
    }
    // Forward substitution L y = b.
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut v = b[i];
        for k in 0..i {
            v -= l[i * n + k] * y[k];
        }
        y[i] = v / l[i * n + i];
    }
    // Back substitution L^T x = y.
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut v = y[i];
        for k in (i + 1)..n {
            v -= l[k * n + i] * x[k];
        }
        x[i] = v / l[i * n + i];
    }
    Ok(x)
}

/// Ratio of extreme singular values. Rank-deficient inputs (smallest singular
/// value at or below `RANK_RTOL * sigma_max`) return `COND_SENTINEL`.
pub fn cond_number(a: &Matrix) -> f64 {
    assert!(a.rows() > 0 && a.cols() > 0, "cond_number of empty matrix");
    let decomp = svd(a);
    let sigma_max = decomp.sigma.first().copied().unwrap_or(0.0);
    let sigma_min = decomp.sigma.last().copied().unwrap_or(0.0);
    if sigma_max == 0.0 || sigma_min <= RANK_RTOL * sigma_max {
        return COND_SENTINEL;
    }
    sigma_max / sigma_min
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use proptest::prelude::*;

    fn random_symmetric(n: usize, seed: u64) -> Matrix {
        let mut rng = RngStream::new(seed, "sym");
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = rng.normal();
                m.set(i, j, v);
                m.set(j, i, v);
            }
        }
        m
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = RngStream::new(seed, "mat");
        Matrix::from_vec(rows, cols, rng.normal_vec(rows * cols))
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn sym_eig_diagonal_input() {
        let e = sym_eig(&Matrix::diag(&[2.0, 3.0])).unwrap();
        assert!((e.eigenvalues[0] - 2.0).abs() < 1e-14);
        assert!((e.eigenvalues[1] - 3.0).abs() < 1e-14);
        let v = &e.eigenvectors;
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((v.get(i, j).abs() - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn sym_eig_known_two_by_two() {
        let a = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let e = sym_eig(&a).unwrap();
        assert!((e.eigenvalues[0] + 1.0).abs() < 1e-14);
        assert!((e.eigenvalues[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn sym_eig_reconstruction_random() {
        let a = random_symmetric(10, 42);
        let e = sym_eig(&a).unwrap();
        let rebuilt = e.reconstruct();
        let err = rebuilt.sub(&a).frobenius_norm() / a.frobenius_norm();
        assert!(err < 1e-10, "reconstruction error {err}");
    }

    #[test]
    fn sym_eig_rejects_asymmetric() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]);
        assert!(matches!(sym_eig(&a), Err(NumError::NotSymmetric { .. })));
        let rect = Matrix::zeros(2, 3);
        assert!(matches!(sym_eig(&rect), Err(NumError::Dimension(_))));
    }

    #[test]
    fn lstsq_min_norm_underdetermined_row() {
        let a = Matrix::from_rows(&[vec![1.0, 1.0]]);
        let sol = lstsq_min_norm(&a, &[2.0]).unwrap();
        assert!((sol.x[0] - 1.0).abs() < 1e-12);
        assert!((sol.x[1] - 1.0).abs() < 1e-12);
        assert_eq!(sol.rank, 1);
    }

    #[test]
    fn lstsq_identity() {
        let sol = lstsq_min_norm(&Matrix::identity(2), &[3.0, 4.0]).unwrap();
        assert!((sol.x[0] - 3.0).abs() < 1e-14);
        assert!((sol.x[1] - 4.0).abs() < 1e-14);
        assert!(sol.residual < 1e-12);
        assert_eq!(sol.rank, 2);
    }

    #[test]
    fn lstsq_duplicate_columns_split_evenly() {
        // Two identical columns; verify against the pseudoinverse assembled
        // independently from sym_eig of A^T A.
        let mut rng = RngStream::new(9, "dup");
        let col: Vec<f64> = rng.normal_vec(6);
        let mut a = Matrix::zeros(6, 2);
        for r in 0..6 {
            a.set(r, 0, col[r]);
            a.set(r, 1, col[r]);
        }
        let b: Vec<f64> = col.iter().map(|v| 3.0 * v).collect();
        let sol = lstsq_min_norm(&a, &b).unwrap();
        assert_eq!(sol.rank, 1);
        assert!((sol.x[0] - 1.5).abs() < 1e-10, "{:?}", sol.x);
        assert!((sol.x[1] - 1.5).abs() < 1e-10);

        // Independent route: x = V f(S)^+ V^T A^T b with f clamped at the
        // same relative cutoff.
        let gram = a.gram_scaled(1.0);
        let e = sym_eig(&gram).unwrap();
        let atb = a.tr_matvec(&b);
        let smax = e.eigenvalues.iter().fold(0.0_f64, |m, &s| m.max(s));
        let mut x = vec![0.0; 2];
        for k in 0..2 {
            let s = e.eigenvalues[k];
            if s <= 1e-12 * smax {
                continue;
            }
            let vk = e.eigenvectors.column(k);
            let c = dot(&vk, &atb) / s;
            for i in 0..2 {
                x[i] += c * vk[i];
            }
        }
        for i in 0..2 {
            assert!((sol.x[i] - x[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn lstsq_consistent_overdetermined_residual_small() {
        let a = random_matrix(20, 5, 3);
        let xtrue: Vec<f64> = (0..5).map(|i| i as f64 - 2.0).collect();
        let b = a.matvec(&xtrue);
        let sol = lstsq_min_norm(&a, &b).unwrap();
        assert!(sol.residual < 1e-10, "residual {}", sol.residual);
        for i in 0..5 {
            assert!((sol.x[i] - xtrue[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn lstsq_null_component_increases_norm() {
        // Underdetermined system: adding any null-space component must grow ||x||.
        let a = random_matrix(3, 7, 17);
        let b = vec![1.0, -2.0, 0.5];
        let sol = lstsq_min_norm(&a, &b).unwrap();
        let base = norm2(&sol.x);
        let mut rng = RngStream::new(23, "null");
        for _ in 0..10 {
            // Project a random vector onto the null space of A.
            let z = rng.normal_vec(7);
            let decomp = svd(&a);
            let mut null_part = z.clone();
            for k in 0..decomp.sigma.len() {
                if decomp.sigma[k] <= RANK_RTOL * decomp.sigma[0] {
                    continue;
                }
                let vk = decomp.v.column(k);
                let c = dot(&z, &vk);
                for i in 0..7 {
                    null_part[i] -= c * vk[i];
                }
            }
            if norm2(&null_part) < 1e-8 {
                continue;
            }
            let perturbed: Vec<f64> = sol.x.iter().zip(&null_part).map(|(x, n)| x + n).collect();
            assert!(norm2(&perturbed) > base);
        }
    }

    #[test]
    fn solve_spd_examples() {
        let x = solve_spd(&Matrix::diag(&[2.0, 2.0]), &[2.0, 4.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] - 2.0).abs() < 1e-14);
        let a = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]);
        let x = solve_spd(&a, &[3.0, 3.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn solve_spd_random_residual() {
        let m = random_matrix(10, 10, 5);
        let a = m.gram_scaled(1.0).add(&Matrix::identity(10).scale(0.5));
        let mut rng = RngStream::new(6, "rhs");
        let b = rng.normal_vec(10);
        let x = solve_spd(&a, &b).unwrap();
        let ax = a.matvec(&x);
        let err: f64 = ax
            .iter()
            .zip(&b)
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt()
            / norm2(&b);
        assert!(err < 1e-10, "residual {err}");
    }

    #[test]
    fn solve_spd_rejects_indefinite() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
        assert!(matches!(
            solve_spd(&a, &[1.0, 1.0]),
            Err(NumError::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn solve_spd_agrees_with_lstsq() {
        let m = random_matrix(12, 8, 77);
        let a = m.gram_scaled(1.0).add(&Matrix::identity(8).scale(0.1));
        let mut rng = RngStream::new(78, "rhs2");
        let b = rng.normal_vec(8);
        let chol = solve_spd(&a, &b).unwrap();
        let ls = lstsq_min_norm(&a, &b).unwrap();
        for i in 0..8 {
            assert!(rel_err(chol[i], ls.x[i]) < 1e-9 || (chol[i] - ls.x[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn cond_examples() {
        assert!((cond_number(&Matrix::identity(3)) - 1.0).abs() < 1e-10);
        assert!((cond_number(&Matrix::diag(&[10.0, 0.1])) - 100.0).abs() < 1e-8);
        let mut dup = Matrix::zeros(3, 2);
        for r in 0..3 {
            dup.set(r, 0, r as f64 + 1.0);
            dup.set(r, 1, r as f64 + 1.0);
        }
        assert_eq!(cond_number(&dup), COND_SENTINEL);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn prop_sym_eig_invariants(n in 2usize..=50, seed in 0u64..1000) {
            let a = random_symmetric(n, seed);
            let e = sym_eig(&a).unwrap();
            // Ascending order.
            for k in 1..n {
                prop_assert!(e.eigenvalues[k] >= e.eigenvalues[k - 1]);
            }
            // Orthonormality.
            let v = &e.eigenvectors;
            let vtv = v.transpose().matmul(v);
            let err = vtv.sub(&Matrix::identity(n)).frobenius_norm();
            prop_assert!(err < 1e-10 * (n as f64), "V^T V error {}", err);
            // Reconstruction.
            let rec_err = e.reconstruct().sub(&a).frobenius_norm()
                / a.frobenius_norm().max(1e-300);
            prop_assert!(rec_err < 1e-10, "reconstruction {}", rec_err);
        }

        #[test]
        fn prop_svd_factorization(rows in 1usize..=20, cols in 1usize..=20, seed in 0u64..500) {
            let a = random_matrix(rows, cols, seed);
            let d = svd(&a);
            let k = rows.min(cols);
            prop_assert_eq!(d.sigma.len(), k);
            // Rebuild and compare.
            let mut rebuilt = Matrix::zeros(rows, cols);
            for t in 0..k {
                for i in 0..rows {
                    let us = d.u.get(i, t) * d.sigma[t];
                    if us == 0.0 { continue; }
                    for j in 0..cols {
                        let cur = rebuilt.get(i, j);
                        rebuilt.set(i, j, cur + us * d.v.get(j, t));
                    }
                }
            }
            let err = rebuilt.sub(&a).frobenius_norm() / a.frobenius_norm().max(1e-300);
            prop_assert!(err < 1e-10, "svd reconstruction {}", err);
        }
    }
}
