//! Dense kernels: modified Gram–Schmidt QR, SVD rank, projectors, solves.
//!
//! The QR factorisation is written out by hand because its degenerate-column
//! convention matters to the observer gain, and so is the SVD (see
//! [`jacobi_svd`]). Symmetric eigenvalues and Cholesky come from `nalgebra`.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Thin QR factors, `X = Q R` with `Q` n×m and `R` m×m upper triangular.
#[derive(Debug, Clone, PartialEq)]
pub struct QrFactors {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

/// Modified Gram–Schmidt QR with non-negative diagonal and one
/// re-orthogonalisation sweep per column.
///
/// A column whose remaining norm falls to or below
/// `max(n, m)·ε·‖X‖_F` is treated as dependent: its `R` diagonal entry is
/// set to zero and the `Q` column is replaced by a unit vector orthogonal to
/// the previous columns, so `Q` keeps orthonormal columns.
pub fn mgs_qr(x: &DMatrix<f64>) -> QrFactors {
    let (n, m) = x.shape();
    assert!(n >= m, "mgs_qr needs rows >= cols, got {n}x{m}");
    let tol = (n.max(m) as f64) * f64::EPSILON * x.norm();
    let mut q = x.clone();
    let mut r = DMatrix::zeros(m, m);
    for j in 0..m {
        // second sweep restores orthogonality lost on nearly dependent columns
        for _ in 0..2 {
            for i in 0..j {
                let rij = q.column(i).dot(&q.column(j));
                r[(i, j)] += rij;
                let qi = q.column(i).clone_owned();
                q.column_mut(j).axpy(-rij, &qi, 1.0);
            }
        }
        let norm = q.column(j).norm();
        if norm > tol {
            r[(j, j)] = norm;
            q.column_mut(j).unscale_mut(norm);
        } else {
            r[(j, j)] = 0.0;
            let fill = complement_vector(&q, j);
            q.set_column(j, &fill);
        }
    }
    QrFactors { q, r }
}

/// Unit vector orthogonal to the first `j` columns of `q`, built from the
/// canonical basis vector with the largest residual and orthogonalised twice.
fn complement_vector(q: &DMatrix<f64>, j: usize) -> DVector<f64> {
    let n = q.nrows();
    let mut best = DVector::zeros(n);
    let mut best_norm = -1.0;
    for e in 0..n {
        let mut v = DVector::zeros(n);
        v[e] = 1.0;
        for _ in 0..2 {
            for i in 0..j {
                let c = q.column(i).dot(&v);
                v.axpy(-c, &q.column(i), 1.0);
            }
        }
        let nv = v.norm();
        if nv > best_norm {
            best_norm = nv;
            best = v;
        }
    }
    best / best_norm
}

/// Threshold for counting singular values.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum RankTolerance {
    /// `max(rows, cols)·ε·σ_max`
    #[default]
    Default,
    /// Fixed absolute threshold.
    Absolute(f64),
    /// `rel·σ_max`
    Relative(f64),
}

impl RankTolerance {
    fn threshold(self, rows: usize, cols: usize, sigma_max: f64) -> f64 {
        match self {
            RankTolerance::Default => (rows.max(cols) as f64) * f64::EPSILON * sigma_max,
            RankTolerance::Absolute(tol) => tol,
            RankTolerance::Relative(rel) => rel * sigma_max,
        }
    }
}

const MAX_SWEEPS: usize = 100;

/// Thin SVD `X = U diag(σ) Vᵀ`, σ descending.
struct Svd {
    u: DMatrix<f64>,
    sigma: DVector<f64>,
    v: DMatrix<f64>,
}

/// One-sided Jacobi SVD.
///
/// Written by hand because nalgebra's bidiagonal SVD returned wrong factors
/// for some exactly rank-deficient products `A Bᵀ`; Jacobi rotations are
/// accurate to working precision on every singular value.
fn jacobi_svd(x: &DMatrix<f64>) -> Result<Svd> {
    if x.nrows() < x.ncols() {
        let t = jacobi_svd(&x.transpose())?;
        return Ok(Svd { u: t.v, sigma: t.sigma, v: t.u });
    }
    let (n, m) = x.shape();
    let mut w = x.clone();
    let mut v = DMatrix::<f64>::identity(m, m);
    let tol = n as f64 * f64::EPSILON;
    let mut converged = m < 2;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..m {
            for q in p + 1..m {
                let alpha = w.column(p).norm_squared();
                let beta = w.column(q).norm_squared();
                let gamma = w.column(p).dot(&w.column(q));
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut w, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        converged = !rotated;
    }
    if !converged || !w.iter().all(|e| e.is_finite()) {
        return Err(Error::SvdNoConvergence);
    }
    let mut order: Vec<(usize, f64)> = (0..m).map(|j| (j, w.column(j).norm())).collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut u = DMatrix::zeros(n, m);
    let mut vs = DMatrix::zeros(m, m);
    let mut sigma = DVector::zeros(m);
    for (k, &(j, s)) in order.iter().enumerate() {
        sigma[k] = s;
        if s > 0.0 {
            u.set_column(k, &(w.column(j) / s));
        }
        vs.set_column(k, &v.column(j));
    }
    Ok(Svd { u, sigma, v: vs })
}

fn rotate(m: &mut DMatrix<f64>, p: usize, q: usize, c: f64, s: f64) {
    for i in 0..m.nrows() {
        let a = m[(i, p)];
        let b = m[(i, q)];
        m[(i, p)] = c * a - s * b;
        m[(i, q)] = s * a + c * b;
    }
}

/// Singular values, descending.
pub fn singular_values(x: &DMatrix<f64>) -> Result<DVector<f64>> {
    if x.is_empty() {
        return Ok(DVector::zeros(0));
    }
    Ok(jacobi_svd(x)?.sigma)
}

/// Number of singular values above the tolerance.
pub fn numerical_rank(x: &DMatrix<f64>, tol: RankTolerance) -> Result<usize> {
    let sv = singular_values(x)?;
    let sigma_max = sv.iter().cloned().fold(0.0, f64::max);
    let threshold = tol.threshold(x.nrows(), x.ncols(), sigma_max);
    Ok(sv.iter().filter(|&&s| s > threshold).count())
}

/// Smallest of the `min(rows, cols)` singular values.
pub fn min_singular_value(x: &DMatrix<f64>) -> Result<f64> {
    let sv = singular_values(x)?;
    Ok(sv.iter().cloned().fold(f64::INFINITY, f64::min))
}

/// Moore–Penrose pseudo-inverse with the default rank tolerance.
pub fn pseudo_inverse(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (rows, cols) = x.shape();
    if x.is_empty() {
        return Ok(DMatrix::zeros(cols, rows));
    }
    let svd = jacobi_svd(x)?;
    let sigma_max = svd.sigma.iter().cloned().fold(0.0, f64::max);
    let threshold = RankTolerance::Default.threshold(rows, cols, sigma_max);
    let mut pinv = DMatrix::zeros(cols, rows);
    for (k, &s) in svd.sigma.iter().enumerate() {
        if s > threshold {
            pinv += (svd.v.column(k) * svd.u.column(k).transpose()) / s;
        }
    }
    Ok(pinv)
}

/// Orthogonal projector `K = I − J J⁺` onto the complement of `Im J`.
pub fn orthogonal_projector_complement(j: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let rows = j.nrows();
    let pinv = pseudo_inverse(j)?;
    let mut k = DMatrix::identity(rows, rows) - j * pinv;
    // symmetrise to remove rounding asymmetry
    let kt = k.transpose();
    k = (&k + kt) * 0.5;
    Ok(k)
}

/// Solve a symmetric positive definite system by Cholesky.
pub fn solve_spd(h: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    h.clone().cholesky().map(|ch| ch.solve(rhs))
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn symmetric_eigenvalues(h: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = h.clone().symmetric_eigen().eigenvalues.iter().cloned().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Frobenius norm of `QᵀQ − I`.
pub fn orthonormality_defect(q: &DMatrix<f64>) -> f64 {
    let k = q.ncols();
    (q.transpose() * q - DMatrix::identity(k, k)).norm()
}

/// Horizontal concatenation.
pub fn hstack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows = blocks.first().map_or(0, |b| b.nrows());
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut c0 = 0;
    for b in blocks {
        assert_eq!(b.nrows(), rows, "row mismatch in hstack");
        out.view_mut((0, c0), (rows, b.ncols())).copy_from(*b);
        c0 += b.ncols();
    }
    out
}

/// Vertical concatenation.
pub fn vstack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let cols = blocks.first().map_or(0, |b| b.ncols());
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut r0 = 0;
    for b in blocks {
        assert_eq!(b.ncols(), cols, "column mismatch in vstack");
        out.view_mut((r0, 0), (b.nrows(), cols)).copy_from(*b);
        r0 += b.nrows();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn mat(rows: usize, cols: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, v)
    }

    #[test]
    fn qr_examples() {
        let f = mgs_qr(&DMatrix::identity(3, 3));
        assert_eq!(f.q, DMatrix::identity(3, 3));
        assert_eq!(f.r, DMatrix::identity(3, 3));

        let f = mgs_qr(&mat(2, 2, &[0.0, 1.0, 1.0, 0.0]));
        assert_eq!(f.q, mat(2, 2, &[0.0, 1.0, 1.0, 0.0]));
        assert_eq!(f.r, DMatrix::identity(2, 2));

        let f = mgs_qr(&mat(2, 1, &[3.0, 4.0]));
        assert_relative_eq!(f.q, mat(2, 1, &[0.6, 0.8]), epsilon = 1e-15);
        assert_relative_eq!(f.r[(0, 0)], 5.0);
    }

    #[test]
    fn qr_dependent_column() {
        let x = mat(3, 3, &[1.0, 2.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let f = mgs_qr(&x);
        assert_eq!(f.r[(1, 1)], 0.0);
        assert!(orthonormality_defect(&f.q) < 1e-14);
        assert_relative_eq!(&f.q * &f.r, x, epsilon = 1e-14);

        let f = mgs_qr(&DMatrix::zeros(2, 1));
        assert_eq!(f.r[(0, 0)], 0.0);
        assert_relative_eq!(f.q.column(0).norm(), 1.0);
    }

    #[test]
    fn rank_examples() {
        assert_eq!(numerical_rank(&DMatrix::identity(4, 4), RankTolerance::Default).unwrap(), 4);
        assert_eq!(numerical_rank(&DMatrix::zeros(3, 5), RankTolerance::Default).unwrap(), 0);
        assert_eq!(numerical_rank(&mat(2, 2, &[1.0, 2.0, 2.0, 4.0]), RankTolerance::Default).unwrap(), 1);
        let near = mat(2, 2, &[1.0, 0.0, 0.0, 1e-9]);
        assert_eq!(numerical_rank(&near, RankTolerance::Default).unwrap(), 2);
        assert_eq!(numerical_rank(&near, RankTolerance::Relative(1e-6)).unwrap(), 1);
        assert_eq!(numerical_rank(&near, RankTolerance::Absolute(1e-12)).unwrap(), 2);
    }

    #[test]
    fn projector_examples() {
        let k = orthogonal_projector_complement(&mat(2, 1, &[0.0, 1.0])).unwrap();
        assert_relative_eq!(k, mat(2, 2, &[1.0, 0.0, 0.0, 0.0]), epsilon = 1e-15);

        let k = orthogonal_projector_complement(&DMatrix::zeros(3, 2)).unwrap();
        assert_eq!(k, DMatrix::identity(3, 3));

        let k = orthogonal_projector_complement(&mat(2, 1, &[1.0, 1.0])).unwrap();
        assert_relative_eq!(k, mat(2, 2, &[0.5, -0.5, -0.5, 0.5]), epsilon = 1e-15);
    }

    #[test]
    fn spd_solve() {
        let h = mat(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let b = DVector::from_vec(vec![1.0, 2.0]);
        let x = solve_spd(&h, &b).unwrap();
        assert_relative_eq!(&h * x, b, epsilon = 1e-14);
        assert!(solve_spd(&mat(2, 2, &[1.0, 0.0, 0.0, -1.0]), &b).is_none());
    }
}
