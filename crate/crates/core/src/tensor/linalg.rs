use super::{axpy, dot, Matrix};
use crate::error::{Error, Result};

/// Smallest admissible eigenvalue of `W·Wᵀ` for a lift.
pub const LIFT_RANK_THRESHOLD: f64 = 1e-8;

const JACOBI_MAX_SWEEPS: usize = 100;

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Returns eigenvalues in descending order and the matching unit
/// eigenvectors as the rows of the returned matrix.
pub fn jacobi_eigen(sym: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = sym.rows();
    if n != sym.cols() {
        return Err(Error::shape("jacobi_eigen", &[n, n], &[sym.rows(), sym.cols()]));
    }
    if !sym.is_finite() {
        return Err(Error::NonFinite("jacobi_eigen input".into()));
    }
    let mut a = sym.clone();
    let mut v = Matrix::identity(n);
    let scale = a.frobenius().max(f64::MIN_POSITIVE);

    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq.abs() <= f64::MIN_POSITIVE * 4.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
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
    // Stable sort keeps the result deterministic when eigenvalues tie.
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = Matrix::from_fn(n, n, |r, k| v[(k, order[r])]);
    Ok((values, vectors))
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if n != a.cols() {
        return Err(Error::shape("cholesky", &[n, n], &[a.rows(), a.cols()]));
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j, value: d });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// Solve `L·Lᵀ·x = b` given the Cholesky factor `L`.
pub fn cholesky_solve(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[(i, k)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Minimal-norm lift from a `k`-dimensional projection back to the
/// `d`-dimensional space: `Wᵀ (W Wᵀ)⁻¹ δ`.
///
/// Factorises `W Wᵀ` once so many vectors can be lifted cheaply.
#[derive(Debug, Clone)]
pub struct Lifter {
    w: Matrix,
    chol: Matrix,
    smallest_eigenvalue: f64,
}

impl Lifter {
    pub fn new(w: &Matrix) -> Result<Self> {
        if w.rows() == 0 || w.rows() > w.cols() {
            return Err(Error::InvalidArgument(format!(
                "lift needs 1 <= k <= d, got {}x{}",
                w.rows(),
                w.cols()
            )));
        }
        let gram = w.matmul_t(w);
        let (eig, _) = jacobi_eigen(&gram)?;
        let smallest = eig.last().copied().unwrap_or(0.0);
        if smallest <= LIFT_RANK_THRESHOLD {
            return Err(Error::RankDeficient {
                smallest,
                threshold: LIFT_RANK_THRESHOLD,
            });
        }
        let chol = cholesky(&gram)?;
        Ok(Self {
            w: w.clone(),
            chol,
            smallest_eigenvalue: smallest,
        })
    }

    pub fn smallest_eigenvalue(&self) -> f64 {
        self.smallest_eigenvalue
    }

    pub fn projection(&self) -> &Matrix {
        &self.w
    }

    pub fn lift(&self, delta_b: &[f64]) -> Result<Vec<f64>> {
        if delta_b.len() != self.w.rows() {
            return Err(Error::shape("pinv_lift", &[self.w.rows()], &[delta_b.len()]));
        }
        let coeff = cholesky_solve(&self.chol, delta_b);
        Ok(self.w.t_matvec(&coeff))
    }

    /// Lift every row of an `n×k` matrix, giving `n×d`.
    pub fn lift_rows(&self, deltas: &Matrix) -> Result<Matrix> {
        if deltas.cols() != self.w.rows() {
            return Err(Error::shape(
                "lift_rows",
                &[deltas.rows(), self.w.rows()],
                &[deltas.rows(), deltas.cols()],
            ));
        }
        let mut out = Matrix::zeros(deltas.rows(), self.w.cols());
        for i in 0..deltas.rows() {
            let lifted = self.lift(deltas.row(i))?;
            out.row_mut(i).copy_from_slice(&lifted);
        }
        Ok(out)
    }
}

/// `Wᵀ (W Wᵀ)⁻¹ δ` for a full-row-rank `W` (`k×d`).
pub fn pinv_lift(w: &Matrix, delta_b: &[f64]) -> Result<Vec<f64>> {
    Lifter::new(w)?.lift(delta_b)
}

/// Modified Gram-Schmidt over the rows; numerically dependent rows are dropped.
pub fn orthonormalize_rows(m: &Matrix) -> Matrix {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for i in 0..m.rows() {
        let mut v = m.row(i).to_vec();
        let n0 = dot(&v, &v).sqrt();
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&v, b);
                axpy(&mut v, -c, b);
            }
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-10 * n0.max(f64::MIN_POSITIVE) && n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    let cols = m.cols();
    let rows = basis.len();
    Matrix::from_vec(rows, cols, basis.concat()).expect("consistent basis shape")
}

/// Principal angles (radians, ascending) between the row spaces of `a` and `b`.
pub fn principal_angles(a: &Matrix, b: &Matrix) -> Result<Vec<f64>> {
    if a.cols() != b.cols() {
        return Err(Error::shape("principal_angles", &[a.cols()], &[b.cols()]));
    }
    let qa = orthonormalize_rows(a);
    let qb = orthonormalize_rows(b);
    let m = qa.matmul_t(&qb);
    let (small, mm) = if m.rows() <= m.cols() {
        (m.rows(), m.matmul_t(&m))
    } else {
        (m.cols(), m.t_matmul(&m))
    };
    let (eig, _) = jacobi_eigen(&mm)?;
    Ok(eig
        .into_iter()
        .take(small)
        .map(|e| e.max(0.0).sqrt().min(1.0).acos())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_diagonal_input() {
        let m = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 3.0]]).unwrap();
        let (vals, vecs) = jacobi_eigen(&m).unwrap();
        assert_eq!(vals, vec![3.0, 1.0]);
        assert!((vecs[(0, 1)].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn jacobi_reconstructs_matrix() {
        let b = Matrix::from_fn(6, 6, |i, j| ((i * 7 + j * 3) % 11) as f64 / 5.0 - 1.0);
        let s = b.t_matmul(&b);
        let (vals, vecs) = jacobi_eigen(&s).unwrap();
        let mut rec = Matrix::zeros(6, 6);
        for (k, &l) in vals.iter().enumerate() {
            for i in 0..6 {
                for j in 0..6 {
                    rec[(i, j)] += l * vecs[(k, i)] * vecs[(k, j)];
                }
            }
        }
        assert!(rec.max_abs_diff(&s) < 1e-10);
    }

    #[test]
    fn cholesky_solves() {
        let a = Matrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]).unwrap();
        let l = cholesky(&a).unwrap();
        let x = cholesky_solve(&l, &[2.0, 1.0]);
        let back = a.matvec(&x);
        assert!((back[0] - 2.0).abs() < 1e-12 && (back[1] - 1.0).abs() < 1e-12);
        let bad = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(cholesky(&bad), Err(Error::NotPositiveDefinite { .. })));
    }

    #[test]
    fn lift_of_zero_is_zero() {
        let w = Matrix::from_fn(2, 5, |i, j| (i + j) as f64 + if i == j { 1.0 } else { 0.0 });
        let out = pinv_lift(&w, &[0.0, 0.0]).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lift_with_orthonormal_rows_is_transpose() {
        let w = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let out = pinv_lift(&w, &[2.0, -3.0]).unwrap();
        assert_eq!(out, vec![2.0, 0.0, -3.0]);
    }

    #[test]
    fn rank_deficient_lift_names_eigenvalue() {
        let w = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![2.0, 4.0, 6.0]]).unwrap();
        match pinv_lift(&w, &[1.0, 1.0]) {
            Err(Error::RankDeficient { smallest, .. }) => assert!(smallest.abs() < 1e-8),
            other => panic!("expected rank error, got {other:?}"),
        }
    }

    #[test]
    fn principal_angles_of_same_space_are_zero() {
        let a = Matrix::from_rows(&[vec![1.0, 1.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0]]).unwrap();
        let ang = principal_angles(&a, &b).unwrap();
        assert!(ang.iter().all(|&t| t < 1e-6));
        let c = Matrix::from_rows(&[vec![0.0, 0.0, 1.0]]).unwrap();
        let ang = principal_angles(&a, &c).unwrap();
        assert!((ang[0] - std::f64::consts::FRAC_PI_2).abs() < 1e-6);
    }
}
