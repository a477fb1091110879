use serde::Serialize;

use super::linalg::{jacobi_eigen, orthonormalize_rows};
use super::{dot, Matrix};
use crate::error::{Error, Result};

/// Top-k principal components of a sample matrix.
#[derive(Debug, Clone, Serialize)]
pub struct EigenResult {
    /// `k×d`, orthonormal rows.
    #[serde(skip)]
    pub components: Matrix,
    /// Descending, non-negative.
    pub explained_variance: Vec<f64>,
    pub explained_ratio: Vec<f64>,
    /// Column means removed before decomposition.
    pub mean: Vec<f64>,
}

impl EigenResult {
    /// Coordinates of `samples` in the component basis (`n×k`).
    pub fn project(&self, samples: &Matrix) -> Matrix {
        let mut centered = samples.clone();
        for i in 0..centered.rows() {
            for (v, m) in centered.row_mut(i).iter_mut().zip(&self.mean) {
                *v -= m;
            }
        }
        centered.matmul_t(&self.components)
    }
}

/// Principal component analysis via the symmetric Jacobi eigensolver.
///
/// Works on the `d×d` covariance when `d <= n` and on the `n×n` Gram
/// matrix otherwise; both give the same spectrum. Each component is signed
/// so that its largest-magnitude entry is positive.
pub fn pca_topk(samples: &Matrix, k: usize) -> Result<EigenResult> {
    let (n, d) = (samples.rows(), samples.cols());
    if n < 2 {
        return Err(Error::InvalidArgument(format!("pca needs at least 2 samples, got {n}")));
    }
    if k == 0 || k > n.min(d) {
        return Err(Error::InvalidArgument(format!(
            "pca rank k={k} must lie in 1..={}",
            n.min(d)
        )));
    }
    if !samples.is_finite() {
        return Err(Error::NonFinite("pca samples".into()));
    }
    let mean = samples.column_means();
    let centered = Matrix::from_fn(n, d, |i, j| samples[(i, j)] - mean[j]);
    let denom = (n - 1) as f64;
    let total: f64 = centered.data().iter().map(|v| v * v).sum::<f64>() / denom;

    let (values, mut components) = if d <= n {
        let cov = centered.t_matmul(&centered).scale(1.0 / denom);
        let (vals, vecs) = jacobi_eigen(&cov)?;
        let top = Matrix::from_fn(k, d, |i, j| vecs[(i, j)]);
        (vals[..k].to_vec(), top)
    } else {
        let gram = centered.matmul_t(&centered).scale(1.0 / denom);
        let (vals, vecs) = jacobi_eigen(&gram)?;
        let tol = vals[0].abs().max(f64::MIN_POSITIVE) * 1e-12;
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(k);
        for i in 0..k {
            if vals[i] <= tol {
                break;
            }
            let u = vecs.row(i);
            let v = centered.t_matvec(u);
            let nv = dot(&v, &v).sqrt();
            rows.push(v.iter().map(|x| x / nv).collect());
        }
        let found = rows.len();
        let mut comps = complete_basis(rows, d, k);
        if found < k {
            comps = orthonormalize_rows(&comps);
        }
        (vals[..k].to_vec(), comps)
    };

    for i in 0..k {
        let row = components.row_mut(i);
        let mut arg = 0;
        for j in 1..row.len() {
            if row[j].abs() > row[arg].abs() {
                arg = j;
            }
        }
        if row[arg] < 0.0 {
            row.iter_mut().for_each(|v| *v = -*v);
        }
    }

    let explained_variance: Vec<f64> = values.iter().map(|&v| v.max(0.0)).collect();
    let explained_ratio = explained_variance
        .iter()
        .map(|&v| if total > 0.0 { v / total } else { 0.0 })
        .collect();
    Ok(EigenResult {
        components,
        explained_variance,
        explained_ratio,
        mean,
    })
}

/// Extend `rows` with standard basis vectors until it spans `k` orthonormal directions.
fn complete_basis(mut rows: Vec<Vec<f64>>, d: usize, k: usize) -> Matrix {
    let mut e = 0;
    while rows.len() < k && e < d {
        let mut cand = vec![0.0; d];
        cand[e] = 1.0;
        rows.push(cand);
        let m = Matrix::from_vec(rows.len(), d, rows.concat()).expect("row shape");
        let q = orthonormalize_rows(&m);
        rows = (0..q.rows()).map(|i| q.row(i).to_vec()).collect();
        e += 1;
    }
    Matrix::from_vec(rows.len(), d, rows.concat()).expect("row shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_one_data() {
        let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![2.0, 0.0], vec![3.0, 0.0]]).unwrap();
        let r = pca_topk(&x, 1).unwrap();
        assert!((r.components[(0, 0)] - 1.0).abs() < 1e-12);
        assert!(r.components[(0, 1)].abs() < 1e-12);
        assert!((r.explained_ratio[0] - 1.0).abs() < 1e-12);
        assert!((r.explained_variance[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_rows_give_zero_variance() {
        let x = Matrix::from_rows(&vec![vec![0.5, -1.0, 2.0]; 4]).unwrap();
        let r = pca_topk(&x, 1).unwrap();
        assert_eq!(r.explained_variance, vec![0.0]);
        assert!((dot(r.components.row(0), r.components.row(0)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wide_data_uses_gram_route() {
        // 4 samples in 10 dimensions; compare to the covariance route on a
        // zero-padded tall copy with the same spectrum.
        let x = Matrix::from_fn(4, 10, |i, j| ((i * 13 + j * 7) % 9) as f64 - 4.0);
        let r = pca_topk(&x, 3).unwrap();
        let q = r.components.matmul_t(&r.components);
        assert!(q.max_abs_diff(&Matrix::identity(3)) < 1e-9);
        let cov = {
            let mean = x.column_means();
            let c = Matrix::from_fn(4, 10, |i, j| x[(i, j)] - mean[j]);
            c.t_matmul(&c).scale(1.0 / 3.0)
        };
        for i in 0..3 {
            let v = r.components.row(i);
            let cv = cov.matvec(v);
            let lambda = dot(v, &cv);
            assert!((lambda - r.explained_variance[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn rejects_bad_rank() {
        let x = Matrix::zeros(3, 2);
        assert!(pca_topk(&x, 0).is_err());
        assert!(pca_topk(&x, 3).is_err());
        assert!(pca_topk(&Matrix::zeros(1, 2), 1).is_err());
    }
}
