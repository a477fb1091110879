//! Minimum-cost assignment (Hungarian algorithm, shortest augmenting path
//! with potentials, O(n²m)).

use super::Matrix;
use crate::error::{Error, Result};

/// Cost given to padding columns when a matrix has more rows than columns.
/// Real costs must stay far below this value.
pub const PAD_SENTINEL: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// Column chosen for each row; `None` for rows that landed on padding.
    pub row_to_col: Vec<Option<usize>>,
    /// Sum of the real (unpadded) costs of the chosen cells.
    pub total_cost: f64,
}

impl Assignment {
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.row_to_col
            .iter()
            .enumerate()
            .filter_map(|(r, c)| c.map(|c| (r, c)))
    }
}

/// One-to-one row→column assignment of minimal total cost.
///
/// When rows outnumber columns the matrix is padded with [`PAD_SENTINEL`]
/// columns and the rows matched to padding come back as `None`. Among
/// equally cheap augmenting choices the column scan prefers the lowest index.
pub fn hungarian_assign(cost: &Matrix) -> Result<Assignment> {
    let (n, m) = (cost.rows(), cost.cols());
    if n == 0 || m == 0 {
        return Ok(Assignment {
            row_to_col: vec![None; n],
            total_cost: 0.0,
        });
    }
    if !cost.is_finite() {
        return Err(Error::NonFinite("assignment cost matrix".into()));
    }
    let width = m.max(n);
    let at = |i: usize, j: usize| if j < m { cost[(i, j)] } else { PAD_SENTINEL };

    // 1-based potentials; column 0 is the virtual start.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; width + 1];
    let mut owner = vec![0usize; width + 1];
    let mut way = vec![0usize; width + 1];

    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; width + 1];
        let mut used = vec![false; width + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=width {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=width {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_to_col = vec![None; n];
    let mut total = 0.0;
    for j in 1..=width {
        if owner[j] > 0 && j - 1 < m {
            row_to_col[owner[j] - 1] = Some(j - 1);
            total += cost[(owner[j] - 1, j - 1)];
        }
    }
    Ok(Assignment {
        row_to_col,
        total_cost: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two() {
        let c = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 1.0]]).unwrap();
        let a = hungarian_assign(&c).unwrap();
        assert_eq!(a.row_to_col, vec![Some(0), Some(1)]);
        assert_eq!(a.total_cost, 2.0);
    }

    #[test]
    fn identity_favouring() {
        let c = Matrix::from_fn(5, 5, |i, j| if i == j { 0.0 } else { 1.0 });
        let a = hungarian_assign(&c).unwrap();
        assert_eq!(a.row_to_col, (0..5).map(Some).collect::<Vec<_>>());
        assert_eq!(a.total_cost, 0.0);
    }

    #[test]
    fn empty_matrix() {
        let a = hungarian_assign(&Matrix::zeros(0, 0)).unwrap();
        assert!(a.row_to_col.is_empty());
        assert_eq!(a.total_cost, 0.0);
    }

    #[test]
    fn more_rows_than_columns_pads() {
        let c = Matrix::from_rows(&[vec![5.0], vec![1.0], vec![3.0]]).unwrap();
        let a = hungarian_assign(&c).unwrap();
        assert_eq!(a.row_to_col, vec![None, Some(0), None]);
        assert_eq!(a.total_cost, 1.0);
    }

    #[test]
    fn wide_matrix() {
        let c = Matrix::from_rows(&[vec![4.0, 1.0, 3.0, 9.0], vec![2.0, 0.0, 5.0, 9.0]]).unwrap();
        let a = hungarian_assign(&c).unwrap();
        assert_eq!(a.total_cost, 3.0);
        assert_eq!(a.row_to_col, vec![Some(1), Some(0)]);
    }

    #[test]
    fn rejects_nan() {
        let c = Matrix::from_rows(&[vec![f64::NAN]]).unwrap();
        assert!(hungarian_assign(&c).is_err());
    }
}
