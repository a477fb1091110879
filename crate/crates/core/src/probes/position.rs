use rand::seq::{index, SliceRandom};
use serde::Serialize;

use super::{ProbeFamily, ProbeWeights};
use crate::error::{Error, Result};
use crate::rng;
use crate::supervision::split_images;
use crate::tensor::{cholesky, cholesky_solve, Matrix};

pub const POSITION_RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct PositionProbe {
    #[serde(skip)]
    pub weights: ProbeWeights,
    /// Root of the mean squared error over both axes.
    pub rmse: f64,
    /// `[x, y]` per-axis RMSE.
    pub rmse_axes: [f64; 2],
    pub n_train: usize,
    pub n_test: usize,
}

/// Normalised patch-centre coordinates `((col + ½)/side, (row + ½)/side)`.
pub fn patch_coords(patch: usize, side: usize) -> [f64; 2] {
    let (r, c) = (patch / side, patch % side);
    [(c as f64 + 0.5) / side as f64, (r as f64 + 0.5) / side as f64]
}

/// Ridge regression of coordinates on activations, held-out by group.
pub fn fit_position(
    x: &Matrix,
    coords: &Matrix,
    groups: &[usize],
    layer: usize,
    held_out_fraction: f64,
    seed: u64,
) -> Result<PositionProbe> {
    let (n, d) = (x.rows(), x.cols());
    if coords.rows() != n || coords.cols() != 2 || groups.len() != n {
        return Err(Error::shape("position probe inputs", &[n, 2], &[coords.rows(), coords.cols()]));
    }
    let (_, test_groups) = split_images(groups, held_out_fraction, seed);
    let is_test = |i: usize| test_groups.binary_search(&groups[i]).is_ok();
    let train: Vec<usize> = (0..n).filter(|&i| !is_test(i)).collect();
    let test: Vec<usize> = (0..n).filter(|&i| is_test(i)).collect();
    if train.is_empty() || test.is_empty() {
        return Err(Error::InvalidArgument("position probe needs at least two groups".into()));
    }
    let da = d + 1;
    let mut a = Matrix::zeros(da, da);
    let mut rhs = [vec![0.0; da], vec![0.0; da]];
    let mut z = vec![1.0; da];
    for &i in &train {
        z[..d].copy_from_slice(x.row(i));
        for r in 0..da {
            let zr = z[r];
            if zr == 0.0 {
                continue;
            }
            for (v, &zc) in a.row_mut(r).iter_mut().zip(&z) {
                *v += zr * zc;
            }
            rhs[0][r] += zr * coords[(i, 0)];
            rhs[1][r] += zr * coords[(i, 1)];
        }
    }
    for r in 0..da {
        a.row_mut(r)[r] += POSITION_RIDGE;
    }
    let l = cholesky(&a)?;
    let beta = [cholesky_solve(&l, &rhs[0]), cholesky_solve(&l, &rhs[1])];
    let w = Matrix::from_fn(2, d, |ax, j| beta[ax][j]);
    let bias = vec![beta[0][d], beta[1][d]];
    let mut se = [0.0; 2];
    for &i in &test {
        for ax in 0..2 {
            let pred: f64 = x.row(i).iter().zip(w.row(ax)).map(|(a, b)| a * b).sum::<f64>() + bias[ax];
            se[ax] += (pred - coords[(i, ax)]).powi(2);
        }
    }
    let nt = test.len() as f64;
    let rmse_axes = [(se[0] / nt).sqrt(), (se[1] / nt).sqrt()];
    Ok(PositionProbe {
        weights: ProbeWeights {
            family: ProbeFamily::Position,
            layer,
            layer2: None,
            w,
            w2: None,
            bias,
            labels: Vec::new(),
        },
        rmse: ((se[0] + se[1]) / (2.0 * nt)).sqrt(),
        rmse_axes,
        n_train: train.len(),
        n_test: test.len(),
    })
}

/// Position probe over per-image patch activations `[side², d]`.
///
/// `per_image` subsamples patches (seeded); `shuffle_coords` permutes the
/// activation/coordinate pairing within each image as a control.
pub fn train_position_probe(
    images: &[Matrix],
    grid_side: usize,
    layer: usize,
    per_image: Option<usize>,
    shuffle_coords: bool,
    held_out_fraction: f64,
    seed: u64,
) -> Result<PositionProbe> {
    let n = grid_side * grid_side;
    let d = images.first().map_or(0, |m| m.cols());
    let mut rows = Vec::new();
    let mut coords = Vec::new();
    let mut groups = Vec::new();
    for (g, m) in images.iter().enumerate() {
        if m.rows() != n || m.cols() != d {
            return Err(Error::shape("position probe activations", &[n, d], &[m.rows(), m.cols()]));
        }
        let mut r = rng::rng(rng::derive(seed, g as u64));
        let mut picked: Vec<usize> = match per_image {
            Some(k) if k < n => index::sample(&mut r, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        picked.sort_unstable();
        let mut targets = picked.clone();
        if shuffle_coords {
            targets.shuffle(&mut r);
        }
        for (&p, &t) in picked.iter().zip(&targets) {
            rows.extend_from_slice(m.row(p));
            coords.extend_from_slice(&patch_coords(t, grid_side));
            groups.push(g);
        }
    }
    let x = Matrix::from_vec(groups.len(), d, rows)?;
    let c = Matrix::from_vec(groups.len(), 2, coords)?;
    fit_position(&x, &c, &groups, layer, held_out_fraction, rng::derive_named(seed, "position-split"))
}
