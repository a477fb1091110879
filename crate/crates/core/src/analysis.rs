//! Binding-subspace analyses over traced activations.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::LabelRaster;
use crate::par;
use crate::probes::{ProbeFamily, ProbeWeights};
use crate::rng;
use crate::tensor::{
    gaussian_kde, norm, pca_topk, permutation_test, principal_angles, softmax, AdamConfig, AdamState,
    EigenResult, Lifter, Matrix,
};
use crate::vit::LayerTrace;

/// `b = Wh` per patch and the feature remainder `f = h − lift(b)`.
#[derive(Debug, Clone)]
pub struct BindingDecomposition {
    pub layer: usize,
    /// `N×k`.
    pub binding: Matrix,
    /// `N×d`.
    pub feature: Matrix,
}

impl BindingDecomposition {
    /// Largest `|W f|` entry: zero up to rounding when the lift is exact.
    pub fn residual_in_subspace(&self, w: &Matrix) -> f64 {
        self.feature.matmul_t(w).data().iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

pub(crate) fn projection_matrix(probe: &ProbeWeights) -> Result<&Matrix> {
    match probe.family {
        ProbeFamily::Quad | ProbeFamily::CrossLayer => Ok(&probe.w),
        other => Err(Error::WrongFamily {
            expected: "quad".into(),
            found: other.to_string(),
        }),
    }
}

/// Split patch activations of `layer` into binding and feature parts.
pub fn project_binding(h: &Matrix, probe: &ProbeWeights, layer: usize) -> Result<BindingDecomposition> {
    probe.expect_layer(layer)?;
    let w = projection_matrix(probe)?;
    if h.cols() != w.cols() {
        return Err(Error::shape("project_binding", &[w.cols()], &[h.cols()]));
    }
    let lifter = Lifter::new(w)?;
    let binding = h.matmul_t(w);
    let feature = h.sub(&lifter.lift_rows(&binding)?);
    Ok(BindingDecomposition {
        layer,
        binding,
        feature,
    })
}

pub fn project_binding_trace(trace: &LayerTrace, probe: &ProbeWeights, layer: usize) -> Result<BindingDecomposition> {
    project_binding(&trace.patch_matrix(layer)?, probe, layer)
}

/// Principal angles in degrees between `span(Wᵀ)` and a reference subspace.
pub fn subspace_angles_deg(w: &Matrix, reference: &Matrix) -> Result<Vec<f64>> {
    Ok(principal_angles(w, reference)?.into_iter().map(f64::to_degrees).collect())
}

/// PCA of aligned residual deltas with a separability check.
#[derive(Debug, Clone, Serialize)]
pub struct DeltaPca {
    pub pca: EigenResult,
    /// Per-delta coordinates in the top components (`samples×k`).
    #[serde(skip)]
    pub coords: Matrix,
    /// Copy index `c ≥ 1` of `Δ_c = h(copy c) − h(copy 0)` per sample.
    pub labels: Vec<usize>,
    /// One-vs-rest linear classifier accuracy on `coords`.
    pub separability: f64,
    /// Mean delta norm per copy pair.
    pub mean_delta_norm: Vec<f64>,
}

/// Pool `h(copy c)ᵢ − h(copy 0)ᵢ` over aligned patches and copies `c ≥ 1`.
pub fn residual_delta_pca(h: &Matrix, copies: &[Vec<usize>], k: usize) -> Result<DeltaPca> {
    if copies.len() < 2 {
        return Err(Error::InvalidArgument("need at least two aligned copies".into()));
    }
    let m = copies[0].len();
    if m == 0 || copies.iter().any(|c| c.len() != m) {
        return Err(Error::InvalidArgument(format!(
            "copies are not grid-aligned: patch counts {:?}",
            copies.iter().map(Vec::len).collect::<Vec<_>>()
        )));
    }
    if let Some(&bad) = copies.iter().flatten().find(|&&i| i >= h.rows()) {
        return Err(Error::InvalidArgument(format!("patch {bad} out of range")));
    }
    let d = h.cols();
    let mut data = Vec::with_capacity((copies.len() - 1) * m * d);
    let mut labels = Vec::new();
    let mut mean_delta_norm = Vec::new();
    for (c, copy) in copies.iter().enumerate().skip(1) {
        let mut acc = 0.0;
        for (&i, &a) in copy.iter().zip(&copies[0]) {
            let delta: Vec<f64> = h.row(i).iter().zip(h.row(a)).map(|(x, y)| x - y).collect();
            acc += norm(&delta);
            data.extend(delta);
            labels.push(c);
        }
        mean_delta_norm.push(acc / m as f64);
    }
    let deltas = Matrix::from_vec(labels.len(), d, data)?;
    let k = k.min(deltas.rows()).min(d);
    let pca = pca_topk(&deltas, k)?;
    let coords = pca.project(&deltas);
    let separability = one_vs_rest_accuracy(&coords, &labels)?;
    Ok(DeltaPca {
        pca,
        coords,
        labels,
        separability,
        mean_delta_norm,
    })
}

/// Training accuracy of a softmax-linear classifier on standardised inputs.
pub fn one_vs_rest_accuracy(x: &Matrix, labels: &[usize]) -> Result<f64> {
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() <= 1 {
        return Ok(1.0);
    }
    let (n, d) = (x.rows(), x.cols());
    let mean = x.column_means();
    let scale: Vec<f64> = (0..d)
        .map(|j| {
            let v = (0..n).map(|i| (x[(i, j)] - mean[j]).powi(2)).sum::<f64>() / n as f64;
            if v > 0.0 {
                1.0 / v.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let z = Matrix::from_fn(n, d, |i, j| (x[(i, j)] - mean[j]) * scale[j]);
    let y: Vec<usize> = labels.iter().map(|l| classes.binary_search(l).expect("present")).collect();
    let c = classes.len();
    let mut params = vec![0.0; c * (d + 1)];
    let mut adam = AdamState::new(
        params.len(),
        AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        },
    )?;
    let predict = |params: &[f64], i: usize| -> Vec<f64> {
        (0..c)
            .map(|k| {
                let w = &params[k * (d + 1)..(k + 1) * (d + 1)];
                w[d] + (0..d).map(|j| w[j] * z[(i, j)]).sum::<f64>()
            })
            .collect()
    };
    let accuracy = |params: &[f64]| {
        let hits = (0..n)
            .filter(|&i| {
                let s = predict(params, i);
                let arg = (0..c).fold(0, |a, k| if s[k] > s[a] { k } else { a });
                arg == y[i]
            })
            .count();
        hits as f64 / n as f64
    };
    for _ in 0..500 {
        let mut grad = vec![0.0; params.len()];
        for i in 0..n {
            let p = softmax(&predict(&params, i));
            for k in 0..c {
                let g = p[k] - if y[i] == k { 1.0 } else { 0.0 };
                let off = k * (d + 1);
                for j in 0..d {
                    grad[off + j] += g * z[(i, j)] / n as f64;
                }
                grad[off + d] += g / n as f64;
            }
        }
        adam.step(&mut params, &grad)?;
        if accuracy(&params) == 1.0 {
            break;
        }
    }
    Ok(accuracy(&params))
}

/// `side×side` grid of `score(reference, j)`.
pub fn score_map(h: &Matrix, probe: &ProbeWeights, reference: usize, side: usize) -> Result<Matrix> {
    if h.rows() != side * side {
        return Err(Error::shape("score_map activations", &[side * side], &[h.rows()]));
    }
    if reference >= h.rows() {
        return Err(Error::InvalidArgument(format!("reference patch {reference} out of range")));
    }
    let s = probe.score_matrix(&h.select_rows(&[reference]), h)?;
    Matrix::from_vec(side, side, s.into_data())
}

/// Mean in-object score minus mean out-of-object score on a score map.
pub fn in_out_contrast(map: &Matrix, raster: &LabelRaster, reference: usize) -> Result<f64> {
    let inst = raster.instance[reference];
    let (mut sin, mut nin, mut sout, mut nout) = (0.0, 0usize, 0.0, 0usize);
    for (j, &v) in map.data().iter().enumerate() {
        if j == reference || raster.instance[j] == crate::io::IGNORE_ID {
            continue;
        }
        if raster.instance[j] == inst {
            sin += v;
            nin += 1;
        } else {
            sout += v;
            nout += 1;
        }
    }
    if nin == 0 || nout == 0 {
        return Err(Error::InvalidArgument("reference object needs both in- and out-of-object patches".into()));
    }
    Ok(sin / nin as f64 - sout / nout as f64)
}

/// Mean score over all patch pairs between instances `a` and `b`.
pub fn cross_instance_mean(h: &Matrix, probe: &ProbeWeights, raster: &LabelRaster, a: i32, b: i32) -> Result<f64> {
    let groups = raster.instance_patches();
    let pa = groups.get(&a).ok_or_else(|| Error::Labels(format!("instance {a} not present")))?;
    let pb = groups.get(&b).ok_or_else(|| Error::Labels(format!("instance {b} not present")))?;
    let s = probe.score_matrix(&h.select_rows(pa), &h.select_rows(pb))?;
    Ok(s.data().iter().sum::<f64>() / s.data().len() as f64)
}

/// Scores of same-object pairs per instance and of cross pairs per instance pair.
pub fn pair_score_groups(h: &Matrix, probe: &ProbeWeights, raster: &LabelRaster) -> Result<Vec<(String, Vec<f64>)>> {
    let groups: Vec<(i32, Vec<usize>)> = raster.instance_patches().into_iter().collect();
    let mut out = Vec::new();
    for (gi, (a, pa)) in groups.iter().enumerate() {
        let xa = h.select_rows(pa);
        let s = probe.score_matrix(&xa, &xa)?;
        let within: Vec<f64> = (0..pa.len()).flat_map(|i| (i + 1..pa.len()).map(move |j| (i, j))).map(|(i, j)| s[(i, j)]).collect();
        out.push((format!("instance {a}"), within));
        for (b, pb) in &groups[gi + 1..] {
            let s = probe.score_matrix(&xa, &h.select_rows(pb))?;
            out.push((format!("instance {a} - instance {b}"), s.into_data()));
        }
    }
    Ok(out)
}

pub const KDE_GRID_POINTS: usize = 256;

#[derive(Debug, Clone, Serialize)]
pub struct KdeCurve {
    pub group: String,
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
    pub n: usize,
    /// Fewer than two scores or zero spread.
    pub flagged: bool,
}

impl KdeCurve {
    /// Probability mass above `t` by trapezoid integration on the grid.
    pub fn mass_above(&self, t: f64) -> f64 {
        let mut m = 0.0;
        for w in 1..self.grid.len() {
            if self.grid[w - 1] >= t {
                m += 0.5 * (self.density[w] + self.density[w - 1]) * (self.grid[w] - self.grid[w - 1]);
            }
        }
        m
    }

    pub fn mode(&self) -> f64 {
        let i = (0..self.density.len()).fold(0, |a, i| if self.density[i] > self.density[a] { i } else { a });
        self.grid[i]
    }
}

pub fn unit_grid(points: usize) -> Vec<f64> {
    (0..points).map(|i| i as f64 / (points - 1) as f64).collect()
}

/// Gaussian KDE per score group over a 256-point grid on `[0, 1]`.
pub fn same_diff_kde(groups: &[(String, Vec<f64>)]) -> Result<Vec<KdeCurve>> {
    let grid = unit_grid(KDE_GRID_POINTS);
    groups
        .iter()
        .filter(|(_, s)| !s.is_empty())
        .map(|(name, s)| {
            let k = gaussian_kde(s, &grid)?;
            Ok(KdeCurve {
                group: name.clone(),
                grid: grid.clone(),
                density: k.density,
                bandwidth: k.bandwidth,
                n: s.len(),
                flagged: s.len() < 2 || k.degenerate,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct CorrelationResult {
    /// Layer of the scores; attention comes from the block reading it.
    pub layer: usize,
    pub r: f64,
    pub p_value: f64,
    pub n_pairs: usize,
    pub n_perm: usize,
    /// Euclidean grid distance of each pair, in pair order.
    #[serde(skip)]
    pub distances: Vec<f64>,
}

/// Pearson correlation between attention and probe scores over all
/// off-diagonal patch pairs, with a permutation p-value.
pub fn correlate_attention(
    attention: &Matrix,
    scores: &Matrix,
    side: usize,
    layer: usize,
    n_perm: usize,
    seed: u64,
) -> Result<CorrelationResult> {
    let n = side * side;
    for (name, m) in [("attention", attention), ("scores", scores)] {
        if m.rows() != n || m.cols() != n {
            return Err(Error::shape(name, &[n, n], &[m.rows(), m.cols()]));
        }
    }
    let mut a = Vec::with_capacity(n * (n - 1));
    let mut b = Vec::with_capacity(n * (n - 1));
    let mut distances = Vec::with_capacity(n * (n - 1));
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            a.push(attention[(i, j)]);
            b.push(scores[(i, j)]);
            let (ri, ci) = ((i / side) as f64, (i % side) as f64);
            let (rj, cj) = ((j / side) as f64, (j % side) as f64);
            distances.push(((ri - rj).powi(2) + (ci - cj).powi(2)).sqrt());
        }
    }
    let t = permutation_test(&a, &b, n_perm, seed)?;
    Ok(CorrelationResult {
        layer,
        r: t.r,
        p_value: t.p_value,
        n_pairs: a.len(),
        n_perm,
        distances,
    })
}

/// Head-mean attention of the block reading `h^(layer)` against probe
/// scores on `h^(layer)`.
pub fn attention_binding_correlation(
    trace: &LayerTrace,
    probe: &ProbeWeights,
    layer: usize,
    n_perm: usize,
    seed: u64,
) -> Result<CorrelationResult> {
    probe.expect_layer(layer)?;
    let h = trace.patch_matrix(layer)?;
    let scores = probe.score_matrix(&h, &h)?;
    let attention = trace.patch_attention(layer)?;
    correlate_attention(&attention, &scores, trace.grid_side, layer, n_perm, seed)
}

/// Per-layer score maps, computed in parallel.
pub fn score_maps(trace: &LayerTrace, probes: &[ProbeWeights], reference: usize) -> Result<Vec<Matrix>> {
    par::map_slice(probes, |p| score_map(&trace.patch_matrix(p.layer)?, p, reference, trace.grid_side))
        .into_iter()
        .collect()
}

/// Deterministic seed for an analysis stage.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    rng::derive_named(seed, stage)
}
