use std::collections::BTreeMap;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ProbeFamily, ProbeWeights};
use crate::error::{Error, Result};
use crate::par;
use crate::rng;
use crate::supervision::{split_images, PairBatch};
use crate::tensor::{log_sigmoid, sigmoid, AdamConfig, AdamState, Matrix, StepSchedule};

const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRecipe {
    pub lr: f64,
    pub epochs: usize,
    /// Pair batches (one per image) per optimizer step.
    pub batch_size: usize,
    pub step_size: usize,
    pub gamma: f64,
    pub seed: u64,
    /// Rank of quadratic and cross-layer probes.
    pub k: usize,
    /// Output count of class probes; inferred from labels when unset.
    pub num_classes: Option<usize>,
    pub held_out_fraction: f64,
    /// Initial weights are `N(0, init_scale² / d)`.
    pub init_scale: f64,
}

impl Default for TrainRecipe {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 16,
            batch_size: 256,
            step_size: 8,
            gamma: 0.2,
            seed: 0,
            k: 64,
            num_classes: None,
            held_out_fraction: 0.1,
            init_scale: 1.0,
        }
    }
}

impl TrainRecipe {
    /// Schedule sized for the synthetic generator: few pairs, so small batches and a faster rate.
    pub fn synthetic(seed: u64) -> Self {
        Self { lr: 0.02, epochs: 32, batch_size: 8, step_size: 11, gamma: 0.5, seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.epochs == 0 || self.batch_size == 0 || self.k == 0 || self.step_size == 0 {
            return Err(Error::Config(format!("training recipe needs positive values: {self:?}")));
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..1.0).contains(&self.held_out_fraction) {
            return Err(Error::Config("gamma must lie in [0, 1] and held-out fraction in [0, 1)".into()));
        }
        if self.num_classes == Some(0) || !(self.init_scale >= 0.0) {
            return Err(Error::Config("class count and init scale must be positive".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            schedule: StepSchedule {
                step_size: self.step_size,
                gamma: self.gamma,
            },
            ..AdamConfig::default()
        }
    }
}

/// Which pairs of a batch are supervised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairSet {
    /// `i < j`.
    UpperTriangle,
    /// `i ≠ j`, both orders; used for asymmetric probes.
    OffDiagonal,
}

impl PairSet {
    fn contains(self, i: usize, j: usize) -> bool {
        match self {
            PairSet::UpperTriangle => i < j,
            PairSet::OffDiagonal => i != j,
        }
    }

    pub fn for_family(f: ProbeFamily) -> Self {
        if f == ProbeFamily::CrossLayer {
            PairSet::OffDiagonal
        } else {
            PairSet::UpperTriangle
        }
    }
}

/// Activations of the sampled patches, aligned with a batch list.
#[derive(Debug, Clone)]
pub struct PairActs {
    pub layer: usize,
    pub layer2: Option<usize>,
    pub x: Vec<Matrix>,
    pub y: Option<Vec<Matrix>>,
}

fn gather_rows(batches: &[PairBatch], images: &[Matrix]) -> Result<Vec<Matrix>> {
    batches
        .iter()
        .map(|b| {
            let m = images
                .get(b.image)
                .ok_or_else(|| Error::InvalidArgument(format!("no activations for image {}", b.image)))?;
            if let Some(&bad) = b.indices.iter().find(|&&i| i >= m.rows()) {
                return Err(Error::InvalidArgument(format!(
                    "patch {bad} of `{}` exceeds the {} activation rows",
                    b.image_id,
                    m.rows()
                )));
            }
            Ok(m.select_rows(&b.indices))
        })
        .collect()
}

impl PairActs {
    /// Pick each batch's patch rows from per-image activations.
    pub fn gather(layer: usize, batches: &[PairBatch], images: &[Matrix]) -> Result<Self> {
        Ok(Self {
            layer,
            layer2: None,
            x: gather_rows(batches, images)?,
            y: None,
        })
    }

    pub fn gather_cross(
        layer: usize,
        layer2: usize,
        batches: &[PairBatch],
        images: &[Matrix],
        images2: &[Matrix],
    ) -> Result<Self> {
        Ok(Self {
            layer,
            layer2: Some(layer2),
            x: gather_rows(batches, images)?,
            y: Some(gather_rows(batches, images2)?),
        })
    }

    fn second(&self, b: usize) -> &Matrix {
        self.y.as_ref().map_or(&self.x[b], |y| &y[b])
    }

    fn dim(&self) -> usize {
        self.x.first().map_or(0, |m| m.cols())
    }
}

/// Summed binary cross-entropy over the supervised pairs of one batch and
/// its gradient in [`ProbeWeights`] parameter order (`W`, `W₂`, bias).
pub fn pair_loss_and_grad(p: &ProbeWeights, x: &Matrix, y: &Matrix, same: &[bool], set: PairSet) -> (f64, Vec<f64>) {
    let n = x.rows();
    let d = x.cols();
    let mut loss = 0.0;
    let target = |i: usize, j: usize| same[i * n + j];
    if p.family.is_class() {
        let pm = p.class_probabilities(x);
        let qm = p.class_probabilities(y);
        let s = pm.matmul_t(&qm);
        let mut e = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if !set.contains(i, j) {
                    continue;
                }
                let raw = s[(i, j)];
                let sc = raw.clamp(PROB_EPS, 1.0 - PROB_EPS);
                let t = target(i, j);
                loss -= if t { sc.ln() } else { (1.0 - sc).ln() };
                if raw == sc {
                    e.row_mut(i)[j] = if t { -1.0 / sc } else { 1.0 / (1.0 - sc) };
                }
            }
        }
        let softmax_back = |probs: &Matrix, g: &Matrix| {
            Matrix::from_fn(probs.rows(), probs.cols(), |i, c| {
                let pg: f64 = (0..probs.cols()).map(|k| probs[(i, k)] * g[(i, k)]).sum();
                probs[(i, c)] * (g[(i, c)] - pg)
            })
        };
        let dax = softmax_back(&pm, &e.matmul(&qm));
        let day = softmax_back(&qm, &e.t_matmul(&pm));
        let gw = dax.t_matmul(x).add(&day.t_matmul(y));
        let mut grad = gw.into_data();
        grad.extend(dax.column_sums().iter().zip(day.column_sums()).map(|(a, b)| a + b));
        return (loss, grad);
    }

    let b = p.bias[0];
    let (px, py) = match p.family {
        ProbeFamily::Quad => (x.matmul_t(&p.w), y.matmul_t(&p.w)),
        ProbeFamily::CrossLayer => (x.matmul_t(&p.w), y.matmul_t(p.w2.as_ref().expect("cross-layer W2"))),
        _ => (Matrix::zeros(0, 0), Matrix::zeros(0, 0)),
    };
    let z = match p.family {
        ProbeFamily::Linear => {
            let u = x.matvec(p.w.row(0));
            let v = y.matvec(p.w.row(0));
            Matrix::from_fn(n, n, |i, j| u[i] + v[j] + b)
        }
        ProbeFamily::Diag => {
            let xs = Matrix::from_fn(n, d, |i, m| x[(i, m)] * p.w[(0, m)]);
            xs.matmul_t(y).map(|v| v + b)
        }
        ProbeFamily::Quad | ProbeFamily::CrossLayer => px.matmul_t(&py).map(|v| v + b),
        _ => unreachable!("position probes have no pair loss"),
    };
    let mut g = Matrix::zeros(n, n);
    let mut gb = 0.0;
    for i in 0..n {
        for j in 0..n {
            if !set.contains(i, j) {
                continue;
            }
            let zij = z[(i, j)];
            let t = target(i, j);
            loss -= if t { log_sigmoid(zij) } else { log_sigmoid(-zij) };
            let gij = sigmoid(zij) - if t { 1.0 } else { 0.0 };
            g.row_mut(i)[j] = gij;
            gb += gij;
        }
    }
    let mut grad = match p.family {
        ProbeFamily::Linear => {
            let r = g.row_sums();
            let c = g.column_sums();
            let gw: Vec<f64> = x.t_matvec(&r).iter().zip(y.t_matvec(&c)).map(|(a, b)| a + b).collect();
            gw
        }
        ProbeFamily::Diag => {
            let gy = g.matmul(y);
            (0..d).map(|m| (0..n).map(|i| x[(i, m)] * gy[(i, m)]).sum()).collect()
        }
        ProbeFamily::Quad => g.matmul(&py).t_matmul(x).add(&g.t_matmul(&px).t_matmul(y)).into_data(),
        ProbeFamily::CrossLayer => {
            let mut v = g.matmul(&py).t_matmul(x).into_data();
            v.extend(g.t_matmul(&px).t_matmul(y).into_data());
            v
        }
        _ => unreachable!(),
    };
    grad.push(gb);
    (loss, grad)
}

/// Summed softmax cross-entropy of a class probe over labeled rows.
pub fn pointwise_loss_and_grad(p: &ProbeWeights, x: &Matrix, labels: &[usize]) -> (f64, Vec<f64>) {
    let probs = p.class_probabilities(x);
    let mut loss = 0.0;
    let mut da = probs.clone();
    for (i, &l) in labels.iter().enumerate() {
        loss -= probs[(i, l)].max(f64::MIN_POSITIVE).ln();
        da.row_mut(i)[l] -= 1.0;
    }
    let mut grad = da.t_matmul(x).into_data();
    grad.extend(da.column_sums());
    (loss, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub baseline: f64,
    /// Accuracy minus baseline, in percentage points.
    pub delta_pp: f64,
    pub n_pairs: usize,
    pub true_pos: usize,
    pub false_pos: usize,
    pub true_neg: usize,
    pub false_neg: usize,
}

impl Evaluation {
    fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        let n = tp + fp + tn + fn_;
        let (accuracy, baseline) = if n == 0 {
            (0.0, 0.0)
        } else {
            ((tp + tn) as f64 / n as f64, (tn + fp) as f64 / n as f64)
        };
        Self {
            accuracy,
            baseline,
            delta_pp: 100.0 * (accuracy - baseline),
            n_pairs: n,
            true_pos: tp,
            false_pos: fp,
            true_neg: tn,
            false_neg: fn_,
        }
    }
}

fn check_acts(p: &ProbeWeights, batches: &[PairBatch], acts: &PairActs) -> Result<()> {
    p.check_shapes()?;
    p.expect_layer(acts.layer)?;
    if p.family == ProbeFamily::CrossLayer {
        let l2 = p.layer2.expect("checked");
        if acts.layer2 != Some(l2) || acts.y.is_none() {
            return Err(Error::LayerMismatch {
                probe: l2,
                requested: acts.layer2.unwrap_or(acts.layer),
            });
        }
    }
    if acts.x.len() != batches.len() {
        return Err(Error::InvalidArgument(format!(
            "{} activation blocks for {} batches",
            acts.x.len(),
            batches.len()
        )));
    }
    if acts.dim() != p.dim() && !batches.is_empty() {
        return Err(Error::shape("probe input", &[p.dim()], &[acts.dim()]));
    }
    Ok(())
}

fn evaluate_subset(p: &ProbeWeights, batches: &[PairBatch], acts: &PairActs, idx: &[usize], threshold: f64) -> Result<Evaluation> {
    let set = PairSet::for_family(p.family);
    let counts = par::map_slice(idx, |&b| -> Result<[usize; 4]> {
        let s = p.score_matrix(&acts.x[b], acts.second(b))?;
        let batch = &batches[b];
        let n = batch.len();
        let mut c = [0usize; 4];
        for i in 0..n {
            for j in 0..n {
                if !set.contains(i, j) {
                    continue;
                }
                let pred = s[(i, j)] > threshold;
                let t = batch.same(i, j);
                c[match (pred, t) {
                    (true, true) => 0,
                    (true, false) => 1,
                    (false, false) => 2,
                    (false, true) => 3,
                }] += 1;
            }
        }
        Ok(c)
    });
    let mut tot = [0usize; 4];
    for c in counts {
        let c = c?;
        tot.iter_mut().zip(c).for_each(|(t, v)| *t += v);
    }
    Ok(Evaluation::from_counts(tot[0], tot[1], tot[2], tot[3]))
}

/// Accuracy and confusion counts of a pairwise probe at `threshold`.
pub fn evaluate_probe(p: &ProbeWeights, batches: &[PairBatch], acts: &PairActs, threshold: f64) -> Result<Evaluation> {
    check_acts(p, batches, acts)?;
    let idx: Vec<usize> = (0..batches.len()).collect();
    evaluate_subset(p, batches, acts, &idx, threshold)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: ProbeWeights,
    pub train_images: Vec<usize>,
    pub test_images: Vec<usize>,
    pub train: Evaluation,
    pub held_out: Evaluation,
    /// Held-out patch accuracy of pointwise class probes.
    pub patch_accuracy: Option<f64>,
    /// Mean training loss per epoch.
    pub loss_history: Vec<f64>,
}

fn init_weights(family: ProbeFamily, rows: usize, d: usize, recipe: &TrainRecipe, layer: usize, layer2: Option<usize>) -> ProbeWeights {
    let mut g = rng::rng(rng::derive_named(recipe.seed, family.name()));
    let std = recipe.init_scale / (d.max(1) as f64).sqrt();
    let mut gauss = |r: usize| match Normal::new(0.0, std) {
        Ok(dist) => Matrix::from_fn(r, d, |_, _| dist.sample(&mut g)),
        Err(_) => Matrix::zeros(r, d),
    };
    let w = gauss(rows);
    let w2 = (family == ProbeFamily::CrossLayer).then(|| gauss(rows));
    let nb = if family.is_class() { rows } else { 1 };
    ProbeWeights {
        family,
        layer,
        layer2,
        w,
        w2,
        bias: vec![0.0; nb],
        labels: Vec::new(),
    }
}

fn split_batches(batches: &[PairBatch], recipe: &TrainRecipe) -> (Vec<usize>, Vec<usize>, Vec<usize>, Vec<usize>) {
    let images: Vec<usize> = batches.iter().map(|b| b.image).collect();
    let (train_img, test_img) = split_images(&images, recipe.held_out_fraction, rng::derive_named(recipe.seed, "split"));
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, b) in batches.iter().enumerate() {
        if test_img.binary_search(&b.image).is_ok() {
            test.push(i);
        } else {
            train.push(i);
        }
    }
    (train, test, train_img, test_img)
}

/// Models whose parameters can be read and written as one flat vector.
pub trait FlatParams {
    fn flatten(&self) -> Vec<f64>;
    fn unflatten(&mut self, p: &[f64]);
}

impl FlatParams for ProbeWeights {
    fn flatten(&self) -> Vec<f64> {
        ProbeWeights::flatten(self)
    }

    fn unflatten(&mut self, p: &[f64]) {
        ProbeWeights::unflatten(self, p)
    }
}

/// Generic minibatch Adam loop over item indices. `loss_grad` returns the
/// summed loss, summed gradient and sample count of one item.
pub(crate) fn minibatch_adam<M, F>(model: &mut M, train: &[usize], recipe: &TrainRecipe, what: &str, loss_grad: F) -> Result<Vec<f64>>
where
    M: FlatParams + Sync,
    F: Fn(&M, usize) -> (f64, Vec<f64>, usize) + Sync + Send,
{
    let mut params = model.flatten();
    let mut adam = AdamState::new(params.len(), recipe.adam())?;
    let mut order = train.to_vec();
    let mut shuffle_rng = rng::rng(rng::derive_named(recipe.seed, "shuffle"));
    let mut history = Vec::with_capacity(recipe.epochs);
    let mut step = 0usize;
    for _ in 0..recipe.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut epoch_loss, mut epoch_count) = (0.0, 0usize);
        for chunk in order.chunks(recipe.batch_size) {
            let m: &M = model;
            let parts = par::map_slice(chunk, |&b| loss_grad(m, b));
            let mut grad = vec![0.0; params.len()];
            let (mut loss, mut count) = (0.0, 0usize);
            for (l, g, c) in parts {
                loss += l;
                count += c;
                grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
            step += 1;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("{what} loss is {loss} over {count} samples"),
                });
            }
            if count == 0 {
                continue;
            }
            let inv = 1.0 / count as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            adam.step(&mut params, &grad).map_err(|e| Error::Diverged {
                step,
                detail: e.to_string(),
            })?;
            model.unflatten(&params);
            epoch_loss += loss;
            epoch_count += count;
        }
        adam.end_epoch();
        history.push(if epoch_count == 0 { 0.0 } else { epoch_loss / epoch_count as f64 });
    }
    Ok(history)
}

fn optimize<F>(p: &mut ProbeWeights, train: &[usize], recipe: &TrainRecipe, loss_grad: F) -> Result<Vec<f64>>
where
    F: Fn(&ProbeWeights, usize) -> (f64, Vec<f64>, usize) + Sync + Send,
{
    let what = p.family.to_string();
    minibatch_adam(p, train, recipe, &what, loss_grad)
}

fn distinct_classes(batches: &[PairBatch], idx: &[usize]) -> Vec<i32> {
    let mut c: Vec<i32> = idx.iter().flat_map(|&b| batches[b].class.iter().copied()).collect();
    c.sort_unstable();
    c.dedup();
    c
}

/// Train a pairwise probe with binary cross-entropy on supervised pairs.
///
/// Images are split 90/10 (by default) into train and held-out sets; both
/// evaluations use threshold 0.5.
pub fn train_pair_probe(family: ProbeFamily, batches: &[PairBatch], acts: &PairActs, recipe: &TrainRecipe) -> Result<TrainOutcome> {
    recipe.validate()?;
    if family == ProbeFamily::Position {
        return Err(Error::WrongFamily {
            expected: "a pairwise family".into(),
            found: family.to_string(),
        });
    }
    if batches.is_empty() {
        return Err(Error::InvalidArgument("no pair batches to train on".into()));
    }
    if family == ProbeFamily::CrossLayer && acts.y.is_none() {
        return Err(Error::InvalidArgument("cross-layer probes need activations from two layers".into()));
    }
    let d = acts.dim();
    let (train, test, train_images, test_images) = split_batches(batches, recipe);
    let rows = match family {
        ProbeFamily::Linear | ProbeFamily::Diag => 1,
        ProbeFamily::Quad | ProbeFamily::CrossLayer => recipe.k,
        _ => recipe.num_classes.unwrap_or_else(|| distinct_classes(batches, &train).len().max(2)),
    };
    let layer2 = (family == ProbeFamily::CrossLayer).then(|| acts.layer2.unwrap_or(acts.layer));
    let mut p = init_weights(family, rows, d, recipe, acts.layer, layer2);
    check_acts(&p, batches, acts)?;
    if train.iter().all(|&b| batches[b].num_positive() == 0) {
        warn!("no positive pairs in the {family} training split; accuracy will equal the baseline");
    }
    let set = PairSet::for_family(family);
    let history = optimize(&mut p, &train, recipe, |w, b| {
        let batch = &batches[b];
        let (l, g) = pair_loss_and_grad(w, &acts.x[b], acts.second(b), &batch.same, set);
        let n = batch.len();
        let count = match set {
            PairSet::UpperTriangle => n * n.saturating_sub(1) / 2,
            PairSet::OffDiagonal => n * n.saturating_sub(1),
        };
        (l, g, count)
    })?;
    Ok(TrainOutcome {
        train: evaluate_subset(&p, batches, acts, &train, 0.5)?,
        held_out: evaluate_subset(&p, batches, acts, &test, 0.5)?,
        weights: p,
        train_images,
        test_images,
        patch_accuracy: None,
        loss_history: history,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    /// Semantic class ids.
    Class,
    /// Instance ids remapped per batch to `0..m`.
    Identity,
}

fn identity_labels(batch: &PairBatch) -> Vec<usize> {
    let mut ids = batch.instance.clone();
    ids.sort_unstable();
    ids.dedup();
    batch.instance.iter().map(|i| ids.binary_search(i).expect("present")).collect()
}

/// Train a class probe with per-patch softmax cross-entropy, then score
/// pairs with `p·q`.
pub fn train_pointwise_class_probe(batches: &[PairBatch], acts: &PairActs, recipe: &TrainRecipe, kind: LabelKind) -> Result<TrainOutcome> {
    recipe.validate()?;
    if batches.is_empty() {
        return Err(Error::InvalidArgument("no pair batches to train on".into()));
    }
    let d = acts.dim();
    let (train, test, train_images, test_images) = split_batches(batches, recipe);
    let (labels_of, n_classes, class_ids): (Box<dyn Fn(usize) -> Vec<Option<usize>> + Sync + Send>, usize, Vec<i32>) =
        match kind {
            LabelKind::Class => {
                let ids = distinct_classes(batches, &train);
                let map: BTreeMap<i32, usize> = ids.iter().enumerate().map(|(i, &c)| (c, i)).collect();
                let n = recipe.num_classes.unwrap_or(ids.len()).max(ids.len());
                (
                    Box::new(move |b| batches[b].class.iter().map(|c| map.get(c).copied()).collect()),
                    n,
                    ids,
                )
            }
            LabelKind::Identity => {
                let m = batches.iter().map(|b| identity_labels(b).into_iter().max().map_or(0, |v| v + 1)).max().unwrap_or(1);
                let n = recipe.num_classes.unwrap_or(m).max(m);
                (
                    Box::new(move |b| identity_labels(&batches[b]).into_iter().map(Some).collect()),
                    n,
                    Vec::new(),
                )
            }
        };
    if n_classes < 2 {
        warn!("pointwise class probe sees a single class; training is degenerate");
    }
    let mut p = init_weights(ProbeFamily::ClassPointwise, n_classes.max(1), d, recipe, acts.layer, None);
    p.labels = class_ids;
    check_acts(&p, batches, acts)?;
    let history = optimize(&mut p, &train, recipe, |w, b| {
        let labels = labels_of(b);
        let keep: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_some()).collect();
        let x = acts.x[b].select_rows(&keep);
        let l: Vec<usize> = keep.iter().map(|&i| labels[i].expect("kept")).collect();
        let (loss, g) = pointwise_loss_and_grad(w, &x, &l);
        (loss, g, l.len())
    })?;
    let (mut hit, mut tot, mut skipped) = (0usize, 0usize, 0usize);
    for &b in &test {
        let probs = p.class_probabilities(&acts.x[b]);
        for (i, l) in labels_of(b).into_iter().enumerate() {
            match l {
                Some(l) => {
                    let row = probs.row(i);
                    let arg = (0..row.len()).fold(0, |a, c| if row[c] > row[a] { c } else { a });
                    hit += usize::from(arg == l);
                    tot += 1;
                }
                None => skipped += 1,
            }
        }
    }
    if skipped > 0 {
        warn!("{skipped} held-out patches carry classes absent from training and were excluded");
    }
    Ok(TrainOutcome {
        train: evaluate_subset(&p, batches, acts, &train, 0.5)?,
        held_out: evaluate_subset(&p, batches, acts, &test, 0.5)?,
        weights: p,
        train_images,
        test_images,
        patch_accuracy: (tot > 0).then(|| hit as f64 / tot as f64),
        loss_history: history,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub layer: usize,
    pub accuracy: f64,
    pub baseline: f64,
    pub delta_pp: f64,
}

/// Per-layer held-out accuracy with its peak.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAccuracyCurve {
    pub points: Vec<CurvePoint>,
    pub depth: usize,
    pub peak_layer: usize,
    /// `peak_layer / (depth − 1)`.
    pub peak_normalized: f64,
}

impl LayerAccuracyCurve {
    pub fn from_points(points: Vec<CurvePoint>, depth: usize) -> Result<Self> {
        let peak = points
            .iter()
            .fold(None::<&CurvePoint>, |best, p| match best {
                Some(b) if b.accuracy >= p.accuracy => Some(b),
                _ => Some(p),
            })
            .ok_or_else(|| Error::InvalidArgument("empty accuracy curve".into()))?;
        let peak_layer = peak.layer;
        Ok(Self {
            peak_normalized: if depth > 1 { peak_layer as f64 / (depth - 1) as f64 } else { 0.0 },
            points,
            depth,
            peak_layer,
        })
    }
}

pub fn write_curve_csv(path: impl AsRef<Path>, curve: &LayerAccuracyCurve) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{other:?}")),
    })?;
    w.write_record(["layer", "accuracy", "baseline", "delta_pp"])?;
    for p in &curve.points {
        w.write_record([
            p.layer.to_string(),
            format!("{:.6}", p.accuracy),
            format!("{:.6}", p.baseline),
            format!("{:.4}", p.delta_pp),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::supervision::{gen_synthetic_embeddings, SyntheticSpec};
    use crate::tensor::{central_difference, gradient_relative_error};

    fn toy_batch(n: usize, seed: u64) -> (Matrix, Matrix, Vec<bool>) {
        let mut g = rng::rng(seed);
        let dist = Normal::new(0.0, 1.0).unwrap();
        let x = Matrix::from_fn(n, 5, |_, _| dist.sample(&mut g));
        let y = Matrix::from_fn(n, 5, |_, _| dist.sample(&mut g));
        let inst: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let same = (0..n * n).map(|k| inst[k / n] == inst[k % n]).collect();
        (x, y, same)
    }

    #[test]
    fn gradients_match_finite_differences() {
        for family in ProbeFamily::PAIRWISE {
            let rows = match family {
                ProbeFamily::Linear | ProbeFamily::Diag => 1,
                _ => 3,
            };
            let recipe = TrainRecipe {
                init_scale: 0.8,
                ..Default::default()
            };
            let mut p = init_weights(family, rows, 5, &recipe, 0, (family == ProbeFamily::CrossLayer).then_some(1));
            p.bias.iter_mut().enumerate().for_each(|(i, b)| *b = 0.1 * i as f64 - 0.2);
            let (x, y, same) = toy_batch(7, 3);
            let y = if family == ProbeFamily::CrossLayer { y } else { x.clone() };
            let set = PairSet::for_family(family);
            let (_, g) = pair_loss_and_grad(&p, &x, &y, &same, set);
            let theta = p.flatten();
            let num = central_difference(
                |t| {
                    let mut q = p.clone();
                    q.unflatten(t);
                    pair_loss_and_grad(&q, &x, &y, &same, set).0
                },
                &theta,
                1e-5,
            );
            let err = gradient_relative_error(&g, &num);
            assert!(err < 1e-6, "{family}: {err}");
        }
    }

    #[test]
    fn zero_weights_score_at_baseline() {
        let data = gen_synthetic_embeddings(&SyntheticSpec {
            images: 3,
            ..Default::default()
        })
        .unwrap();
        let acts = PairActs::gather(0, &data.batches, &data.images).unwrap();
        let p = ProbeWeights {
            family: ProbeFamily::Quad,
            layer: 0,
            layer2: None,
            w: Matrix::zeros(2, 64),
            w2: None,
            bias: vec![0.0],
            labels: vec![],
        };
        let e = evaluate_probe(&p, &data.batches, &acts, 0.5).unwrap();
        assert_eq!(e.accuracy, e.baseline);
        assert_eq!(e.delta_pp, 0.0);
        let wrong = ProbeWeights { layer: 3, ..p };
        assert!(matches!(evaluate_probe(&wrong, &data.batches, &acts, 0.5), Err(Error::LayerMismatch { .. })));
    }

    #[test]
    fn curve_peak_is_normalized() {
        let pts = (0..24)
            .map(|l| CurvePoint {
                layer: l,
                accuracy: 1.0 - ((l as f64) - 18.0).abs() / 30.0,
                baseline: 0.7,
                delta_pp: 0.0,
            })
            .collect();
        let c = LayerAccuracyCurve::from_points(pts, 24).unwrap();
        assert_eq!(c.peak_layer, 18);
        assert!((c.peak_normalized - 0.7826).abs() < 1e-4);
    }
}
