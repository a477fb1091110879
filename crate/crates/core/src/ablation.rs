//! Causal tests on the binding subspace.
//!
//! A probe `W` splits a patch state into `b = W h` and the rest. The
//! uninformed ablation swaps `b` between randomly chosen patches, the
//! informed one pulls every patch towards its object's mean `b`. Both are
//! written back as `h + Wᵀ(WWᵀ)⁻¹ δb` at one layer and propagated through the
//! frozen network, after which linear heads are retrained on the final layer
//! and the self-distillation loss is measured.

use std::collections::BTreeMap;

use log::warn;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::analysis::projection_matrix;
use crate::error::{Error, Result};
use crate::io::{
    Activation, Architecture, ArchiveBuilder, DinoHead, DinoHeadSpec, LabelRaster, ModelBundle, NormPlacement,
    TensorArchive,
};
use crate::par;
use crate::probes::{minibatch_adam, pointwise_loss_and_grad, FlatParams, ProbeFamily, ProbeWeights, TrainRecipe};
use crate::rng;
use crate::supervision::SyntheticData;
use crate::tensor::kernels::{gelu, linear, map_inplace};
use crate::tensor::{hungarian_assign, log_sigmoid, log_softmax, norm, sigmoid, softmax, DenseTensor, Lifter, Matrix};
use crate::vit::{final_features, forward_with_trace, HookEdit, HookPlan, LayerTrace, PatchSequence, TraceOptions};

pub const DEFAULT_ABLATION_LAYER: usize = 18;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum AblationMode {
    /// Derange the binding vectors of `⌊ratio·N⌋` patches.
    Uninformed { ratio: f64 },
    /// `b̃ = (1−α)·mean_object b + α·b`.
    Informed { alpha: f64 },
}

impl AblationMode {
    pub fn name(&self) -> &'static str {
        match self {
            AblationMode::Uninformed { .. } => "uninformed",
            AblationMode::Informed { .. } => "informed",
        }
    }

    pub fn parameter(&self) -> f64 {
        match *self {
            AblationMode::Uninformed { ratio } => ratio,
            AblationMode::Informed { alpha } => alpha,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    #[serde(default = "default_layer")]
    pub layer: usize,
    #[serde(flatten)]
    pub mode: AblationMode,
    #[serde(default)]
    pub seed: u64,
}

fn default_layer() -> usize {
    DEFAULT_ABLATION_LAYER
}

impl AblationConfig {
    pub fn uninformed(layer: usize, ratio: f64, seed: u64) -> Self {
        Self {
            layer,
            mode: AblationMode::Uninformed { ratio },
            seed,
        }
    }

    pub fn informed(layer: usize, alpha: f64, seed: u64) -> Self {
        Self {
            layer,
            mode: AblationMode::Informed { alpha },
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (what, v) = match self.mode {
            AblationMode::Uninformed { ratio } => ("shuffle ratio", ratio),
            AblationMode::Informed { alpha } => ("injection alpha", alpha),
        };
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidArgument(format!("{what} must lie in [0, 1], got {v}")));
        }
        Ok(())
    }

    /// True for settings that leave every patch untouched.
    pub fn is_identity(&self) -> bool {
        match self.mode {
            AblationMode::Uninformed { ratio } => ratio == 0.0,
            AblationMode::Informed { alpha } => alpha == 1.0,
        }
    }
}

fn lifter_for(probe: &ProbeWeights, layer: usize) -> Result<Lifter> {
    probe.expect_layer(layer)?;
    Lifter::new(projection_matrix(probe)?)
}

/// Uniform derangement of `0..m` by rejection (`m ≥ 2`).
fn derangement(m: usize, g: &mut rng::Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..m).collect();
    loop {
        p.shuffle(g);
        if p.iter().enumerate().all(|(i, &v)| i != v) {
            return p;
        }
    }
}

/// Lift per-patch binding deltas into a delta hook, dropping zero rows.
fn lifted_plan(layer: usize, offset: usize, lifter: &Lifter, edits: Vec<(usize, Vec<f64>)>) -> Result<HookPlan> {
    let edits: Vec<(usize, Vec<f64>)> = edits.into_iter().filter(|(_, d)| d.iter().any(|&v| v != 0.0)).collect();
    let d = lifter.projection().cols();
    let mut deltas = Matrix::zeros(edits.len(), d);
    let mut rows = Vec::with_capacity(edits.len());
    for (r, (patch, db)) in edits.iter().enumerate() {
        deltas.row_mut(r).copy_from_slice(&lifter.lift(db)?);
        rows.push(offset + patch);
    }
    Ok(HookPlan::delta(layer, rows, deltas))
}

/// Patches chosen by an uninformed shuffle and where each takes its binding from.
pub fn shuffle_assignment(n: usize, ratio: f64, seed: u64) -> Vec<(usize, usize)> {
    let m = (ratio * n as f64).floor() as usize;
    if m < 2 {
        return Vec::new();
    }
    let mut g = rng::rng(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut g);
    let mut chosen = idx[..m].to_vec();
    chosen.sort_unstable();
    let perm = derangement(m, &mut g);
    chosen.iter().zip(&perm).map(|(&i, &p)| (i, chosen[p])).collect()
}

/// Derange the binding vectors of a seeded subset of patches at
/// `config.layer`; unchosen patches are untouched.
pub fn uninformed_shuffle(trace: &LayerTrace, probe: &ProbeWeights, config: &AblationConfig) -> Result<HookPlan> {
    config.validate()?;
    let AblationMode::Uninformed { ratio } = config.mode else {
        return Err(Error::InvalidArgument("uninformed_shuffle needs an uninformed config".into()));
    };
    let lifter = lifter_for(probe, config.layer)?;
    let h = trace.patch_matrix(config.layer)?;
    let b = probe.project(&h);
    let edits = shuffle_assignment(h.rows(), ratio, config.seed)
        .into_iter()
        .map(|(i, src)| (i, b.row(src).iter().zip(b.row(i)).map(|(s, t)| s - t).collect()))
        .collect();
    lifted_plan(config.layer, trace.patch_offset(), &lifter, edits)
}

/// Blend each labelled patch's binding vector with its object mean.
/// Unlabelled patches are untouched.
pub fn informed_inject(
    trace: &LayerTrace,
    probe: &ProbeWeights,
    raster: &LabelRaster,
    config: &AblationConfig,
) -> Result<HookPlan> {
    config.validate()?;
    let AblationMode::Informed { alpha } = config.mode else {
        return Err(Error::InvalidArgument("informed_inject needs an informed config".into()));
    };
    raster.check_side(trace.grid_side)?;
    let lifter = lifter_for(probe, config.layer)?;
    let b = probe.project(&trace.patch_matrix(config.layer)?);
    let mut edits = Vec::new();
    for patches in raster.instance_patches().values() {
        let mean = b.select_rows(patches).column_means();
        for &i in patches {
            let delta = mean
                .iter()
                .zip(b.row(i))
                .map(|(&m, &bi)| ((1.0 - alpha) * m + alpha * bi) - bi)
                .collect();
            edits.push((i, delta));
        }
    }
    edits.sort_by_key(|(i, _)| *i);
    lifted_plan(config.layer, trace.patch_offset(), &lifter, edits)
}

/// Build the hook for one image under `config`.
pub fn ablation_hook(
    trace: &LayerTrace,
    probe: &ProbeWeights,
    raster: Option<&LabelRaster>,
    config: &AblationConfig,
) -> Result<HookPlan> {
    match config.mode {
        AblationMode::Uninformed { .. } => uninformed_shuffle(trace, probe, config),
        AblationMode::Informed { .. } => {
            let raster = raster.ok_or_else(|| Error::Labels("informed injection needs an instance raster".into()))?;
            informed_inject(trace, probe, raster, config)
        }
    }
}

/// Store per-image hooks as a tensor archive.
pub fn hook_plans_to_builder(plans: &[(String, HookPlan)], config: &AblationConfig) -> Result<ArchiveBuilder> {
    let mut b = ArchiveBuilder::new();
    b.set_metadata("ablation", serde_json::to_value(config)?)
        .set_metadata("permutation", "derangement".into())
        .set_metadata("lift", "pseudo-inverse".into());
    for (id, plan) in plans {
        let HookEdit::Delta { rows, deltas } = &plan.edit else {
            return Err(Error::Unsupported("only delta hooks can be stored".into()));
        };
        let rows_t = DenseTensor::new(vec![rows.len()], rows.iter().map(|&r| r as f32).collect())?;
        b.add(format!("hooks/{id}/rows"), rows_t)?;
        b.add(format!("hooks/{id}/deltas"), deltas.to_tensor())?;
    }
    Ok(b)
}

/// Read one stored hook back.
pub fn hook_plan_from_archive(archive: &TensorArchive, id: &str, layer: usize) -> Result<HookPlan> {
    let rows = archive.get(&format!("hooks/{id}/rows"))?;
    let deltas = Matrix::from_tensor(&archive.get(&format!("hooks/{id}/deltas"))?)?;
    let rows: Vec<usize> = rows.data().iter().map(|&r| r as usize).collect();
    if rows.len() != deltas.rows() {
        return Err(Error::shape("stored hook", &[rows.len()], &[deltas.rows()]));
    }
    Ok(HookPlan::delta(layer, rows, deltas))
}

// ---------------------------------------------------------------------------
// Semantic head

#[derive(Debug, Clone)]
pub struct SemanticOutcome {
    /// Softmax head over the train-split classes (`labels` holds class ids).
    pub head: ProbeWeights,
    /// Patch-level accuracy over labelled eval patches with a known class.
    pub accuracy: f64,
    pub n_eval: usize,
    /// Eval patches whose class never occurs in the train split.
    pub excluded: usize,
    pub loss_history: Vec<f64>,
}

fn class_index(classes: &[i32]) -> BTreeMap<i32, usize> {
    classes.iter().enumerate().map(|(i, &c)| (c, i)).collect()
}

/// Labelled patch rows and class indices of one image.
fn semantic_targets(raster: &LabelRaster, index: &BTreeMap<i32, usize>) -> (Vec<usize>, Vec<usize>, usize) {
    let (mut rows, mut labels, mut unknown) = (Vec::new(), Vec::new(), 0);
    for i in raster.labeled() {
        match index.get(&raster.class[i]) {
            Some(&c) => {
                rows.push(i);
                labels.push(c);
            }
            None => unknown += 1,
        }
    }
    (rows, labels, unknown)
}

/// Linear softmax head on final-layer patch features, trained with
/// cross-entropy on the `train` images and scored on the `eval` images.
pub fn retrain_semantic_head(
    features: &[Matrix],
    rasters: &[LabelRaster],
    train: &[usize],
    eval: &[usize],
    recipe: &TrainRecipe,
) -> Result<SemanticOutcome> {
    recipe.validate()?;
    check_head_inputs(features, rasters, train, eval)?;
    let mut classes: Vec<i32> = train
        .iter()
        .flat_map(|&i| rasters[i].labeled().into_iter().map(move |p| rasters[i].class[p]))
        .collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return Err(Error::Labels("train split has no labelled patches".into()));
    }
    let index = class_index(&classes);
    let d = features[0].cols();
    let mut head = ProbeWeights {
        family: ProbeFamily::ClassPointwise,
        layer: 0,
        layer2: None,
        w: Matrix::zeros(classes.len(), d),
        w2: None,
        bias: vec![0.0; classes.len()],
        labels: classes,
    };
    let targets: Vec<(Vec<usize>, Vec<usize>, usize)> = rasters.iter().map(|r| semantic_targets(r, &index)).collect();
    let loss_history = minibatch_adam(&mut head, train, recipe, "semantic head", |p, img| {
        let (rows, labels, _) = &targets[img];
        let x = features[img].select_rows(rows);
        let (loss, grad) = pointwise_loss_and_grad(p, &x, labels);
        (loss, grad, labels.len())
    })?;
    let (mut correct, mut total, mut excluded) = (0usize, 0usize, 0usize);
    for &img in eval {
        let (rows, labels, unknown) = &targets[img];
        excluded += unknown;
        let probs = head.class_probabilities(&features[img].select_rows(rows));
        for (r, &l) in labels.iter().enumerate() {
            correct += (argmax(probs.row(r)) == l) as usize;
        }
        total += labels.len();
    }
    if excluded > 0 {
        warn!("{excluded} eval patches belong to classes absent from the train split; excluded from accuracy");
    }
    Ok(SemanticOutcome {
        head,
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        n_eval: total,
        excluded,
        loss_history,
    })
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn check_head_inputs(features: &[Matrix], rasters: &[LabelRaster], train: &[usize], eval: &[usize]) -> Result<()> {
    if features.len() != rasters.len() || features.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} feature maps for {} label rasters",
            features.len(),
            rasters.len()
        )));
    }
    for (f, r) in features.iter().zip(rasters) {
        if f.rows() != r.patches() || f.cols() != features[0].cols() {
            return Err(Error::shape(
                format!("head features of `{}`", r.image_id),
                &[r.patches(), features[0].cols()],
                &[f.rows(), f.cols()],
            ));
        }
    }
    if let Some(&i) = train.iter().chain(eval).find(|&&i| i >= features.len()) {
        return Err(Error::InvalidArgument(format!("image index {i} out of range")));
    }
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty train split".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Instance head

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InstanceHeadConfig {
    pub num_queries: usize,
    pub no_object_weight: f64,
    pub mask_weight: f64,
    pub dice_weight: f64,
}

impl Default for InstanceHeadConfig {
    fn default() -> Self {
        Self {
            num_queries: 100,
            no_object_weight: 0.1,
            mask_weight: 5.0,
            dice_weight: 5.0,
        }
    }
}

impl InstanceHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_queries == 0 || !(self.no_object_weight > 0.0 && self.mask_weight > 0.0 && self.dice_weight > 0.0) {
            return Err(Error::Config(format!("instance head weights must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Query-based mask head.
///
/// Query `q` predicts mask logits `m_iq = Q_q·x_i + c_q` over patches and
/// an objectness logit `o_q = V_q·x̄ + e_q` from the image's mean patch.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceHead {
    pub queries: Matrix,
    pub mask_bias: Vec<f64>,
    pub objectness: Matrix,
    pub objectness_bias: Vec<f64>,
}

impl FlatParams for InstanceHead {
    fn flatten(&self) -> Vec<f64> {
        let mut p = self.queries.data().to_vec();
        p.extend_from_slice(&self.mask_bias);
        p.extend_from_slice(self.objectness.data());
        p.extend_from_slice(&self.objectness_bias);
        p
    }

    fn unflatten(&mut self, p: &[f64]) {
        let (nq, m) = (self.queries.data().len(), self.mask_bias.len());
        self.queries.data_mut().copy_from_slice(&p[..nq]);
        self.mask_bias.copy_from_slice(&p[nq..nq + m]);
        self.objectness.data_mut().copy_from_slice(&p[nq + m..2 * nq + m]);
        self.objectness_bias.copy_from_slice(&p[2 * nq + m..]);
    }
}

impl InstanceHead {
    pub fn init(num_queries: usize, d: usize, seed: u64) -> Self {
        let mut g = rng::rng(seed);
        let std = 1.0 / (d.max(1) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("positive std");
        Self {
            queries: Matrix::from_fn(num_queries, d, |_, _| dist.sample(&mut g)),
            mask_bias: vec![0.0; num_queries],
            objectness: Matrix::zeros(num_queries, d),
            objectness_bias: vec![0.0; num_queries],
        }
    }

    pub fn num_queries(&self) -> usize {
        self.queries.rows()
    }

    /// Mask logits over `rows` (`|rows|×M`) and objectness logits (`M`).
    fn logits(&self, x: &Matrix, rows: &[usize]) -> (Matrix, Vec<f64>, Vec<f64>) {
        let xs = x.select_rows(rows);
        let mut m = xs.matmul_t(&self.queries);
        for i in 0..m.rows() {
            m.row_mut(i).iter_mut().zip(&self.mask_bias).for_each(|(v, c)| *v += c);
        }
        let mean = x.column_means();
        let o: Vec<f64> = self
            .objectness
            .matvec(&mean)
            .iter()
            .zip(&self.objectness_bias)
            .map(|(a, b)| a + b)
            .collect();
        (m, o, mean)
    }
}

/// Labelled rows of an image and the binary target mask of each instance.
struct InstanceTargets {
    rows: Vec<usize>,
    /// `|rows|×G` indicator matrix.
    masks: Matrix,
}

fn instance_targets(raster: &LabelRaster) -> InstanceTargets {
    let rows = raster.labeled();
    let ids = raster.instances();
    let masks = Matrix::from_fn(rows.len(), ids.len(), |r, g| (raster.instance[rows[r]] == ids[g]) as u8 as f64);
    InstanceTargets { rows, masks }
}

fn softplus(x: f64) -> f64 {
    -log_sigmoid(-x)
}

/// Matching cost `−p_q + λ_mask·BCE + λ_dice·dice` for all query/instance pairs.
fn matching_cost(m: &Matrix, o: &[f64], t: &InstanceTargets, cfg: &InstanceHeadConfig) -> Matrix {
    let (s, nq, ng) = (m.rows(), m.cols(), t.masks.cols());
    let p = m.map(sigmoid);
    let sp: Vec<f64> = (0..nq).map(|q| (0..s).map(|i| softplus(m[(i, q)])).sum()).collect();
    let ym = m.t_matmul(&t.masks); // M×G: Σ_i m_iq y_ig
    let inter = p.t_matmul(&t.masks);
    let psum = p.column_sums();
    let ysum = t.masks.column_sums();
    let inv_s = 1.0 / s.max(1) as f64;
    Matrix::from_fn(nq, ng, |q, g| {
        let bce = (sp[q] - ym[(q, g)]) * inv_s;
        let dice = 1.0 - 2.0 * inter[(q, g)] / (psum[q] + ysum[g]);
        -sigmoid(o[q]) + cfg.mask_weight * bce + cfg.dice_weight * dice
    })
}

/// Loss terms of one image.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct InstanceLoss {
    pub total: f64,
    pub cls: f64,
    pub mask: f64,
    pub dice: f64,
}

/// Query → instance matching of one image on the combined cost.
pub fn match_queries(head: &InstanceHead, x: &Matrix, raster: &LabelRaster, cfg: &InstanceHeadConfig) -> Result<Vec<Option<usize>>> {
    let t = instance_targets(raster);
    if t.masks.cols() == 0 {
        return Ok(vec![None; head.num_queries()]);
    }
    let (m, o, _) = head.logits(x, &t.rows);
    Ok(hungarian_assign(&matching_cost(&m, &o, &t, cfg))?.row_to_col)
}

/// Loss and gradient of one image for a fixed query → instance matching.
///
/// `L = Σ_q w_q ce_q / Σ_q w_q + λ_mask·mean_matched BCE + λ_dice·mean_matched dice`
/// with `w_q = 1` for matched queries and the no-object weight otherwise.
pub fn instance_loss_and_grad(
    head: &InstanceHead,
    x: &Matrix,
    raster: &LabelRaster,
    matching: &[Option<usize>],
    cfg: &InstanceHeadConfig,
) -> (InstanceLoss, Vec<f64>) {
    let t = instance_targets(raster);
    let (m, o, mean) = head.logits(x, &t.rows);
    let (s, nq, d) = (m.rows(), head.num_queries(), x.cols());
    let ng = t.masks.cols();
    let weights: Vec<f64> = matching
        .iter()
        .map(|mq| if mq.is_some() { 1.0 } else { cfg.no_object_weight })
        .collect();
    let wsum: f64 = weights.iter().sum();
    let mut out = InstanceLoss::default();
    let mut d_o = vec![0.0; nq];
    for q in 0..nq {
        let p = sigmoid(o[q]);
        let (ce, g) = if matching[q].is_some() {
            (softplus(-o[q]), p - 1.0)
        } else {
            (softplus(o[q]), p)
        };
        out.cls += weights[q] * ce / wsum;
        d_o[q] = weights[q] * g / wsum;
    }
    let mut d_m = Matrix::zeros(s, nq);
    if ng > 0 && s > 0 {
        let (inv_g, inv_s) = (1.0 / ng as f64, 1.0 / s as f64);
        for (q, g) in matching.iter().enumerate().filter_map(|(q, g)| g.map(|g| (q, g))) {
            let (mut bce, mut inter, mut psum, mut ysum) = (0.0, 0.0, 0.0, 0.0);
            for i in 0..s {
                let (z, y) = (m[(i, q)], t.masks[(i, g)]);
                let p = sigmoid(z);
                bce += softplus(z) - y * z;
                inter += p * y;
                psum += p;
                ysum += y;
            }
            let denom = psum + ysum;
            out.mask += inv_g * bce * inv_s;
            out.dice += inv_g * (1.0 - 2.0 * inter / denom);
            for i in 0..s {
                let (z, y) = (m[(i, q)], t.masks[(i, g)]);
                let p = sigmoid(z);
                let ddice_dp = -(2.0 * y * denom - 2.0 * inter) / (denom * denom);
                d_m[(i, q)] = inv_g * (cfg.mask_weight * (p - y) * inv_s + cfg.dice_weight * ddice_dp * p * (1.0 - p));
            }
        }
    }
    out.total = out.cls + cfg.mask_weight * out.mask + cfg.dice_weight * out.dice;
    let xs = x.select_rows(&t.rows);
    let mut grad = d_m.t_matmul(&xs).into_data();
    grad.extend(d_m.column_sums());
    let mut g_obj = vec![0.0; nq * d];
    for q in 0..nq {
        g_obj[q * d..(q + 1) * d].iter_mut().zip(&mean).for_each(|(g, &v)| *g = d_o[q] * v);
    }
    grad.extend(g_obj);
    grad.extend(d_o);
    (out, grad)
}

#[derive(Debug, Clone)]
pub struct InstanceOutcome {
    pub head: InstanceHead,
    /// Fraction of eval instances whose matched mask reaches IoU ≥ 0.5.
    pub accuracy: f64,
    pub n_instances: usize,
    pub loss_history: Vec<f64>,
}

pub const INSTANCE_IOU_THRESHOLD: f64 = 0.5;

/// Matched ground-truth instances of one image with IoU ≥ 0.5, and the instance count.
pub fn instance_hits(head: &InstanceHead, x: &Matrix, raster: &LabelRaster, cfg: &InstanceHeadConfig) -> Result<(usize, usize)> {
    let t = instance_targets(raster);
    let ng = t.masks.cols();
    if ng == 0 {
        return Ok((0, 0));
    }
    let (m, _, _) = head.logits(x, &t.rows);
    let matching = match_queries(head, x, raster, cfg)?;
    let mut hits = 0;
    for (q, g) in matching.iter().enumerate().filter_map(|(q, g)| g.map(|g| (q, g))) {
        let (mut inter, mut union) = (0usize, 0usize);
        for i in 0..m.rows() {
            let pred = m[(i, q)] > 0.0;
            let truth = t.masks[(i, g)] > 0.5;
            inter += (pred && truth) as usize;
            union += (pred || truth) as usize;
        }
        if union > 0 && inter as f64 / union as f64 >= INSTANCE_IOU_THRESHOLD {
            hits += 1;
        }
    }
    Ok((hits, ng))
}

/// Train the query head on `train` images (matching recomputed each step)
/// and report instance accuracy on `eval` images.
pub fn retrain_instance_head(
    features: &[Matrix],
    rasters: &[LabelRaster],
    train: &[usize],
    eval: &[usize],
    cfg: &InstanceHeadConfig,
    recipe: &TrainRecipe,
) -> Result<InstanceOutcome> {
    recipe.validate()?;
    cfg.validate()?;
    check_head_inputs(features, rasters, train, eval)?;
    let d = features[0].cols();
    let mut head = InstanceHead::init(cfg.num_queries, d, rng::derive_named(recipe.seed, "instance-head"));
    let loss_history = minibatch_adam(&mut head, train, recipe, "instance head", |h, img| {
        match match_queries(h, &features[img], &rasters[img], cfg) {
            Ok(matching) => {
                let (l, g) = instance_loss_and_grad(h, &features[img], &rasters[img], &matching, cfg);
                (l.total, g, 1)
            }
            Err(_) => (f64::NAN, vec![0.0; h.flatten().len()], 1),
        }
    })?;
    let parts = par::map_slice(eval, |&img| instance_hits(&head, &features[img], &rasters[img], cfg));
    let (mut hits, mut total) = (0, 0);
    for p in parts {
        let (h, n) = p?;
        hits += h;
        total += n;
    }
    Ok(InstanceOutcome {
        head,
        accuracy: if total == 0 { 0.0 } else { hits as f64 / total as f64 },
        n_instances: total,
        loss_history,
    })
}

// ---------------------------------------------------------------------------
// Self-distillation loss

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DinoEvalConfig {
    pub student_temp: f64,
    pub teacher_temp: f64,
    /// Explicit center; when unset the bundle's center is used, else the
    /// mean teacher output over the evaluated crops.
    pub center: Option<Vec<f64>>,
}

impl Default for DinoEvalConfig {
    fn default() -> Self {
        Self {
            student_temp: 0.1,
            teacher_temp: 0.04,
            center: None,
        }
    }
}

impl DinoEvalConfig {
    /// Defaults overridden by temperatures recorded in the bundle.
    pub fn for_bundle(bundle: &ModelBundle) -> Self {
        let mut c = Self::default();
        if let Some(spec) = bundle.dino_head.as_ref().map(|h| &h.spec) {
            c.student_temp = spec.student_temp.unwrap_or(c.student_temp);
            c.teacher_temp = spec.teacher_temp.unwrap_or(c.teacher_temp);
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.student_temp > 0.0 && self.teacher_temp > 0.0) {
            return Err(Error::Config(format!(
                "temperatures must be positive, got {} / {}",
                self.student_temp, self.teacher_temp
            )));
        }
        Ok(())
    }
}

/// Projection-head logits of one class-token output.
pub fn dino_head_logits(head: &DinoHead, cls: &[f32]) -> Result<Vec<f64>> {
    let mut x = DenseTensor::new(vec![1, cls.len()], cls.to_vec())?;
    let n = head.mlp.len();
    for (i, (w, b)) in head.mlp.iter().enumerate() {
        if w.shape()[0] != x.shape()[1] {
            return Err(Error::shape("projection head input", &[w.shape()[0]], &[x.shape()[1]]));
        }
        x = linear(&x, w, Some(b));
        if i + 1 < n {
            map_inplace(&mut x, gelu);
        }
    }
    let v: Vec<f64> = x.data().iter().map(|&a| a as f64).collect();
    let nrm = norm(&v).max(1e-12);
    let unit: Vec<f64> = v.iter().map(|a| a / nrm).collect();
    let last = Matrix::from_tensor(&head.last)?;
    Ok(last.t_matvec(&unit))
}

/// `−Σ_k softmax((t−c)/τ_t)_k · log softmax(s/τ_s)_k`.
pub fn dino_cross_entropy(teacher: &[f64], student: &[f64], center: &[f64], teacher_temp: f64, student_temp: f64) -> f64 {
    let t: Vec<f64> = teacher.iter().zip(center).map(|(t, c)| (t - c) / teacher_temp).collect();
    let s: Vec<f64> = student.iter().map(|s| s / student_temp).collect();
    let p = softmax(&t);
    let logq = log_softmax(&s);
    -p.iter().zip(&logq).map(|(a, b)| a * b).sum::<f64>()
}

fn class_logits(bundle: &ModelBundle, head: &DinoHead, trace: &LayerTrace) -> Result<Vec<f64>> {
    let f = final_features(trace, bundle)?;
    dino_head_logits(head, f.row(0))
}

/// Self-distillation loss with the pretrained network as both teacher
/// (unhooked) and student (hooked), averaged over ordered pairs of distinct
/// crops and over images. A single crop is paired with itself.
///
/// `student_hooks(image, crop, unhooked_trace)` supplies the student's edits.
pub fn eval_dino_loss<F>(bundle: &ModelBundle, crops: &[Vec<PatchSequence>], cfg: &DinoEvalConfig, student_hooks: F) -> Result<f64>
where
    F: Fn(usize, usize, &LayerTrace) -> Result<Vec<HookPlan>> + Sync + Send,
{
    cfg.validate()?;
    let head = bundle
        .dino_head
        .as_ref()
        .ok_or_else(|| Error::Unsupported("bundle has no self-distillation head".into()))?;
    if !bundle.arch.class_token {
        return Err(Error::Unsupported("self-distillation loss needs a class token".into()));
    }
    if crops.is_empty() || crops.iter().any(|c| c.is_empty()) {
        return Err(Error::InvalidArgument("every image needs at least one crop".into()));
    }
    let depth = bundle.arch.depth;
    let flat: Vec<(usize, usize)> = crops
        .iter()
        .enumerate()
        .flat_map(|(i, c)| (0..c.len()).map(move |j| (i, j)))
        .collect();
    let outputs = par::map_slice(&flat, |&(i, j)| -> Result<(Vec<f64>, Vec<f64>)> {
        let seq = &crops[i][j];
        let clean = forward_with_trace(seq, bundle, depth, &[], TraceOptions::default())?;
        let teacher = class_logits(bundle, head, &clean)?;
        let hooks = student_hooks(i, j, &clean)?;
        let student = if hooks.iter().all(HookPlan::is_noop) {
            teacher.clone()
        } else {
            class_logits(bundle, head, &forward_with_trace(seq, bundle, depth, &hooks, TraceOptions::default())?)?
        };
        Ok((teacher, student))
    });
    let outputs: Vec<(Vec<f64>, Vec<f64>)> = outputs.into_iter().collect::<Result<_>>()?;
    let k = head.out_dim();
    let center: Vec<f64> = match (&cfg.center, &head.center) {
        (Some(c), _) => c.clone(),
        (None, Some(c)) => c.data().iter().map(|&v| v as f64).collect(),
        (None, None) => {
            let mut c = vec![0.0; k];
            for (t, _) in &outputs {
                c.iter_mut().zip(t).for_each(|(a, b)| *a += b);
            }
            c.iter_mut().for_each(|a| *a /= outputs.len() as f64);
            c
        }
    };
    if center.len() != k {
        return Err(Error::shape("distillation center", &[k], &[center.len()]));
    }
    let mut start = 0;
    let mut per_image = Vec::with_capacity(crops.len());
    for c in crops {
        let o = &outputs[start..start + c.len()];
        start += c.len();
        let (mut sum, mut pairs) = (0.0, 0usize);
        for (ti, (t, _)) in o.iter().enumerate() {
            for (si, (_, s)) in o.iter().enumerate() {
                if ti != si || o.len() == 1 {
                    sum += dino_cross_entropy(t, s, &center, cfg.teacher_temp, cfg.student_temp);
                    pairs += 1;
                }
            }
        }
        per_image.push(sum / pairs as f64);
    }
    Ok(per_image.iter().sum::<f64>() / per_image.len() as f64)
}

/// Mirror a token sequence left-to-right on its patch grid.
pub fn mirror_tokens(seq: &PatchSequence) -> Result<PatchSequence> {
    let (off, side) = (seq.patch_offset(), seq.grid_side);
    let mut t = seq.tokens.clone();
    for r in 0..side {
        for c in 0..side {
            let (dst, src) = (off + r * side + c, off + r * side + (side - 1 - c));
            t.row_mut(dst).copy_from_slice(seq.tokens.row(src));
        }
    }
    PatchSequence::new(t, side, seq.class_token)
}

// ---------------------------------------------------------------------------
// Sweeps

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: String,
    pub parameter: f64,
    /// Patch-level semantic segmentation accuracy.
    pub seg_acc: f64,
    pub inst_acc: Option<f64>,
    pub dino_loss: Option<f64>,
}

/// Everything an ablation run reads.
pub struct AblationInputs<'a> {
    pub bundle: &'a ModelBundle,
    pub seqs: &'a [PatchSequence],
    pub rasters: &'a [LabelRaster],
    /// Quadratic probe trained at the ablation layer.
    pub probe: &'a ProbeWeights,
    pub train: &'a [usize],
    pub eval: &'a [usize],
    /// Global crops per image for the distillation loss; `None` skips it.
    pub dino_crops: Option<&'a [Vec<PatchSequence>]>,
}

#[derive(Debug, Clone, Default)]
pub struct AblationSettings {
    pub recipe: TrainRecipe,
    /// `None` skips the instance head.
    pub instance: Option<InstanceHeadConfig>,
    pub dino: Option<DinoEvalConfig>,
}

/// Seed of the hook for crop `crop` of image `image`.
fn hook_seed(config: &AblationConfig, image: usize, crop: usize) -> u64 {
    rng::derive(rng::derive(config.seed, image as u64), crop as u64)
}

/// Final-layer patch features of every image with the ablation applied.
pub fn ablated_features(inputs: &AblationInputs<'_>, config: &AblationConfig) -> Result<Vec<Matrix>> {
    config.validate()?;
    let bundle = inputs.bundle;
    if config.layer >= bundle.arch.depth {
        return Err(Error::InvalidArgument(format!(
            "ablation layer {} must be below depth {}",
            config.layer, bundle.arch.depth
        )));
    }
    if inputs.rasters.len() != inputs.seqs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} sequences for {} label rasters",
            inputs.seqs.len(),
            inputs.rasters.len()
        )));
    }
    let idx: Vec<usize> = (0..inputs.seqs.len()).collect();
    let feats = par::map_slice(&idx, |&i| -> Result<Matrix> {
        let seq = &inputs.seqs[i];
        let hooks = if config.is_identity() {
            Vec::new()
        } else {
            let prefix = forward_with_trace(seq, bundle, config.layer, &[], TraceOptions::default())?;
            let cfg = AblationConfig {
                seed: hook_seed(config, i, 0),
                ..*config
            };
            vec![ablation_hook(&prefix, inputs.probe, Some(&inputs.rasters[i]), &cfg)?]
        };
        let trace = forward_with_trace(seq, bundle, bundle.arch.depth, &hooks, TraceOptions::default())?;
        let f = final_features(&trace, bundle)?.skip_rows(seq.patch_offset())?;
        Matrix::from_tensor(&f)
    });
    feats.into_iter().collect()
}

/// Run one ablation setting end to end: hook, propagate, retrain heads, score.
pub fn run_ablation(inputs: &AblationInputs<'_>, config: &AblationConfig, settings: &AblationSettings) -> Result<AblationRow> {
    let feats = ablated_features(inputs, config)?;
    let seg = retrain_semantic_head(&feats, inputs.rasters, inputs.train, inputs.eval, &settings.recipe)?;
    let inst = match &settings.instance {
        Some(cfg) => Some(retrain_instance_head(&feats, inputs.rasters, inputs.train, inputs.eval, cfg, &settings.recipe)?.accuracy),
        None => None,
    };
    let dino = match (inputs.dino_crops, &settings.dino, config.mode) {
        (Some(crops), Some(dcfg), AblationMode::Uninformed { .. }) => Some(eval_dino_loss(inputs.bundle, crops, dcfg, |i, j, clean| {
            if config.is_identity() {
                return Ok(Vec::new());
            }
            let cfg = AblationConfig {
                seed: hook_seed(config, i, j),
                ..*config
            };
            Ok(vec![uninformed_shuffle(clean, inputs.probe, &cfg)?])
        })?),
        (Some(_), Some(_), AblationMode::Informed { .. }) => {
            warn!("informed injection has no defined self-distillation loss; column left empty");
            None
        }
        _ => None,
    };
    Ok(AblationRow {
        mode: config.mode.name().into(),
        parameter: config.mode.parameter(),
        seg_acc: seg.accuracy,
        inst_acc: inst,
        dino_loss: dino,
    })
}

/// Reject the distillation loss for informed settings.
pub fn check_dino_mode(config: &AblationConfig) -> Result<()> {
    match config.mode {
        AblationMode::Informed { .. } => Err(Error::Unsupported(
            "informed injection cannot be scored with the self-distillation loss: crops change the patch grid".into(),
        )),
        AblationMode::Uninformed { .. } => Ok(()),
    }
}

// ---------------------------------------------------------------------------
// Synthetic stand-in network

/// One pre-norm block that routes attention through the planted binding
/// subspace and copies features along it: query and key both project onto
/// the binding subspace (scaled by `sharpness`), values carry the feature
/// complement (scaled by `value_gain`), the MLP is zero. The class token is
/// a feature-space direction `e` whose query is rerouted to a random binding
/// code and whose key is zero, so it gathers the features of whichever
/// patches carry that code.
pub fn binding_standin_bundle(data: &SyntheticData, sharpness: f64, value_gain: f64, seed: u64) -> Result<ModelBundle> {
    let (k, d) = (data.w_true.rows(), data.w_true.cols());
    let side = data.rasters.first().map(|r| r.side).ok_or_else(|| Error::InvalidArgument("no images".into()))?;
    let mut arch = Architecture::tiny(1, d, 1, side, NormPlacement::Pre);
    arch.mlp_dim = 4;
    arch.layer_scale = false;
    arch.final_norm = false;
    arch.activation = Activation::Gelu;
    arch.dino_head = Some(DinoHeadSpec {
        mlp_layers: 2,
        student_temp: None,
        teacher_temp: None,
    });
    let mut bundle = ModelBundle::random_init(arch.clone(), seed)?;
    let pb = data.w_true.t_matmul(&data.w_true);
    let pf = Matrix::identity(d).sub(&pb);
    let zeros = |n: usize| DenseTensor::zeros(vec![n]);
    let lw = &mut bundle.layers[0];
    lw.norm1 = (DenseTensor::from_fn(vec![d], |_| 1.0), zeros(d));
    let mut g = rng::rng(rng::derive_named(seed, "standin-cls"));
    let u: Vec<f64> = (0..k).map(|_| StandardNormal.sample(&mut g)).collect();
    let code = data.w_true.t_matvec(&u);
    let raw: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut g)).collect();
    let e = pf.matvec(&raw);
    let (code_norm, e_norm) = (norm(&code).max(1e-12), norm(&e).max(1e-12));
    let mut wq = pb.clone();
    for i in 0..d {
        for j in 0..d {
            wq[(i, j)] += e[i] / e_norm * code[j] / code_norm;
        }
    }
    lw.q = (wq.scale(sharpness).to_tensor(), zeros(d));
    lw.k = (pb.scale(sharpness).to_tensor(), zeros(d));
    lw.v = (pf.scale(value_gain).to_tensor(), zeros(d));
    lw.proj = (Matrix::identity(d).to_tensor(), zeros(d));
    lw.ls1 = None;
    lw.ls2 = None;
    lw.fc1 = (DenseTensor::zeros(vec![d, arch.mlp_dim]), zeros(arch.mlp_dim));
    lw.fc2 = (DenseTensor::zeros(vec![arch.mlp_dim, d]), zeros(d));
    bundle.cls_token = Some(DenseTensor::new(vec![d], e.iter().map(|&v| (v / e_norm) as f32).collect())?);
    Ok(bundle)
}

/// Token sequences (class token + embeddings) of the synthetic images.
pub fn standin_sequences(data: &SyntheticData, bundle: &ModelBundle) -> Result<Vec<PatchSequence>> {
    let d = bundle.arch.dim;
    let cls = bundle.cls_token.clone().unwrap_or_else(|| DenseTensor::zeros(vec![d]));
    data.images
        .iter()
        .zip(&data.rasters)
        .map(|(h, r)| {
            if h.cols() != d {
                return Err(Error::shape("synthetic embeddings", &[d], &[h.cols()]));
            }
            let mut t = DenseTensor::zeros(vec![h.rows() + 1, d]);
            t.row_mut(0).copy_from_slice(cls.data());
            for i in 0..h.rows() {
                t.row_mut(i + 1).iter_mut().zip(h.row(i)).for_each(|(a, &b)| *a = b as f32);
            }
            PatchSequence::new(t, r.side, true)
        })
        .collect()
}
