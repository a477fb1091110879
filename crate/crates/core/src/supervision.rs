//! Patch-pair supervision, baselines and planted synthetic data.

use log::warn;
use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{LabelRaster, IGNORE_ID};
use crate::rng;
use crate::tensor::{orthonormalize_rows, Matrix};

pub const PATCHES_PER_BATCH: usize = 64;

/// Sampled patches of one image with their pair labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairBatch {
    /// Position of the image in the accompanying raster / activation lists.
    pub image: usize,
    pub image_id: String,
    pub indices: Vec<usize>,
    /// Row-major `n×n` same-object matrix.
    pub same: Vec<bool>,
    pub instance: Vec<i32>,
    pub class: Vec<i32>,
}

impl PairBatch {
    pub fn from_raster(raster: &LabelRaster, image: usize, indices: Vec<usize>) -> Result<Self> {
        let instance: Vec<i32> = indices.iter().map(|&i| raster.instance[i]).collect();
        let class: Vec<i32> = indices.iter().map(|&i| raster.class[i]).collect();
        if instance.contains(&IGNORE_ID) {
            return Err(Error::Labels(format!(
                "image `{}`: sampled an unlabeled patch",
                raster.image_id
            )));
        }
        let n = indices.len();
        let same = (0..n * n).map(|k| instance[k / n] == instance[k % n]).collect();
        let b = Self {
            image,
            image_id: raster.image_id.clone(),
            indices,
            same,
            instance,
            class,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn same(&self, i: usize, j: usize) -> bool {
        self.same[i * self.len() + j]
    }

    /// Supervised pairs: strict upper triangle.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let n = self.len();
        (0..n).flat_map(move |i| (i + 1..n).map(move |j| (i, j)))
    }

    pub fn num_pairs(&self) -> usize {
        let n = self.len();
        n * n.saturating_sub(1) / 2
    }

    pub fn num_positive(&self) -> usize {
        self.pairs().filter(|&(i, j)| self.same(i, j)).count()
    }

    /// Symmetric, reflexive, and same-object implies same-class.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.same.len() != n * n || self.instance.len() != n || self.class.len() != n {
            return Err(Error::Labels(format!("pair batch for `{}` has inconsistent sizes", self.image_id)));
        }
        for i in 0..n {
            if !self.same(i, i) {
                return Err(Error::Labels(format!("pair matrix of `{}` is not reflexive", self.image_id)));
            }
            for j in 0..n {
                if self.same(i, j) != self.same(j, i) {
                    return Err(Error::Labels(format!("pair matrix of `{}` is not symmetric", self.image_id)));
                }
                if self.same(i, j) && self.class[i] != self.class[j] {
                    return Err(Error::Labels(format!(
                        "pair ({i}, {j}) of `{}` is same-object but crosses classes",
                        self.image_id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One batch per image, `per_image` labeled patches drawn uniformly
/// without replacement. Images with too few labeled patches are skipped.
pub fn sample_pair_batches(rasters: &[LabelRaster], per_image: usize, seed: u64) -> Result<Vec<PairBatch>> {
    let mut out = Vec::with_capacity(rasters.len());
    for (i, r) in rasters.iter().enumerate() {
        let labeled = r.labeled();
        if labeled.len() < per_image {
            warn!(
                "skipping image `{}`: {} labeled patches, need {per_image}",
                r.image_id,
                labeled.len()
            );
            continue;
        }
        let mut g = rng::rng(rng::derive(seed, i as u64));
        let mut picked: Vec<usize> = index::sample(&mut g, labeled.len(), per_image)
            .into_iter()
            .map(|k| labeled[k])
            .collect();
        picked.sort_unstable();
        out.push(PairBatch::from_raster(r, i, picked)?);
    }
    Ok(out)
}

/// Batches drawn from a fixed number of whole objects: pick `objects`
/// distinct instances (from one class when `same_class`), then
/// `per_object` patches of each.
pub fn sample_object_batches(
    raster: &LabelRaster,
    image: usize,
    objects: usize,
    per_object: usize,
    count: usize,
    same_class: bool,
    seed: u64,
) -> Result<Vec<PairBatch>> {
    let groups: Vec<(i32, Vec<usize>)> = raster
        .instance_patches()
        .into_iter()
        .filter(|(_, p)| p.len() >= per_object)
        .collect();
    let mut pools: Vec<Vec<usize>> = Vec::new();
    if same_class {
        let mut by_class: std::collections::BTreeMap<i32, Vec<usize>> = Default::default();
        for (g, (_, p)) in groups.iter().enumerate() {
            by_class.entry(raster.class[p[0]]).or_default().push(g);
        }
        pools.extend(by_class.into_values().filter(|v| v.len() >= objects));
    } else if groups.len() >= objects {
        pools.push((0..groups.len()).collect());
    }
    if pools.is_empty() {
        warn!("image `{}` has no group of {objects} objects to sample", raster.image_id);
        return Ok(Vec::new());
    }
    let mut g = rng::rng(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let pool = &pools[g.random_range(0..pools.len())];
        let chosen = index::sample(&mut g, pool.len(), objects);
        let mut picked = Vec::with_capacity(objects * per_object);
        for c in chosen {
            let patches = &groups[pool[c]].1;
            picked.extend(index::sample(&mut g, patches.len(), per_object).into_iter().map(|k| patches[k]));
        }
        picked.sort_unstable();
        out.push(PairBatch::from_raster(raster, image, picked)?);
    }
    Ok(out)
}

/// Accuracy of always answering "different" over supervised pairs.
pub fn majority_baseline(batches: &[PairBatch]) -> Result<f64> {
    let (mut neg, mut total) = (0usize, 0usize);
    for b in batches {
        total += b.num_pairs();
        neg += b.num_pairs() - b.num_positive();
    }
    if total == 0 {
        return Err(Error::InvalidArgument("no supervised pairs".into()));
    }
    Ok(neg as f64 / total as f64)
}

/// Planted `h = f + b` generator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub d: usize,
    pub k_true: usize,
    pub objects: usize,
    pub patches_per_object: usize,
    /// Std of per-patch noise on binding codes.
    pub noise: f64,
    /// Objects pair up into shared classes.
    pub class_sharing: bool,
    pub images: usize,
    /// Norm of each object's binding code.
    pub binding_scale: f64,
    /// Std of class prototypes.
    pub class_scale: f64,
    /// Std of per-patch appearance jitter in the feature part.
    pub feature_jitter: f64,
    pub batches_per_image: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            d: 64,
            k_true: 8,
            objects: 8,
            patches_per_object: 40,
            noise: 0.1,
            class_sharing: false,
            images: 48,
            binding_scale: 3.0,
            class_scale: 0.3,
            feature_jitter: 1.0,
            batches_per_image: 4,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k_true == 0 || self.k_true > self.d {
            return Err(Error::InvalidArgument(format!("k_true {} must be in 1..={}", self.k_true, self.d)));
        }
        if !(self.noise >= 0.0 && self.feature_jitter >= 0.0 && self.class_scale >= 0.0) {
            return Err(Error::InvalidArgument("noise scales must be non-negative".into()));
        }
        if self.objects < 2 || self.patches_per_object < PATCHES_PER_BATCH / 2 || self.images == 0 {
            return Err(Error::InvalidArgument(format!(
                "need ≥ 2 objects of ≥ {} patches and ≥ 1 image",
                PATCHES_PER_BATCH / 2
            )));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        if self.class_sharing {
            self.objects.div_ceil(2)
        } else {
            self.objects
        }
    }

    pub fn class_of(&self, object: usize) -> usize {
        if self.class_sharing {
            object / 2
        } else {
            object
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    /// Patch embeddings per image, `[side², d]`; padding rows are unlabeled.
    pub images: Vec<Matrix>,
    pub rasters: Vec<LabelRaster>,
    pub batches: Vec<PairBatch>,
    /// Orthonormal `k_true×d` basis of the planted binding subspace.
    pub w_true: Matrix,
    /// Binding code of each object, per image (`k_true` coordinates).
    pub codes: Vec<Vec<Vec<f64>>>,
}

pub(crate) fn gaussian_matrix(g: &mut rng::Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(g))
}

/// Random `rows×d` matrix with orthonormal rows.
pub fn random_orthonormal(g: &mut rng::Rng, rows: usize, d: usize) -> Matrix {
    loop {
        let q = orthonormalize_rows(&gaussian_matrix(g, rows, d));
        if q.rows() == rows {
            return q;
        }
    }
}

fn complement_projector(w: &Matrix) -> Matrix {
    let d = w.cols();
    Matrix::identity(d).sub(&w.t_matmul(w))
}

pub fn grid_side_for(patches: usize) -> usize {
    let mut s = (patches as f64).sqrt() as usize;
    while s * s < patches {
        s += 1;
    }
    s
}

/// Planted binding data with ground truth.
///
/// Each object gets a code `r·q_o` where the `q_o` are orthonormal in the
/// `k_true` binding coordinates (a fresh random frame per image, so object
/// identity is never tied to a fixed direction). Features live in the
/// orthogonal complement of the binding subspace: a class prototype plus
/// per-patch jitter. Objects fill the first `objects·patches_per_object`
/// grid cells; remaining cells are unlabeled background features.
pub fn gen_synthetic_embeddings(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let (d, k) = (spec.d, spec.k_true);
    let mut g = rng::rng(spec.seed);
    let w_true = random_orthonormal(&mut g, k, d);
    let pf = complement_projector(&w_true);
    let prototypes = pf.matmul_t(&gaussian_matrix(&mut g, spec.num_classes(), d).scale(spec.class_scale));
    let prototypes = prototypes.transpose();
    let n_obj = spec.objects * spec.patches_per_object;
    let side = grid_side_for(n_obj);
    let n = side * side;
    let (mut images, mut rasters, mut codes, mut batches) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for img in 0..spec.images {
        let mut gi = rng::rng(rng::derive(spec.seed, img as u64 + 1));
        let frame = if spec.objects <= k {
            random_orthonormal(&mut gi, k, k)
        } else {
            let m = gaussian_matrix(&mut gi, spec.objects, k);
            Matrix::from_fn(spec.objects, k, |i, j| m[(i, j)] / crate::tensor::norm(m.row(i)))
        };
        let obj_codes: Vec<Vec<f64>> = (0..spec.objects)
            .map(|o| frame.row(o).iter().map(|v| v * spec.binding_scale).collect())
            .collect();
        let jitter = gaussian_matrix(&mut gi, n, d).scale(spec.feature_jitter).matmul(&pf);
        let noise = gaussian_matrix(&mut gi, n, k).scale(spec.noise);
        let mut h = Matrix::zeros(n, d);
        let mut instance = vec![IGNORE_ID; n];
        let mut class = vec![IGNORE_ID; n];
        for p in 0..n {
            let row = h.row_mut(p);
            row.copy_from_slice(jitter.row(p));
            if p < n_obj {
                let o = p / spec.patches_per_object;
                let c = spec.class_of(o);
                instance[p] = o as i32;
                class[p] = c as i32;
                for (x, &m) in row.iter_mut().zip(prototypes.row(c)) {
                    *x += m;
                }
                let code: Vec<f64> = obj_codes[o].iter().zip(noise.row(p)).map(|(a, b)| a + b).collect();
                for (x, b) in row.iter_mut().zip(w_true.t_matvec(&code)) {
                    *x += b;
                }
            }
        }
        let raster = LabelRaster::new(format!("synthetic-{img:04}"), side, instance, class)?;
        batches.extend(sample_object_batches(
            &raster,
            img,
            2,
            PATCHES_PER_BATCH / 2,
            spec.batches_per_image,
            spec.class_sharing,
            rng::derive(spec.seed ^ 0xBA7C, img as u64),
        )?);
        images.push(h);
        rasters.push(raster);
        codes.push(obj_codes);
    }
    Ok(SyntheticData {
        images,
        rasters,
        batches,
        w_true,
        codes,
    })
}

/// Grid-aligned copies of one object with identical features and distinct
/// binding codes: the residual-delta setting.
#[derive(Debug, Clone)]
pub struct AlignedCopies {
    /// All patches of the scene, copies stacked in order.
    pub embeddings: Matrix,
    /// Aligned patch indices of each copy.
    pub copies: Vec<Vec<usize>>,
    pub w_true: Matrix,
}

pub fn gen_aligned_copies(
    d: usize,
    k_true: usize,
    copies: usize,
    patches: usize,
    noise: f64,
    binding_scale: f64,
    seed: u64,
) -> Result<AlignedCopies> {
    if k_true == 0 || k_true > d || copies == 0 || patches == 0 || noise < 0.0 {
        return Err(Error::InvalidArgument("invalid aligned-copy parameters".into()));
    }
    let mut g = rng::rng(seed);
    let w_true = random_orthonormal(&mut g, k_true, d);
    let pf = complement_projector(&w_true);
    let features = gaussian_matrix(&mut g, patches, d).matmul(&pf);
    let frame = if copies <= k_true {
        random_orthonormal(&mut g, copies, k_true)
    } else {
        gaussian_matrix(&mut g, copies, k_true)
    };
    let mut data = Vec::with_capacity(copies * patches * d);
    for c in 0..copies {
        for p in 0..patches {
            let code: Vec<f64> = frame
                .row(c)
                .iter()
                .map(|&v| v * binding_scale + noise * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut g))
                .collect();
            let b = w_true.t_matvec(&code);
            data.extend(features.row(p).iter().zip(&b).map(|(f, b)| f + b));
        }
    }
    Ok(AlignedCopies {
        embeddings: Matrix::from_vec(copies * patches, d, data)?,
        copies: (0..copies).map(|c| (c * patches..(c + 1) * patches).collect()).collect(),
        w_true,
    })
}

/// Axis-aligned object rectangle on the patch grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
    pub class: i32,
}

/// Raster with one instance per placement (ids in placement order).
/// With `background_class`, uncovered cells become one extra instance.
pub fn gen_toy_scene_labels(
    image_id: &str,
    side: usize,
    placements: &[Placement],
    background_class: Option<i32>,
) -> Result<LabelRaster> {
    let n = side * side;
    let mut instance = vec![IGNORE_ID; n];
    let mut class = vec![IGNORE_ID; n];
    for (id, p) in placements.iter().enumerate() {
        if p.height == 0 || p.width == 0 || p.row + p.height > side || p.col + p.width > side || p.class < 0 {
            return Err(Error::Labels(format!("placement {id} ({p:?}) does not fit a {side}×{side} grid")));
        }
        for r in p.row..p.row + p.height {
            for c in p.col..p.col + p.width {
                let cell = r * side + c;
                if instance[cell] != IGNORE_ID {
                    return Err(Error::Labels(format!(
                        "placements {} and {id} overlap at cell ({r}, {c})",
                        instance[cell]
                    )));
                }
                instance[cell] = id as i32;
                class[cell] = p.class;
            }
        }
    }
    if let Some(bg) = background_class {
        let bg_id = placements.len() as i32;
        for (i, c) in instance.iter_mut().zip(class.iter_mut()) {
            if *i == IGNORE_ID {
                *i = bg_id;
                *c = bg;
            }
        }
    }
    LabelRaster::new(image_id, side, instance, class)
}

/// Seeded image-level split: `(train, held_out)` image indices.
pub fn split_images(images: &[usize], held_out_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut ids: Vec<usize> = images.to_vec();
    ids.sort_unstable();
    ids.dedup();
    ids.shuffle(&mut rng::rng(seed));
    let n_test = if ids.len() < 2 {
        0
    } else {
        ((ids.len() as f64 * held_out_fraction).round() as usize).clamp(1, ids.len() - 1)
    };
    let test = ids.split_off(ids.len() - n_test);
    let (mut a, mut b) = (ids, test);
    a.sort_unstable();
    b.sort_unstable();
    (a, b)
}
