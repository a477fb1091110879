//! Stage implementations over a lazily loaded data context.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};

use vitbind::ablation::{
    binding_standin_bundle, check_dino_mode, eval_dino_loss, mirror_tokens, run_ablation, standin_sequences,
    uninformed_shuffle, AblationConfig, AblationInputs, AblationMode, AblationRow, AblationSettings, DinoEvalConfig,
    DEFAULT_ABLATION_LAYER,
};
use vitbind::analysis::{pair_score_groups, residual_delta_pca, same_diff_kde, score_map, stage_seed, CorrelationResult};
use vitbind::io::{
    load_images, load_labels, mirror_pixels, write_labels, ArchiveBuilder, LabelRaster, ModelBundle,
};
use vitbind::probes::{
    train_pair_probe, train_pointwise_class_probe, train_position_probe, write_curve_csv, CurvePoint,
    LabelKind, LayerAccuracyCurve, PairActs, ProbeFamily, ProbeWeights, TrainOutcome, TrainRecipe,
};
use vitbind::report;
use vitbind::rng;
use vitbind::supervision::{
    gen_aligned_copies, gen_synthetic_embeddings, sample_pair_batches, split_images, PairBatch, SyntheticData,
    SyntheticSpec, PATCHES_PER_BATCH,
};
use vitbind::tensor::{permutation_test, Matrix};
use vitbind::vit::{forward_with_trace, patch_embed, AttentionCapture, PatchSequence, TraceOptions};
use vitbind::{Error, Result};

use crate::config::{ExperimentConfig, Stage};
use crate::manifest::Manifest;

fn f6(v: f64) -> String {
    format!("{v:.6}")
}

/// Everything derived from the inputs, built on first use.
struct Data {
    bundle: ModelBundle,
    seqs: Vec<PatchSequence>,
    /// Mirrored crops of the first images for the distillation loss.
    mirrored: Vec<PatchSequence>,
    rasters: Vec<LabelRaster>,
    batches: Vec<PairBatch>,
    layers: BTreeSet<usize>,
    /// Sampled rows per layer, aligned with `batches`.
    sampled: BTreeMap<usize, Vec<Matrix>>,
    /// Full patch activations of the first `analysis.images` images per layer.
    full: BTreeMap<usize, Vec<Matrix>>,
    synthetic: Option<(SyntheticSpec, SyntheticData)>,
}

impl Data {
    fn side(&self) -> usize {
        self.bundle.arch.grid_side
    }

    fn acts(&self, layer: usize) -> Result<PairActs> {
        let x = self
            .sampled
            .get(&layer)
            .ok_or_else(|| Error::Config(format!("layer {layer} was not traced; add it to `layers`")))?;
        Ok(PairActs {
            layer,
            layer2: None,
            x: x.clone(),
            y: None,
        })
    }

    fn full(&self, layer: usize) -> Result<&[Matrix]> {
        self.full
            .get(&layer)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Config(format!("layer {layer} was not traced; add it to `layers`")))
    }
}

pub struct Context<'a> {
    cfg: &'a ExperimentConfig,
    out: PathBuf,
    manifest: &'a mut Manifest,
    data: Option<Data>,
    probes: HashMap<(ProbeFamily, usize), TrainOutcome>,
}

impl<'a> Context<'a> {
    pub fn new(cfg: &'a ExperimentConfig, out: &Path, manifest: &'a mut Manifest) -> Self {
        Self {
            cfg,
            out: out.to_path_buf(),
            manifest,
            data: None,
            probes: HashMap::new(),
        }
    }

    pub fn run_stage(&mut self, stage: Stage) -> Result<()> {
        info!("stage {stage}");
        match stage {
            Stage::Synth => self.synth(),
            Stage::Trace => self.trace(),
            Stage::ProbeTrain => self.probe_train(),
            Stage::ProbeSweep => self.probe_sweep(),
            Stage::Pca => self.pca(),
            Stage::Kde => self.kde(),
            Stage::AttnCorr => self.attn_corr(),
            Stage::PosProbe => self.pos_probe(),
            Stage::Ablate => self.ablate(),
            Stage::DinoLoss => self.dino_loss(),
            Stage::Report => self.report(),
        }
    }

    pub fn finish_stage(&mut self, stage: Stage) {
        self.manifest.stages.push(stage.name().to_string());
    }

    /// Create parents, write, then hash into the manifest.
    fn emit(&mut self, rel: impl AsRef<Path>, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
        let rel = rel.as_ref();
        let full = self.out.join(rel);
        if let Some(parent) = full.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        write(&full)?;
        self.manifest.record(&self.out, rel)
    }

    fn emit_text(&mut self, rel: impl AsRef<Path>, text: String) -> Result<()> {
        self.emit(rel, |p| std::fs::write(p, text).map_err(|e| Error::io(p, e)))
    }

    fn emit_csv(&mut self, rel: impl AsRef<Path>, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let mut text = header.join(",");
        text.push('\n');
        for r in rows {
            text.push_str(&r.join(","));
            text.push('\n');
        }
        self.emit_text(rel, text)
    }

    fn seed(&self, stage: &str) -> u64 {
        stage_seed(self.cfg.seed, stage)
    }

    fn recipe(&self, dim: usize) -> TrainRecipe {
        let base = match (&self.cfg.recipe, &self.cfg.synthetic) {
            (Some(r), _) => r.clone(),
            (None, Some(spec)) => TrainRecipe {
                k: spec.k_true,
                ..TrainRecipe::synthetic(0)
            },
            (None, None) => TrainRecipe::default(),
        };
        if base.k > dim {
            warn!("probe rank {} exceeds width {dim}; using {dim}", base.k);
        }
        if base.k >= dim {
            warn!("a full-rank probe turns binding ablations into token permutations");
        }
        TrainRecipe {
            seed: self.seed("probe"),
            k: base.k.min(dim),
            ..base
        }
    }

    // -----------------------------------------------------------------------
    // Data loading

    fn data(&mut self) -> Result<&Data> {
        if self.data.is_none() {
            let d = if let Some(spec) = &self.cfg.synthetic {
                self.load_synthetic(spec)?
            } else {
                self.load_model()?
            };
            self.data = Some(d);
        }
        Ok(self.data.as_ref().expect("loaded above"))
    }

    fn synthetic_spec(&self, spec: &SyntheticSpec) -> SyntheticSpec {
        SyntheticSpec {
            seed: self.seed("synth"),
            ..spec.clone()
        }
    }

    fn load_synthetic(&self, spec: &SyntheticSpec) -> Result<Data> {
        let spec = self.synthetic_spec(spec);
        let data = gen_synthetic_embeddings(&spec)?;
        let bundle = binding_standin_bundle(&data, 4.0, 3.0, self.seed("standin"))?;
        let seqs = standin_sequences(&data, &bundle)?;
        let n_dino = self.cfg.ablation.dino_images.min(seqs.len());
        let mirrored = seqs[..n_dino].iter().map(mirror_tokens).collect::<Result<_>>()?;
        let sampled = data
            .batches
            .iter()
            .map(|b| data.images[b.image].select_rows(&b.indices))
            .collect();
        let n_full = self.cfg.analysis.images.min(data.images.len());
        Ok(Data {
            bundle,
            seqs,
            mirrored,
            rasters: data.rasters.clone(),
            batches: data.batches.clone(),
            layers: BTreeSet::from([0]),
            sampled: BTreeMap::from([(0, sampled)]),
            full: BTreeMap::from([(0, data.images[..n_full].to_vec())]),
            synthetic: Some((spec, data)),
        })
    }

    fn load_model(&self) -> Result<Data> {
        let cfg = self.cfg;
        let (Some(bp), Some(ip), Some(lp)) = (&cfg.bundle, &cfg.images, &cfg.labels) else {
            return Err(Error::Config(
                "this stage needs `bundle`, `images` and `labels`, or a `synthetic` spec".into(),
            ));
        };
        let bundle = ModelBundle::load(bp)?;
        let depth = bundle.arch.depth;
        let labels: BTreeMap<String, LabelRaster> = load_labels(lp)?.into_iter().map(|r| (r.image_id.clone(), r)).collect();
        let mut pixels = Vec::new();
        let mut rasters = Vec::new();
        for im in load_images(ip)? {
            match labels.get(&im.id) {
                Some(r) => {
                    r.check_side(bundle.arch.grid_side)?;
                    pixels.push(im.pixels);
                    rasters.push(r.clone());
                }
                None => warn!("image `{}` has no label raster; skipped", im.id),
            }
            if cfg.max_images.is_some_and(|m| rasters.len() >= m) {
                break;
            }
        }
        if rasters.is_empty() {
            return Err(Error::Labels("no image has a matching label raster".into()));
        }
        let mut layers: BTreeSet<usize> = if cfg.layers.is_empty() {
            (0..=depth).collect()
        } else {
            cfg.layers.iter().copied().collect()
        };
        layers.extend(cfg.analysis.cross_layers.iter().flatten().copied());
        layers.extend(self.ablation_runs(depth).iter().map(|r| r.layer));
        if let Some(&bad) = layers.iter().find(|&&l| l > depth) {
            return Err(Error::Config(format!("layer {bad} exceeds model depth {depth}")));
        }
        let upto = *layers.last().expect("non-empty");
        let batches = sample_pair_batches(&rasters, PATCHES_PER_BATCH, self.seed("pairs"))?;
        let seqs: Vec<PatchSequence> = pixels.iter().map(|p| patch_embed(p, &bundle)).collect::<Result<_>>()?;
        let n_dino = cfg.ablation.dino_images.min(pixels.len());
        let mirrored = pixels[..n_dino]
            .iter()
            .map(|p| patch_embed(&mirror_pixels(p)?, &bundle))
            .collect::<Result<_>>()?;
        let n_full = cfg.analysis.images.min(seqs.len());
        let mut sampled: BTreeMap<usize, Vec<Matrix>> = layers.iter().map(|&l| (l, Vec::new())).collect();
        let mut full: BTreeMap<usize, Vec<Matrix>> = layers.iter().map(|&l| (l, Vec::new())).collect();
        let mut next_batch = 0;
        for (i, seq) in seqs.iter().enumerate() {
            let has_batch = batches.get(next_batch).is_some_and(|b| b.image == i);
            if !has_batch && i >= n_full {
                continue;
            }
            let trace = forward_with_trace(seq, &bundle, upto, &[], TraceOptions::default())?;
            for &l in &layers {
                let h = trace.patch_matrix(l)?;
                if has_batch {
                    sampled.get_mut(&l).expect("layer").push(h.select_rows(&batches[next_batch].indices));
                }
                if i < n_full {
                    full.get_mut(&l).expect("layer").push(h);
                }
            }
            if has_batch {
                next_batch += 1;
            }
        }
        info!("traced {} images, {} pair batches, layers {layers:?}", seqs.len(), batches.len());
        Ok(Data {
            bundle,
            seqs,
            mirrored,
            rasters,
            batches,
            layers,
            sampled,
            full,
            synthetic: None,
        })
    }

    fn ablation_runs(&self, depth: usize) -> Vec<AblationConfig> {
        if !self.cfg.ablation.runs.is_empty() {
            return self.cfg.ablation.runs.clone();
        }
        let layer = if self.cfg.synthetic.is_some() {
            0
        } else {
            DEFAULT_ABLATION_LAYER.min(depth.saturating_sub(1))
        };
        let seed = self.seed("ablate");
        vec![
            AblationConfig::uninformed(layer, 0.0, seed),
            AblationConfig::uninformed(layer, 0.5, seed),
            AblationConfig::uninformed(layer, 1.0, seed),
            AblationConfig::informed(layer, 0.5, seed),
        ]
    }

    // -----------------------------------------------------------------------
    // Probes

    fn train(&mut self, family: ProbeFamily, layer: usize) -> Result<TrainOutcome> {
        if let Some(out) = self.probes.get(&(family, layer)) {
            return Ok(out.clone());
        }
        let data = self.data()?;
        let acts = data.acts(layer)?;
        let dim = acts.x.first().map_or(0, Matrix::cols);
        let batches = data.batches.clone();
        let recipe = self.recipe(dim);
        let out = match family {
            ProbeFamily::ClassPointwise => train_pointwise_class_probe(&batches, &acts, &recipe, LabelKind::Class)?,
            _ => train_pair_probe(family, &batches, &acts, &recipe)?,
        };
        self.probes.insert((family, layer), out.clone());
        Ok(out)
    }

    fn quad(&mut self, layer: usize) -> Result<ProbeWeights> {
        Ok(self.train(ProbeFamily::Quad, layer)?.weights)
    }

    fn layers(&mut self) -> Result<Vec<usize>> {
        let cfg_layers = self.cfg.layers.clone();
        let data = self.data()?;
        Ok(if cfg_layers.is_empty() {
            data.layers.iter().copied().collect()
        } else {
            cfg_layers
        })
    }

    // -----------------------------------------------------------------------
    // Stages

    fn synth(&mut self) -> Result<()> {
        if self.cfg.synthetic.is_none() {
            return Err(Error::Config("the synth stage needs a `synthetic` spec".into()));
        }
        self.data()?;
        let (spec, data) = self.data.as_ref().and_then(|d| d.synthetic.clone()).expect("synthetic data");
        self.emit("synthetic/labels.vbt", |p| write_labels(p, &data.rasters))?;
        self.emit("synthetic/activations.vbt", |p| {
            let mut b = ArchiveBuilder::new();
            for (h, r) in data.images.iter().zip(&data.rasters) {
                b.add(format!("h/{}", r.image_id), h.to_tensor())?;
            }
            b.add("w_true", data.w_true.to_tensor())?;
            b.set_metadata("layer", 0.into());
            b.write(p)
        })?;
        let text = serde_json::to_string_pretty(&spec)? + "\n";
        self.emit_text("synthetic/spec.json", text)
    }

    fn trace(&mut self) -> Result<()> {
        let data = self.data()?;
        let mut b = ArchiveBuilder::new();
        let mut layers = Vec::new();
        for (&l, mats) in &data.full {
            layers.push(l);
            for (m, r) in mats.iter().zip(&data.rasters) {
                b.add(format!("h/{}/{l}", r.image_id), m.to_tensor())?;
            }
        }
        b.set_metadata("layers", serde_json::to_value(&layers)?);
        b.set_metadata("grid_side", data.side().into());
        self.emit("traces.vbt", |p| b.write(p))
    }

    fn probe_train(&mut self) -> Result<()> {
        let layers = self.layers()?;
        let mut rows = Vec::new();
        for family in self.cfg.families.clone() {
            if family == ProbeFamily::CrossLayer {
                continue;
            }
            for &l in &layers {
                let out = self.train(family, l)?;
                info!("{family} layer {l}: held-out {:.4}", out.held_out.accuracy);
                self.emit(format!("probes/{family}_l{l}.vbt"), |p| out.weights.save(p))?;
                rows.push(summary_row(family, l, None, &out));
            }
        }
        for [a, b] in self.cfg.analysis.cross_layers.clone() {
            let data = self.data()?;
            let acts = PairActs {
                layer: a,
                layer2: Some(b),
                x: data.acts(a)?.x,
                y: Some(data.acts(b)?.x),
            };
            let dim = acts.x.first().map_or(0, Matrix::cols);
            let batches = data.batches.clone();
            let out = train_pair_probe(ProbeFamily::CrossLayer, &batches, &acts, &self.recipe(dim))?;
            self.emit(format!("probes/cross_layer_l{a}_l{b}.vbt"), |p| out.weights.save(p))?;
            rows.push(summary_row(ProbeFamily::CrossLayer, a, Some(b), &out));
        }
        self.emit_csv(
            "probes/summary.csv",
            &["family", "layer", "layer2", "train_acc", "held_out_acc", "baseline", "delta_pp", "n_pairs"],
            &rows,
        )
    }

    fn probe_sweep(&mut self) -> Result<()> {
        let layers = self.layers()?;
        let mut points = Vec::new();
        for &l in &layers {
            let out = self.train(ProbeFamily::Quad, l)?;
            points.push(CurvePoint {
                layer: l,
                accuracy: out.held_out.accuracy,
                baseline: out.held_out.baseline,
                delta_pp: out.held_out.delta_pp,
            });
        }
        // Hidden states 0..=depth.
        let states = self.data()?.bundle.arch.depth + 1;
        let curve = LayerAccuracyCurve::from_points(points, states)?;
        info!("peak layer {} ({:.2})", curve.peak_layer, curve.peak_normalized);
        self.emit("sweep/curve.csv", |p| write_curve_csv(p, &curve))?;
        let svg = report::curve_svg("quadratic probe accuracy", &[("quad".to_string(), &curve)]);
        self.emit("sweep/curve.svg", |p| report::write_svg(p, &svg))
    }

    fn pca(&mut self) -> Result<()> {
        let k = self.cfg.analysis.pca_components;
        let mut results = Vec::new();
        if let Some(spec) = self.cfg.synthetic.clone() {
            let spec = self.synthetic_spec(&spec);
            let copies = gen_aligned_copies(
                spec.d,
                spec.k_true,
                3,
                spec.patches_per_object,
                spec.noise,
                spec.binding_scale,
                self.seed("pca"),
            )?;
            results.push((0, residual_delta_pca(&copies.embeddings, &copies.copies, k)?));
        } else {
            let copies = self.cfg.analysis.pca_copies.clone();
            if copies.is_empty() {
                return Err(Error::Unsupported("pca on model data needs `analysis.pca_copies`".into()));
            }
            for l in self.layers()? {
                let h = &self.data()?.full(l)?[0];
                results.push((l, residual_delta_pca(h, &copies, k)?));
            }
        }
        for (l, r) in results {
            self.emit(format!("pca/variance_l{l}.csv"), |p| report::write_pca_variance_csv(p, &r))?;
            self.emit(format!("pca/coords_l{l}.csv"), |p| report::write_pca_coords_csv(p, &r))?;
            let svg = report::pca_svg(&format!("residual deltas, layer {l}"), &r);
            self.emit(format!("pca/pca_l{l}.svg"), |p| report::write_svg(p, &svg))?;
        }
        Ok(())
    }

    fn kde(&mut self) -> Result<()> {
        for l in self.layers()? {
            let probe = self.quad(l)?;
            let data = self.data()?;
            let side = data.side();
            let mut pooled: Vec<(String, Vec<f64>)> = Vec::new();
            for (h, r) in data.full(l)?.iter().zip(&data.rasters) {
                for (name, scores) in pair_score_groups(h, &probe, r)? {
                    match pooled.iter_mut().find(|(n, _)| *n == name) {
                        Some((_, s)) => s.extend(scores),
                        None => pooled.push((name, scores)),
                    }
                }
            }
            let reference = data.rasters[0].labeled().first().copied();
            let map = match reference {
                Some(p) => Some(score_map(&data.full(l)?[0], &probe, p, side)?),
                None => None,
            };
            let curves = same_diff_kde(&pooled)?;
            self.emit(format!("kde/kde_l{l}.csv"), |p| report::write_kde_csv(p, &curves))?;
            let svg = report::kde_svg(&format!("pair scores, layer {l}"), &curves);
            self.emit(format!("kde/kde_l{l}.svg"), |p| report::write_svg(p, &svg))?;
            if let Some(map) = map {
                self.emit(format!("kde/score_map_l{l}.csv"), |p| report::write_score_map_csv(p, &map))?;
                let svg = report::svg_heatmap(&format!("score map, layer {l}"), &map, 0.0, 1.0);
                self.emit(format!("kde/score_map_l{l}.svg"), |p| report::write_svg(p, &svg))?;
            }
        }
        Ok(())
    }

    fn attn_corr(&mut self) -> Result<()> {
        let depth = self.data()?.bundle.arch.depth;
        let layers: Vec<usize> = self.layers()?.into_iter().filter(|&l| l < depth).collect();
        if layers.is_empty() {
            return Err(Error::Config(format!("attention correlation needs a layer below depth {depth}")));
        }
        let upto = layers.iter().max().expect("non-empty") + 1;
        let n_perm = self.cfg.analysis.permutations;
        let n_img = self.cfg.analysis.images;
        let mut probes = BTreeMap::new();
        for &l in &layers {
            probes.insert(l, self.quad(l)?);
        }
        let data = self.data()?;
        let side = data.side();
        let n = side * side;
        let grid_distance = |i: usize, j: usize| {
            let (ri, ci, rj, cj) = ((i / side) as f64, (i % side) as f64, (j / side) as f64, (j % side) as f64);
            ((ri - rj).powi(2) + (ci - cj).powi(2)).sqrt()
        };
        let mut distances = Vec::new();
        let mut pooled: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for seq in data.seqs.iter().take(n_img) {
            let opts = TraceOptions {
                attention: AttentionCapture::MeanOnly,
            };
            let trace = forward_with_trace(seq, &data.bundle, upto, &[], opts)?;
            for i in 0..n {
                distances.extend((0..n).filter(|&j| j != i).map(|j| grid_distance(i, j)));
            }
            for &l in &layers {
                let h = trace.patch_matrix(l)?;
                let s = probes[&l].score_matrix(&h, &h)?;
                let a = trace.patch_attention(l)?;
                let (pa, ps) = pooled.entry(l).or_default();
                for i in 0..n {
                    for j in 0..n {
                        if i != j {
                            pa.push(a[(i, j)]);
                            ps.push(s[(i, j)]);
                        }
                    }
                }
            }
        }
        let mut results = Vec::new();
        let mut binned = Vec::new();
        for (l, (a, s)) in pooled {
            let t = permutation_test(&a, &s, n_perm, stage_seed(self.seed("attn-corr"), &l.to_string()))?;
            // Mean attention and score per rounded patch distance.
            let mut bins: BTreeMap<u64, (usize, f64, f64)> = BTreeMap::new();
            for ((&dist, &av), &sv) in distances.iter().zip(&a).zip(&s) {
                let b = bins.entry(dist.round() as u64).or_default();
                *b = (b.0 + 1, b.1 + av, b.2 + sv);
            }
            for (dist, (count, asum, ssum)) in bins {
                binned.push(vec![
                    l.to_string(),
                    dist.to_string(),
                    count.to_string(),
                    f6(asum / count as f64),
                    f6(ssum / count as f64),
                ]);
            }
            results.push(CorrelationResult {
                layer: l,
                r: t.r,
                p_value: t.p_value,
                n_pairs: a.len(),
                n_perm,
                distances: distances.clone(),
            });
        }
        self.emit("attention/correlation.csv", |p| report::write_correlation_csv(p, &results))?;
        self.emit_csv(
            "attention/by_distance.csv",
            &["layer", "distance", "n_pairs", "mean_attention", "mean_score"],
            &binned,
        )?;
        let svg = report::correlation_svg("attention vs pair score", &results);
        self.emit("attention/correlation.svg", |p| report::write_svg(p, &svg))
    }

    fn pos_probe(&mut self) -> Result<()> {
        let a = &self.cfg.analysis;
        let (per_image, held_out) = (a.position_per_image, a.position_held_out);
        let seed = self.seed("pos-probe");
        let mut rows = Vec::new();
        let mut series = Vec::new();
        for l in self.layers()? {
            let data = self.data()?;
            let imgs = data.full(l)?;
            let side = data.side();
            let fit = train_position_probe(imgs, side, l, per_image, false, held_out, seed)?;
            let control = train_position_probe(imgs, side, l, per_image, true, held_out, seed)?;
            rows.push(vec![
                l.to_string(),
                f6(fit.rmse),
                f6(fit.rmse_axes[0]),
                f6(fit.rmse_axes[1]),
                f6(control.rmse),
            ]);
            series.push((l as f64, fit.rmse));
        }
        self.emit_csv("position/rmse.csv", &["layer", "rmse", "rmse_x", "rmse_y", "control_rmse"], &rows)?;
        let svg = report::svg_lines("position decoding", "layer", "RMSE", &[("rmse".to_string(), series)]);
        self.emit("position/rmse.svg", |p| report::write_svg(p, &svg))
    }

    fn split(&mut self) -> Result<(Vec<usize>, Vec<usize>)> {
        let frac = self.cfg.ablation.held_out_fraction;
        let seed = self.seed("ablate-split");
        let n = self.data()?.seqs.len();
        let all: Vec<usize> = (0..n).collect();
        let (train_imgs, eval) = split_images(&all, frac, seed);
        if eval.is_empty() || train_imgs.is_empty() {
            return Err(Error::Config(format!("{n} images cannot be split for head retraining")));
        }
        Ok((train_imgs, eval))
    }

    fn ablate(&mut self) -> Result<()> {
        let depth = self.data()?.bundle.arch.depth;
        let runs = self.ablation_runs(depth);
        let (train_imgs, eval) = self.split()?;
        let head_recipe = match (&self.cfg.ablation.head_recipe, &self.cfg.synthetic) {
            (Some(r), _) => r.clone(),
            (None, Some(_)) => TrainRecipe {
                batch_size: 4,
                ..TrainRecipe::synthetic(0)
            },
            (None, None) => TrainRecipe::default(),
        };
        let settings = AblationSettings {
            recipe: TrainRecipe {
                seed: self.seed("heads"),
                ..head_recipe
            },
            instance: self.cfg.ablation.instance,
            dino: None,
        };
        let mut rows: Vec<AblationRow> = Vec::new();
        for run in runs {
            let probe = self.quad(run.layer)?;
            let data = self.data()?;
            let inputs = AblationInputs {
                bundle: &data.bundle,
                seqs: &data.seqs,
                rasters: &data.rasters,
                probe: &probe,
                train: &train_imgs,
                eval: &eval,
                dino_crops: None,
            };
            let row = run_ablation(&inputs, &run, &settings)?;
            info!("{} {}: seg {:.4}", row.mode, row.parameter, row.seg_acc);
            rows.push(row);
        }
        self.emit("ablation/results.csv", |p| report::write_ablation_csv(p, &rows))?;
        let svg = report::ablation_svg("ablation", &rows);
        self.emit("ablation/results.svg", |p| report::write_svg(p, &svg))
    }

    fn dino_loss(&mut self) -> Result<()> {
        let depth = self.data()?.bundle.arch.depth;
        let runs: Vec<AblationConfig> = self
            .ablation_runs(depth)
            .into_iter()
            .filter(|r| match check_dino_mode(r) {
                Ok(()) => true,
                Err(e) => {
                    warn!("skipping {}: {e}", r.mode.name());
                    false
                }
            })
            .collect();
        let mut rows = Vec::new();
        for run in runs {
            let probe = self.quad(run.layer)?;
            let data = self.data()?;
            let crops: Vec<Vec<PatchSequence>> = data
                .seqs
                .iter()
                .zip(&data.mirrored)
                .map(|(a, b)| vec![a.clone(), b.clone()])
                .collect();
            let cfg = DinoEvalConfig::for_bundle(&data.bundle);
            let loss = eval_dino_loss(&data.bundle, &crops, &cfg, |i, j, clean| {
                if run.is_identity() {
                    return Ok(Vec::new());
                }
                let c = AblationConfig {
                    seed: rng::derive(rng::derive(run.seed, i as u64), j as u64),
                    ..run
                };
                Ok(vec![uninformed_shuffle(clean, &probe, &c)?])
            })?;
            let AblationMode::Uninformed { ratio } = run.mode else {
                unreachable!("filtered above")
            };
            info!("shuffle ratio {ratio}: loss {loss:.6}");
            rows.push(vec![run.layer.to_string(), f6(ratio), f6(loss)]);
        }
        self.emit_csv("dino/loss.csv", &["layer", "ratio", "loss"], &rows)
    }

    fn report(&mut self) -> Result<()> {
        let mut csvs = Vec::new();
        collect_csv(&self.out, &self.out, &mut csvs)?;
        csvs.sort();
        let mut md = String::from("# vitbind report\n");
        for rel in &csvs {
            let path = self.out.join(rel);
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let mut lines = text.lines();
            let Some(header) = lines.next() else { continue };
            let cols = header.split(',').count();
            let _ = write!(md, "\n## {}\n\n| {} |\n|{}\n", rel.display(), header.replace(',', " | "), "---|".repeat(cols));
            let body: Vec<&str> = lines.collect();
            for line in body.iter().take(40) {
                let _ = writeln!(md, "| {} |", line.replace(',', " | "));
            }
            if body.len() > 40 {
                let _ = writeln!(md, "\n{} more rows\n", body.len() - 40);
            }
        }
        self.emit_text("report.md", md)
    }
}

fn summary_row(family: ProbeFamily, layer: usize, layer2: Option<usize>, out: &TrainOutcome) -> Vec<String> {
    vec![
        family.to_string(),
        layer.to_string(),
        layer2.map(|l| l.to_string()).unwrap_or_default(),
        f6(out.train.accuracy),
        f6(out.held_out.accuracy),
        f6(out.held_out.baseline),
        f6(out.held_out.delta_pp),
        out.held_out.n_pairs.to_string(),
    ]
}

fn collect_csv(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for e in entries {
        let e = e.map_err(|e| Error::io(dir, e))?;
        let p = e.path();
        if p.is_dir() {
            collect_csv(root, &p, out)?;
        } else if p.extension().is_some_and(|x| x == "csv") {
            out.push(p.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}
