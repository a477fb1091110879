//! Frozen ViT encoder with per-layer tracing and activation hooks.
//!
//! Layer indexing: `h^(0)` is the embedded sequence and block `ℓ` (0-based)
//! reads `h^(ℓ)` and writes `h^(ℓ+1)`. A hook at layer `ℓ` edits `h^(ℓ)`
//! before block `ℓ` consumes it. In a trace, `hidden[ℓ]` is `h^(ℓ)` as
//! consumed (after any hook) and `blocks[ℓ]` holds the post-attention state
//! and attention weights of block `ℓ`.

use crate::error::{Error, Result};
use crate::io::{archive::ArchiveBuilder, Activation, LayerWeights, ModelBundle, NormPlacement, TensorArchive};
use crate::par;
use crate::tensor::kernels::{add_scaled, gelu, layer_norm, linear, map_inplace, multi_head_attention};
use crate::tensor::{DenseTensor, Matrix};

/// Token embeddings entering the first block.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence {
    /// `[tokens, d]`; the class token, when present, is row 0.
    pub tokens: DenseTensor,
    pub grid_side: usize,
    pub class_token: bool,
}

impl PatchSequence {
    pub fn new(tokens: DenseTensor, grid_side: usize, class_token: bool) -> Result<Self> {
        let (t, _) = tokens.dims2()?;
        let expected = grid_side * grid_side + usize::from(class_token);
        if t != expected {
            return Err(Error::InvalidArgument(format!(
                "{t} tokens for a {grid_side}×{grid_side} grid (class token: {class_token})"
            )));
        }
        Ok(Self {
            tokens,
            grid_side,
            class_token,
        })
    }

    /// Row of the first patch token.
    pub fn patch_offset(&self) -> usize {
        usize::from(self.class_token)
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side * self.grid_side
    }
}

/// Split a `[C, H, W]` image into row-major patches of `C·p·p` features,
/// flattened channel-major to match a convolutional patch embedding.
pub fn patchify(image: &DenseTensor, patch: usize) -> Result<(DenseTensor, usize)> {
    let (c, h, w) = match image.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::InvalidArgument(format!("image must be [C, H, W], got {s:?}"))),
    };
    if h != w || patch == 0 || h % patch != 0 {
        return Err(Error::InvalidArgument(format!(
            "image side {h}×{w} is not a square multiple of the patch size {patch}"
        )));
    }
    let side = h / patch;
    let feat = c * patch * patch;
    let src = image.data();
    let mut out = vec![0f32; side * side * feat];
    for (pi, row) in out.chunks_mut(feat).enumerate() {
        let (gy, gx) = (pi / side, pi % side);
        let mut k = 0;
        for ch in 0..c {
            for py in 0..patch {
                let base = ch * h * w + (gy * patch + py) * w + gx * patch;
                row[k..k + patch].copy_from_slice(&src[base..base + patch]);
                k += patch;
            }
        }
    }
    Ok((DenseTensor::new(vec![side * side, feat], out)?, side))
}

/// Embed raw pixels: linear patch projection, class token, positional add.
pub fn patch_embed(image: &DenseTensor, bundle: &ModelBundle) -> Result<PatchSequence> {
    let arch = &bundle.arch;
    match image.shape() {
        [c, h, w] if *c == arch.in_chans && *h == arch.image_side() && *w == arch.image_side() => {}
        s => {
            return Err(Error::InvalidArgument(format!(
                "image of shape {s:?} does not match the model input [{}, {side}, {side}]",
                arch.in_chans,
                side = arch.image_side()
            )))
        }
    }
    let (patches, _) = patchify(image, arch.patch_size)?;
    embed_patches(&patches, bundle)
}

/// Embed pre-flattened patches `[grid², C·p·p]`.
pub fn embed_patches(patches: &DenseTensor, bundle: &ModelBundle) -> Result<PatchSequence> {
    let arch = &bundle.arch;
    let expected = [arch.patches(), arch.patch_features()];
    if patches.shape() != expected {
        return Err(Error::shape("patch pixels", &expected, patches.shape()));
    }
    let e = linear(patches, &bundle.patch_w, bundle.patch_b.as_ref());
    let d = arch.dim;
    let off = usize::from(arch.class_token);
    let mut tokens = vec![0f32; arch.tokens() * d];
    if let Some(cls) = &bundle.cls_token {
        tokens[..d].copy_from_slice(cls.data());
    }
    tokens[off * d..].copy_from_slice(e.data());
    let pos = bundle.pos_embed.data();
    for (t, p) in tokens.iter_mut().zip(pos) {
        *t = (*t as f64 + *p as f64) as f32;
    }
    let tokens = DenseTensor::new(vec![arch.tokens(), d], tokens)?;
    if !tokens.is_finite() {
        return Err(Error::ForwardNonFinite {
            layer: 0,
            sublayer: "embedding",
        });
    }
    PatchSequence::new(tokens, arch.grid_side, arch.class_token)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionCapture {
    #[default]
    None,
    MeanOnly,
    PerHead,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TraceOptions {
    pub attention: AttentionCapture,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps {
    /// Head-mean weights `[tokens, tokens]`.
    pub mean: DenseTensor,
    /// Per-head weights `[heads, tokens, tokens]` when captured.
    pub per_head: Option<DenseTensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockTrace {
    /// Post-attention state `s`.
    pub post_attn: DenseTensor,
    pub attention: Option<AttentionMaps>,
}

pub struct BlockOutput {
    pub out: DenseTensor,
    pub post_attn: DenseTensor,
    /// Per-head attention `[heads, tokens, tokens]`.
    pub attention: DenseTensor,
}

fn check_finite(t: &DenseTensor, layer: usize, sublayer: &'static str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::ForwardNonFinite { layer, sublayer })
    }
}

fn attention_sublayer(x: &DenseTensor, lw: &LayerWeights, heads: usize) -> (DenseTensor, DenseTensor) {
    let q = linear(x, &lw.q.0, Some(&lw.q.1));
    let k = linear(x, &lw.k.0, Some(&lw.k.1));
    let v = linear(x, &lw.v.0, Some(&lw.v.1));
    let (o, probs) = multi_head_attention(&q, &k, &v, heads);
    (linear(&o, &lw.proj.0, Some(&lw.proj.1)), probs)
}

fn mlp_sublayer(x: &DenseTensor, lw: &LayerWeights, act: Activation) -> DenseTensor {
    let mut hdn = linear(x, &lw.fc1.0, Some(&lw.fc1.1));
    match act {
        Activation::Gelu => map_inplace(&mut hdn, gelu),
        Activation::Relu => map_inplace(&mut hdn, |v| v.max(0.0)),
    }
    linear(&hdn, &lw.fc2.0, Some(&lw.fc2.1))
}

/// One encoder block.
///
/// Post-norm: `s = LN(h + MHA(h))`, `h' = LN(s + FFN(s))`.
/// Pre-norm: `s = h + γ₁·MHA(LN(h))`, `h' = s + γ₂·FFN(LN(s))`.
pub fn encoder_layer_forward(
    tokens: &DenseTensor,
    lw: &LayerWeights,
    bundle: &ModelBundle,
    layer: usize,
) -> Result<BlockOutput> {
    let arch = &bundle.arch;
    let eps = arch.layer_norm_eps;
    let (s, probs, out) = match arch.norm {
        NormPlacement::Post => {
            let (a, probs) = attention_sublayer(tokens, lw, arch.heads);
            check_finite(&a, layer, "attention")?;
            let s = layer_norm(&add_scaled(tokens, &a, None), &lw.norm1.0, &lw.norm1.1, eps);
            let f = mlp_sublayer(&s, lw, arch.activation);
            check_finite(&f, layer, "mlp")?;
            let out = layer_norm(&add_scaled(&s, &f, None), &lw.norm2.0, &lw.norm2.1, eps);
            (s, probs, out)
        }
        NormPlacement::Pre => {
            let x = layer_norm(tokens, &lw.norm1.0, &lw.norm1.1, eps);
            let (a, probs) = attention_sublayer(&x, lw, arch.heads);
            check_finite(&a, layer, "attention")?;
            let s = add_scaled(tokens, &a, lw.ls1.as_ref());
            let x = layer_norm(&s, &lw.norm2.0, &lw.norm2.1, eps);
            let f = mlp_sublayer(&x, lw, arch.activation);
            check_finite(&f, layer, "mlp")?;
            let out = add_scaled(&s, &f, lw.ls2.as_ref());
            (s, probs, out)
        }
    };
    check_finite(&out, layer, "residual")?;
    Ok(BlockOutput {
        out,
        post_attn: s,
        attention: probs,
    })
}

/// Edit applied to `h^(layer)`.
#[derive(Debug, Clone, PartialEq)]
pub enum HookEdit {
    /// Replace the whole `[tokens, d]` state.
    Replace(DenseTensor),
    /// Add `deltas[r]` to token row `rows[r]`; accumulation is in f64.
    Delta { rows: Vec<usize>, deltas: Matrix },
}

#[derive(Debug, Clone, PartialEq)]
pub struct HookPlan {
    pub layer: usize,
    pub edit: HookEdit,
}

impl HookPlan {
    pub fn replace(layer: usize, tokens: DenseTensor) -> Self {
        Self {
            layer,
            edit: HookEdit::Replace(tokens),
        }
    }

    pub fn delta(layer: usize, rows: Vec<usize>, deltas: Matrix) -> Self {
        Self {
            layer,
            edit: HookEdit::Delta { rows, deltas },
        }
    }

    /// True when the plan cannot change anything.
    pub fn is_noop(&self) -> bool {
        matches!(&self.edit, HookEdit::Delta { rows, .. } if rows.is_empty())
    }

    fn validate(&self, tokens: usize, d: usize, depth: usize) -> Result<()> {
        if self.layer >= depth {
            return Err(Error::InvalidArgument(format!(
                "hook layer {} is out of range for depth {depth}",
                self.layer
            )));
        }
        match &self.edit {
            HookEdit::Replace(t) => {
                if t.shape() != [tokens, d] {
                    return Err(Error::shape("hook replacement", &[tokens, d], t.shape()));
                }
                if !t.is_finite() {
                    return Err(Error::NonFinite("hook replacement".into()));
                }
            }
            HookEdit::Delta { rows, deltas } => {
                if deltas.rows() != rows.len() || deltas.cols() != d {
                    return Err(Error::shape("hook delta", &[rows.len(), d], &[deltas.rows(), deltas.cols()]));
                }
                if let Some(&r) = rows.iter().find(|&&r| r >= tokens) {
                    return Err(Error::InvalidArgument(format!("hook row {r} out of range ({tokens} tokens)")));
                }
                let mut sorted = rows.clone();
                sorted.sort_unstable();
                if sorted.windows(2).any(|w| w[0] == w[1]) {
                    return Err(Error::InvalidArgument("hook delta repeats a row".into()));
                }
                if !deltas.is_finite() {
                    return Err(Error::NonFinite("hook delta".into()));
                }
            }
        }
        Ok(())
    }

    fn apply(&self, h: &mut DenseTensor) {
        match &self.edit {
            HookEdit::Replace(t) => *h = t.clone(),
            HookEdit::Delta { rows, deltas } => {
                for (r, &row) in rows.iter().enumerate() {
                    for (x, &dv) in h.row_mut(row).iter_mut().zip(deltas.row(r)) {
                        *x = (*x as f64 + dv) as f32;
                    }
                }
            }
        }
    }
}

/// Residual-stream trace of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// `h^(0) ..= h^(upto)`.
    pub hidden: Vec<DenseTensor>,
    pub blocks: Vec<BlockTrace>,
    pub grid_side: usize,
    pub class_token: bool,
}

impl LayerTrace {
    pub fn upto(&self) -> usize {
        self.blocks.len()
    }

    pub fn patch_offset(&self) -> usize {
        usize::from(self.class_token)
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side * self.grid_side
    }

    /// Patch-token rows of `h^(layer)` as an f64 matrix (class token dropped).
    pub fn patch_matrix(&self, layer: usize) -> Result<Matrix> {
        let h = self.hidden.get(layer).ok_or_else(|| {
            Error::InvalidArgument(format!("layer {layer} not traced (have 0..={})", self.upto()))
        })?;
        Matrix::from_tensor(&h.skip_rows(self.patch_offset())?)
    }

    /// Head-mean attention of block `block` restricted to patch tokens.
    pub fn patch_attention(&self, block: usize) -> Result<Matrix> {
        let maps = self
            .blocks
            .get(block)
            .and_then(|b| b.attention.as_ref())
            .ok_or_else(|| Error::InvalidArgument(format!("attention for block {block} was not captured")))?;
        let t = maps.mean.shape()[0];
        let off = self.patch_offset();
        let n = t - off;
        Ok(Matrix::from_fn(n, n, |i, j| maps.mean.data()[(i + off) * t + j + off] as f64))
    }

    pub fn class_output(&self, layer: usize) -> Option<&[f32]> {
        if self.class_token {
            self.hidden.get(layer).map(|h| h.row(0))
        } else {
            None
        }
    }

    /// Store under `{prefix}/h/{ℓ}`, `{prefix}/s/{ℓ}` and `{prefix}/attn/{ℓ}`.
    pub fn add_to(&self, builder: &mut ArchiveBuilder, prefix: &str) -> Result<()> {
        for (l, h) in self.hidden.iter().enumerate() {
            builder.add(format!("{prefix}/h/{l}"), h.clone())?;
        }
        for (l, b) in self.blocks.iter().enumerate() {
            builder.add(format!("{prefix}/s/{l}"), b.post_attn.clone())?;
            if let Some(a) = &b.attention {
                builder.add(format!("{prefix}/attn_mean/{l}"), a.mean.clone())?;
                if let Some(ph) = &a.per_head {
                    builder.add(format!("{prefix}/attn/{l}"), ph.clone())?;
                }
            }
        }
        Ok(())
    }

    /// Inverse of [`LayerTrace::add_to`].
    pub fn from_archive(archive: &TensorArchive, prefix: &str, grid_side: usize, class_token: bool) -> Result<Self> {
        let mut hidden = Vec::new();
        while let Some(h) = archive.get_opt(&format!("{prefix}/h/{}", hidden.len()))? {
            hidden.push(h);
        }
        if hidden.is_empty() {
            return Err(Error::MissingTensor(format!("{prefix}/h/0")));
        }
        let mut blocks = Vec::new();
        for l in 0..hidden.len() - 1 {
            let post_attn = archive.get(&format!("{prefix}/s/{l}"))?;
            let mean = archive.get_opt(&format!("{prefix}/attn_mean/{l}"))?;
            let per_head = archive.get_opt(&format!("{prefix}/attn/{l}"))?;
            blocks.push(BlockTrace {
                post_attn,
                attention: mean.map(|mean| AttentionMaps { mean, per_head }),
            });
        }
        let tokens = grid_side * grid_side + usize::from(class_token);
        if let Some(h) = hidden.iter().find(|h| h.shape().first() != Some(&tokens)) {
            return Err(Error::shape(format!("{prefix}/h"), &[tokens], &h.shape()[..1]));
        }
        Ok(Self {
            hidden,
            blocks,
            grid_side,
            class_token,
        })
    }
}

fn head_mean(probs: &DenseTensor) -> DenseTensor {
    let (heads, t) = (probs.shape()[0], probs.shape()[1]);
    let mut out = vec![0f32; t * t];
    par::for_each_chunk_mut(&mut out, t.max(1), |i, row| {
        for (j, o) in row.iter_mut().enumerate() {
            let s: f64 = (0..heads).map(|h| probs.data()[(h * t + i) * t + j] as f64).sum();
            *o = (s / heads as f64) as f32;
        }
    });
    DenseTensor::new(vec![t, t], out).expect("head mean shape")
}

fn check_hooks(hooks: &[HookPlan], tokens: usize, d: usize, depth: usize) -> Result<()> {
    for w in hooks.windows(2) {
        if w[0].layer == w[1].layer {
            return Err(Error::ConflictingHooks(w[0].layer));
        }
        if w[0].layer > w[1].layer {
            return Err(Error::InvalidArgument("hooks must be sorted by layer".into()));
        }
    }
    hooks.iter().try_for_each(|h| h.validate(tokens, d, depth))
}

/// Run blocks `0..upto`, applying hooks and recording the trace.
pub fn forward_with_trace(
    seq: &PatchSequence,
    bundle: &ModelBundle,
    upto: usize,
    hooks: &[HookPlan],
    opts: TraceOptions,
) -> Result<LayerTrace> {
    let arch = &bundle.arch;
    if upto > arch.depth {
        return Err(Error::InvalidArgument(format!("upto layer {upto} exceeds depth {}", arch.depth)));
    }
    if seq.tokens.shape() != [arch.tokens(), arch.dim] {
        return Err(Error::shape("token sequence", &[arch.tokens(), arch.dim], seq.tokens.shape()));
    }
    check_hooks(hooks, arch.tokens(), arch.dim, arch.depth)?;
    let mut hooks = hooks.iter().peekable();
    let mut h = seq.tokens.clone();
    let mut hidden = Vec::with_capacity(upto + 1);
    let mut blocks = Vec::with_capacity(upto);
    for layer in 0..=upto {
        if let Some(hook) = hooks.next_if(|hk| hk.layer == layer) {
            hook.apply(&mut h);
        }
        if layer == upto {
            hidden.push(h);
            break;
        }
        let bo = encoder_layer_forward(&h, &bundle.layers[layer], bundle, layer)?;
        let attention = match opts.attention {
            AttentionCapture::None => None,
            AttentionCapture::MeanOnly => Some(AttentionMaps {
                mean: head_mean(&bo.attention),
                per_head: None,
            }),
            AttentionCapture::PerHead => Some(AttentionMaps {
                mean: head_mean(&bo.attention),
                per_head: Some(bo.attention),
            }),
        };
        blocks.push(BlockTrace {
            post_attn: bo.post_attn,
            attention,
        });
        hidden.push(std::mem::replace(&mut h, bo.out));
    }
    Ok(LayerTrace {
        hidden,
        blocks,
        grid_side: seq.grid_side,
        class_token: seq.class_token,
    })
}

/// Plain forward pass: `h^(depth)` only.
pub fn forward(seq: &PatchSequence, bundle: &ModelBundle) -> Result<DenseTensor> {
    let mut h = seq.tokens.clone();
    for (l, lw) in bundle.layers.iter().enumerate() {
        h = encoder_layer_forward(&h, lw, bundle, l)?.out;
    }
    Ok(h)
}

/// Final-layer output with the bundle's final norm applied when present.
pub fn final_features(trace: &LayerTrace, bundle: &ModelBundle) -> Result<DenseTensor> {
    if trace.upto() != bundle.arch.depth {
        return Err(Error::InvalidArgument(format!(
            "trace stops at layer {} but the model has {} blocks",
            trace.upto(),
            bundle.arch.depth
        )));
    }
    let h = trace.hidden.last().expect("trace has at least h^(0)");
    Ok(match &bundle.final_norm {
        Some((g, b)) => layer_norm(h, g, b, bundle.arch.layer_norm_eps),
        None => h.clone(),
    })
}

/// Trace many sequences in parallel; `hooks(i)` supplies the plan for item `i`.
pub fn trace_many<F>(
    seqs: &[PatchSequence],
    bundle: &ModelBundle,
    upto: usize,
    opts: TraceOptions,
    hooks: F,
) -> Result<Vec<LayerTrace>>
where
    F: Fn(usize) -> Vec<HookPlan> + Sync + Send,
{
    let idx: Vec<usize> = (0..seqs.len()).collect();
    par::map_slice(&idx, |&i| forward_with_trace(&seqs[i], bundle, upto, &hooks(i), opts))
        .into_iter()
        .collect()
}

/// Largest element-wise deviation of one traced tensor from its golden dump.
#[derive(Debug, Clone, PartialEq)]
pub struct GoldenCheck {
    pub name: String,
    pub max_abs_diff: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoldenReport {
    pub checks: Vec<GoldenCheck>,
    pub tolerance: f64,
}

impl GoldenReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    pub fn worst(&self) -> Option<&GoldenCheck> {
        self.checks
            .iter()
            .max_by(|a, b| a.max_abs_diff.total_cmp(&b.max_abs_diff))
    }
}

fn compare(name: String, ours: &DenseTensor, golden: &DenseTensor, tol: f64) -> Result<GoldenCheck> {
    if ours.shape() != golden.shape() {
        return Err(Error::shape(name, golden.shape(), ours.shape()));
    }
    let max_abs_diff = ours
        .data()
        .iter()
        .zip(golden.data())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .fold(0.0, f64::max);
    Ok(GoldenCheck {
        name,
        max_abs_diff,
        passed: max_abs_diff <= tol,
    })
}

/// Replay golden inputs and compare every dumped tensor.
///
/// Golden entries live under `golden/{image}/`: `pixels` `[C, H, W]`,
/// `embed` `[tokens, d]`, and optionally `h/{ℓ}`, `s/{ℓ}`, `attn/{ℓ}`
/// `[heads, tokens, tokens]` for any subset of layers.
pub fn verify_golden(golden: &TensorArchive, bundle: &ModelBundle, tolerance: f64) -> Result<GoldenReport> {
    let mut images: Vec<String> = golden
        .names()
        .filter_map(|n| n.strip_prefix("golden/").and_then(|r| r.strip_suffix("/pixels")))
        .map(str::to_string)
        .collect();
    images.sort();
    if images.is_empty() {
        return Err(Error::MissingTensor("golden/*/pixels".into()));
    }
    let depth = bundle.arch.depth;
    let mut checks = Vec::new();
    for img in images {
        let p = format!("golden/{img}");
        let seq = patch_embed(&golden.get(&format!("{p}/pixels"))?, bundle)?;
        if let Some(e) = golden.get_opt(&format!("{p}/embed"))? {
            checks.push(compare(format!("{p}/embed"), &seq.tokens, &e, tolerance)?);
        }
        let trace = forward_with_trace(
            &seq,
            bundle,
            depth,
            &[],
            TraceOptions {
                attention: AttentionCapture::PerHead,
            },
        )?;
        for l in 0..=depth {
            if let Some(g) = golden.get_opt(&format!("{p}/h/{l}"))? {
                checks.push(compare(format!("{p}/h/{l}"), &trace.hidden[l], &g, tolerance)?);
            }
            if l == depth {
                break;
            }
            if let Some(g) = golden.get_opt(&format!("{p}/s/{l}"))? {
                checks.push(compare(format!("{p}/s/{l}"), &trace.blocks[l].post_attn, &g, tolerance)?);
            }
            if let Some(g) = golden.get_opt(&format!("{p}/attn/{l}"))? {
                let ours = trace.blocks[l]
                    .attention
                    .as_ref()
                    .and_then(|a| a.per_head.as_ref())
                    .expect("per-head capture requested");
                checks.push(compare(format!("{p}/attn/{l}"), ours, &g, tolerance)?);
            }
        }
    }
    Ok(GoldenReport { checks, tolerance })
}
