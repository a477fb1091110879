//! Model bundles: encoder architecture plus weights resolved from an archive.
//!
//! Weight matrices use the row-vector convention `y = x·W + b`, so a linear
//! map from `in` to `out` features is stored as `[in, out]`.
//!
//! Tensor names:
//!
//! | name | shape |
//! |---|---|
//! | `patch_embed.weight` / `.bias` | `[C·p·p, d]` / `[d]` (bias optional) |
//! | `pos_embed` | `[tokens, d]` |
//! | `cls_token` | `[d]` (when the architecture has one) |
//! | `blocks.{i}.norm1.weight` / `.bias` | `[d]` |
//! | `blocks.{i}.attn.{q,k,v,proj}.weight` / `.bias` | `[d, d]` / `[d]` |
//! | `blocks.{i}.ls1.gamma`, `blocks.{i}.ls2.gamma` | `[d]` (layer scale only) |
//! | `blocks.{i}.norm2.weight` / `.bias` | `[d]` |
//! | `blocks.{i}.mlp.fc1.weight` / `.bias` | `[d, m]` / `[m]` |
//! | `blocks.{i}.mlp.fc2.weight` / `.bias` | `[m, d]` / `[d]` |
//! | `norm.weight` / `.bias` | `[d]` (final norm only) |
//! | `dino_head.mlp.{j}.weight` / `.bias` | MLP of the distillation head |
//! | `dino_head.last.weight` | `[bottleneck, K]` |
//! | `dino_head.center` | `[K]` (optional) |

use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::archive::{read_archive, ArchiveBuilder, TensorArchive};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormPlacement {
    /// `s = LN(h + MHA(h))`, `h' = LN(s + FFN(s))`.
    Post,
    /// `s = h + MHA(LN(h))`, `h' = s + FFN(LN(s))`.
    Pre,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DinoHeadSpec {
    /// Number of linear layers before the L2-normalised bottleneck.
    pub mlp_layers: usize,
    #[serde(default)]
    pub student_temp: Option<f64>,
    #[serde(default)]
    pub teacher_temp: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    #[serde(default = "default_patch")]
    pub patch_size: usize,
    pub grid_side: usize,
    #[serde(default = "default_chans")]
    pub in_chans: usize,
    pub norm: NormPlacement,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_true")]
    pub class_token: bool,
    #[serde(default)]
    pub layer_scale: bool,
    #[serde(default)]
    pub final_norm: bool,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
    #[serde(default)]
    pub dino_head: Option<DinoHeadSpec>,
}

fn default_patch() -> usize {
    14
}
fn default_chans() -> usize {
    3
}
fn default_activation() -> Activation {
    Activation::Gelu
}
fn default_true() -> bool {
    true
}
fn default_eps() -> f64 {
    1e-6
}

impl Architecture {
    pub fn patches(&self) -> usize {
        self.grid_side * self.grid_side
    }

    pub fn tokens(&self) -> usize {
        self.patches() + usize::from(self.class_token)
    }

    pub fn image_side(&self) -> usize {
        self.grid_side * self.patch_size
    }

    pub fn patch_features(&self) -> usize {
        self.in_chans * self.patch_size * self.patch_size
    }

    /// A small encoder for tests and synthetic experiments.
    pub fn tiny(depth: usize, dim: usize, heads: usize, grid_side: usize, norm: NormPlacement) -> Self {
        Self {
            depth,
            dim,
            heads,
            mlp_dim: dim * 2,
            patch_size: 14,
            grid_side,
            in_chans: 3,
            norm,
            activation: Activation::Gelu,
            class_token: true,
            layer_scale: matches!(norm, NormPlacement::Pre),
            final_norm: matches!(norm, NormPlacement::Pre),
            layer_norm_eps: 1e-6,
            dino_head: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.dim == 0 || self.heads == 0 || self.mlp_dim == 0 || self.grid_side == 0 {
            return Err(Error::Bundle(format!("degenerate architecture {self:?}")));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Bundle(format!(
                "width {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub norm1: (DenseTensor, DenseTensor),
    pub q: (DenseTensor, DenseTensor),
    pub k: (DenseTensor, DenseTensor),
    pub v: (DenseTensor, DenseTensor),
    pub proj: (DenseTensor, DenseTensor),
    pub ls1: Option<DenseTensor>,
    pub norm2: (DenseTensor, DenseTensor),
    pub fc1: (DenseTensor, DenseTensor),
    pub fc2: (DenseTensor, DenseTensor),
    pub ls2: Option<DenseTensor>,
}

#[derive(Debug, Clone)]
pub struct DinoHead {
    pub mlp: Vec<(DenseTensor, DenseTensor)>,
    pub last: DenseTensor,
    pub center: Option<DenseTensor>,
    pub spec: DinoHeadSpec,
}

impl DinoHead {
    pub fn out_dim(&self) -> usize {
        self.last.shape()[1]
    }
}

#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub arch: Architecture,
    pub patch_w: DenseTensor,
    pub patch_b: Option<DenseTensor>,
    pub pos_embed: DenseTensor,
    pub cls_token: Option<DenseTensor>,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Option<(DenseTensor, DenseTensor)>,
    pub dino_head: Option<DinoHead>,
    /// Free-form exporter metadata (resolution, source checkpoint, ...).
    pub metadata: serde_json::Map<String, Value>,
}

struct Loader<'a> {
    archive: &'a TensorArchive,
}

impl Loader<'_> {
    fn tensor(&self, name: &str, shape: &[usize]) -> Result<DenseTensor> {
        let t = self
            .archive
            .get(name)
            .map_err(|_| Error::Bundle(format!("missing tensor `{name}`")))?;
        if t.shape() != shape {
            return Err(Error::Bundle(format!(
                "tensor `{name}` has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        if !t.is_finite() {
            return Err(Error::Bundle(format!("tensor `{name}` has non-finite entries")));
        }
        Ok(t)
    }

    fn optional(&self, name: &str, shape: &[usize]) -> Result<Option<DenseTensor>> {
        if self.archive.contains(name) {
            self.tensor(name, shape).map(Some)
        } else {
            Ok(None)
        }
    }

    fn pair(&self, prefix: &str, w: &[usize], b: &[usize]) -> Result<(DenseTensor, DenseTensor)> {
        Ok((
            self.tensor(&format!("{prefix}.weight"), w)?,
            self.tensor(&format!("{prefix}.bias"), b)?,
        ))
    }
}

impl ModelBundle {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&read_archive(path)?)
    }

    /// Resolve and shape-check every tensor the architecture needs.
    pub fn from_archive(archive: &TensorArchive) -> Result<Self> {
        let arch_value = archive
            .metadata()
            .get("architecture")
            .ok_or_else(|| Error::Bundle("metadata has no `architecture` entry".into()))?;
        let arch: Architecture = serde_json::from_value(arch_value.clone())
            .map_err(|e| Error::Bundle(format!("bad architecture descriptor: {e}")))?;
        arch.validate()?;
        let l = Loader { archive };
        let d = arch.dim;
        let m = arch.mlp_dim;

        let patch_w = l.tensor("patch_embed.weight", &[arch.patch_features(), d])?;
        let patch_b = l.optional("patch_embed.bias", &[d])?;
        let pos_embed = l.tensor("pos_embed", &[arch.tokens(), d])?;
        let cls_token = if arch.class_token {
            Some(l.tensor("cls_token", &[d])?)
        } else {
            None
        };
        let mut layers = Vec::with_capacity(arch.depth);
        for i in 0..arch.depth {
            let p = format!("blocks.{i}");
            let (ls1, ls2) = if arch.layer_scale {
                (
                    Some(l.tensor(&format!("{p}.ls1.gamma"), &[d])?),
                    Some(l.tensor(&format!("{p}.ls2.gamma"), &[d])?),
                )
            } else {
                (None, None)
            };
            layers.push(LayerWeights {
                norm1: l.pair(&format!("{p}.norm1"), &[d], &[d])?,
                q: l.pair(&format!("{p}.attn.q"), &[d, d], &[d])?,
                k: l.pair(&format!("{p}.attn.k"), &[d, d], &[d])?,
                v: l.pair(&format!("{p}.attn.v"), &[d, d], &[d])?,
                proj: l.pair(&format!("{p}.attn.proj"), &[d, d], &[d])?,
                ls1,
                norm2: l.pair(&format!("{p}.norm2"), &[d], &[d])?,
                fc1: l.pair(&format!("{p}.mlp.fc1"), &[d, m], &[m])?,
                fc2: l.pair(&format!("{p}.mlp.fc2"), &[m, d], &[d])?,
                ls2,
            });
        }
        let final_norm = if arch.final_norm {
            Some(l.pair("norm", &[d], &[d])?)
        } else {
            None
        };
        let dino_head = match &arch.dino_head {
            None => None,
            Some(spec) => {
                let mut mlp = Vec::with_capacity(spec.mlp_layers);
                let mut width = d;
                for j in 0..spec.mlp_layers {
                    let name = format!("dino_head.mlp.{j}.weight");
                    let shape = archive
                        .shape(&name)
                        .map_err(|_| Error::Bundle(format!("missing tensor `{name}`")))?
                        .to_vec();
                    if shape.len() != 2 || shape[0] != width {
                        return Err(Error::Bundle(format!(
                            "tensor `{name}` has shape {shape:?}, expected [{width}, _]"
                        )));
                    }
                    mlp.push(l.pair(&format!("dino_head.mlp.{j}"), &shape, &[shape[1]])?);
                    width = shape[1];
                }
                let last_shape = archive
                    .shape("dino_head.last.weight")
                    .map_err(|_| Error::Bundle("missing tensor `dino_head.last.weight`".into()))?
                    .to_vec();
                if last_shape.len() != 2 || last_shape[0] != width {
                    return Err(Error::Bundle(format!(
                        "tensor `dino_head.last.weight` has shape {last_shape:?}, expected [{width}, _]"
                    )));
                }
                let last = l.tensor("dino_head.last.weight", &last_shape)?;
                let center = l.optional("dino_head.center", &[last_shape[1]])?;
                Some(DinoHead {
                    mlp,
                    last,
                    center,
                    spec: spec.clone(),
                })
            }
        };
        let mut metadata = archive.metadata().clone();
        metadata.remove("architecture");
        Ok(Self {
            arch,
            patch_w,
            patch_b,
            pos_embed,
            cls_token,
            layers,
            final_norm,
            dino_head,
            metadata,
        })
    }

    pub fn to_builder(&self) -> Result<ArchiveBuilder> {
        let mut b = ArchiveBuilder::new();
        b.set_metadata("architecture", serde_json::to_value(&self.arch)?);
        for (k, v) in &self.metadata {
            b.set_metadata(k.clone(), v.clone());
        }
        b.add("patch_embed.weight", self.patch_w.clone())?;
        if let Some(pb) = &self.patch_b {
            b.add("patch_embed.bias", pb.clone())?;
        }
        b.add("pos_embed", self.pos_embed.clone())?;
        if let Some(c) = &self.cls_token {
            b.add("cls_token", c.clone())?;
        }
        let pair = |b: &mut ArchiveBuilder, name: String, p: &(DenseTensor, DenseTensor)| -> Result<()> {
            b.add(format!("{name}.weight"), p.0.clone())?;
            b.add(format!("{name}.bias"), p.1.clone())?;
            Ok(())
        };
        for (i, lw) in self.layers.iter().enumerate() {
            let p = format!("blocks.{i}");
            pair(&mut b, format!("{p}.norm1"), &lw.norm1)?;
            pair(&mut b, format!("{p}.attn.q"), &lw.q)?;
            pair(&mut b, format!("{p}.attn.k"), &lw.k)?;
            pair(&mut b, format!("{p}.attn.v"), &lw.v)?;
            pair(&mut b, format!("{p}.attn.proj"), &lw.proj)?;
            pair(&mut b, format!("{p}.norm2"), &lw.norm2)?;
            pair(&mut b, format!("{p}.mlp.fc1"), &lw.fc1)?;
            pair(&mut b, format!("{p}.mlp.fc2"), &lw.fc2)?;
            if let Some(g) = &lw.ls1 {
                b.add(format!("{p}.ls1.gamma"), g.clone())?;
            }
            if let Some(g) = &lw.ls2 {
                b.add(format!("{p}.ls2.gamma"), g.clone())?;
            }
        }
        if let Some(n) = &self.final_norm {
            pair(&mut b, "norm".into(), n)?;
        }
        if let Some(h) = &self.dino_head {
            for (j, p) in h.mlp.iter().enumerate() {
                pair(&mut b, format!("dino_head.mlp.{j}"), p)?;
            }
            b.add("dino_head.last.weight", h.last.clone())?;
            if let Some(c) = &h.center {
                b.add("dino_head.center", c.clone())?;
            }
        }
        Ok(b)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_builder()?.write(path)
    }

    /// Randomly initialised bundle (Gaussian weights with std `scale / sqrt(fan_in)`).
    pub fn random_init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut r = rng::rng(seed);
        let d = arch.dim;
        let m = arch.mlp_dim;
        let mut gauss = |shape: Vec<usize>, std: f64| {
            let dist = Normal::new(0.0, std).expect("positive std");
            let n: usize = shape.iter().product();
            DenseTensor::new(shape, (0..n).map(|_| dist.sample(&mut r) as f32).collect())
                .expect("shape matches data")
        };
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let pf = arch.patch_features();
        let patch_w = gauss(vec![pf, d], fan(pf));
        let patch_b = Some(gauss(vec![d], 0.02));
        let pos_embed = gauss(vec![arch.tokens(), d], 0.5);
        let cls_token = arch.class_token.then(|| gauss(vec![d], 0.5));
        let ones = || DenseTensor::from_fn(vec![d], |_| 1.0);
        let mut layers = Vec::with_capacity(arch.depth);
        for _ in 0..arch.depth {
            let norm1 = (ones(), gauss(vec![d], 0.02));
            let q = (gauss(vec![d, d], fan(d)), gauss(vec![d], 0.02));
            let k = (gauss(vec![d, d], fan(d)), gauss(vec![d], 0.02));
            let v = (gauss(vec![d, d], fan(d)), gauss(vec![d], 0.02));
            let proj = (gauss(vec![d, d], fan(d)), gauss(vec![d], 0.02));
            let norm2 = (ones(), gauss(vec![d], 0.02));
            let fc1 = (gauss(vec![d, m], fan(d)), gauss(vec![m], 0.02));
            let fc2 = (gauss(vec![m, d], fan(m)), gauss(vec![d], 0.02));
            let (ls1, ls2) = if arch.layer_scale {
                (Some(DenseTensor::from_fn(vec![d], |_| 0.5)), Some(DenseTensor::from_fn(vec![d], |_| 0.5)))
            } else {
                (None, None)
            };
            layers.push(LayerWeights {
                norm1,
                q,
                k,
                v,
                proj,
                ls1,
                norm2,
                fc1,
                fc2,
                ls2,
            });
        }
        let final_norm = arch.final_norm.then(|| (ones(), gauss(vec![d], 0.02)));
        let dino_head = match &arch.dino_head {
            None => None,
            Some(spec) => {
                let hidden = d;
                let mut mlp = Vec::new();
                for _ in 0..spec.mlp_layers {
                    mlp.push((gauss(vec![d, hidden], fan(d)), gauss(vec![hidden], 0.02)));
                }
                let out = 4 * d;
                Some(DinoHead {
                    mlp,
                    last: gauss(vec![hidden, out], 1.0),
                    center: None,
                    spec: spec.clone(),
                })
            }
        };
        Ok(Self {
            arch,
            patch_w,
            patch_b,
            pos_embed,
            cls_token,
            layers,
            final_norm,
            dino_head,
            metadata: Default::default(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundle_round_trip() {
        let arch = Architecture::tiny(2, 8, 2, 3, NormPlacement::Pre);
        let b = ModelBundle::random_init(arch, 1).unwrap();
        let bytes = b.to_builder().unwrap().to_bytes().unwrap();
        let a = TensorArchive::from_bytes(bytes).unwrap();
        let back = ModelBundle::from_archive(&a).unwrap();
        assert_eq!(back.arch, b.arch);
        assert_eq!(back.layers.len(), 2);
        assert_eq!(back.layers[1].fc2.0, b.layers[1].fc2.0);
    }

    #[test]
    fn corrupted_shape_fails_at_load() {
        let arch = Architecture::tiny(2, 8, 2, 3, NormPlacement::Post);
        let b = ModelBundle::random_init(arch, 2).unwrap();
        let src = TensorArchive::from_bytes(b.to_builder().unwrap().to_bytes().unwrap()).unwrap();
        let mut builder = ArchiveBuilder::new();
        for (k, v) in src.metadata() {
            builder.set_metadata(k.clone(), v.clone());
        }
        for name in src.names() {
            let t = src.get(name).unwrap();
            let t = if name == "blocks.1.attn.k.weight" {
                DenseTensor::zeros(vec![8, 7])
            } else {
                t
            };
            builder.add(name, t).unwrap();
        }
        let a = TensorArchive::from_bytes(builder.to_bytes().unwrap()).unwrap();
        let err = ModelBundle::from_archive(&a).unwrap_err();
        assert!(err.to_string().contains("blocks.1.attn.k.weight"), "{err}");
    }

    #[test]
    fn missing_architecture_is_an_error() {
        let a = TensorArchive::from_bytes(ArchiveBuilder::new().to_bytes().unwrap()).unwrap();
        assert!(matches!(ModelBundle::from_archive(&a), Err(Error::Bundle(_))));
    }

    #[test]
    fn heads_must_divide_width() {
        let arch = Architecture::tiny(1, 10, 3, 2, NormPlacement::Pre);
        assert!(ModelBundle::random_init(arch, 0).is_err());
    }
}
