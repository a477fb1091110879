//! Experiment configuration: one JSON document drives every stage.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use vitbind::ablation::{AblationConfig, InstanceHeadConfig};
use vitbind::probes::{ProbeFamily, TrainRecipe};
use vitbind::supervision::SyntheticSpec;
use vitbind::{Error, Result};

/// Pipeline stages in dependency order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Synth,
    Trace,
    ProbeTrain,
    ProbeSweep,
    Pca,
    Kde,
    AttnCorr,
    PosProbe,
    Ablate,
    DinoLoss,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 11] = [
        Stage::Synth,
        Stage::Trace,
        Stage::ProbeTrain,
        Stage::ProbeSweep,
        Stage::Pca,
        Stage::Kde,
        Stage::AttnCorr,
        Stage::PosProbe,
        Stage::Ablate,
        Stage::DinoLoss,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Trace => "trace",
            Stage::ProbeTrain => "probe-train",
            Stage::ProbeSweep => "probe-sweep",
            Stage::Pca => "pca",
            Stage::Kde => "kde",
            Stage::AttnCorr => "attn-corr",
            Stage::PosProbe => "pos-probe",
            Stage::Ablate => "ablate",
            Stage::DinoLoss => "dino-loss",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

/// Settings of the analysis stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Images with full activations kept for score maps, KDE, attention and position.
    pub images: usize,
    pub pca_components: usize,
    /// Grid-aligned patch lists of the copies in the first image (model data only).
    pub pca_copies: Vec<Vec<usize>>,
    pub permutations: usize,
    pub position_per_image: Option<usize>,
    pub position_held_out: f64,
    /// Cross-layer probe pairs `(ℓ₁, ℓ₂)`.
    pub cross_layers: Vec<[usize; 2]>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            images: 8,
            pca_components: 3,
            pca_copies: Vec::new(),
            permutations: 999,
            position_per_image: None,
            position_held_out: 0.25,
            cross_layers: Vec::new(),
        }
    }
}

/// Settings of the ablation stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationStageConfig {
    pub runs: Vec<AblationConfig>,
    /// Segmentation head schedule; the probe recipe when unset.
    pub head_recipe: Option<TrainRecipe>,
    pub instance: Option<InstanceHeadConfig>,
    pub held_out_fraction: f64,
    /// Images used for the distillation loss.
    pub dino_images: usize,
}

impl Default for AblationStageConfig {
    fn default() -> Self {
        Self {
            runs: Vec::new(),
            head_recipe: None,
            instance: None,
            held_out_fraction: 0.25,
            dino_images: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub bundle: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    /// Planted data instead of a model; activations live at layer 0.
    pub synthetic: Option<SyntheticSpec>,
    pub max_images: Option<usize>,
    /// Hidden-state indices `0..=depth`; all of them when empty.
    pub layers: Vec<usize>,
    pub families: Vec<ProbeFamily>,
    /// Probe schedule; a generator-sized schedule is used for synthetic data when unset.
    pub recipe: Option<TrainRecipe>,
    pub stages: Vec<Stage>,
    pub analysis: AnalysisConfig,
    pub ablation: AblationStageConfig,
    pub seed: u64,
    /// Skip stages the inputs cannot support instead of failing.
    pub skip_unsupported: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            bundle: None,
            labels: None,
            images: None,
            output_dir: None,
            synthetic: None,
            max_images: None,
            layers: Vec::new(),
            families: vec![ProbeFamily::Linear, ProbeFamily::Diag, ProbeFamily::Quad],
            recipe: None,
            stages: Vec::new(),
            analysis: AnalysisConfig::default(),
            ablation: AblationStageConfig::default(),
            seed: 0,
            skip_unsupported: false,
        }
    }
}

impl ExperimentConfig {
    /// Every stage that applies to the configured input kind.
    pub fn default_stages(&self) -> Vec<Stage> {
        Stage::ALL
            .into_iter()
            .filter(|&s| s != Stage::Synth || self.synthetic.is_some())
            .collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Checks that do not need the model: paths exist, numbers are sane.
    pub fn validate(&self) -> Result<()> {
        if self.synthetic.is_some() && (self.bundle.is_some() || self.labels.is_some() || self.images.is_some()) {
            return Err(Error::Config("synthetic data and model inputs are mutually exclusive".into()));
        }
        for (name, p) in [("bundle", &self.bundle), ("labels", &self.labels), ("images", &self.images)] {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(Error::Config(format!("{name} path {} does not exist", p.display())));
                }
            }
        }
        if let Some(spec) = &self.synthetic {
            spec.validate()?;
            if let Some(&l) = self.layers.iter().find(|&&l| l != 0) {
                return Err(Error::Config(format!("synthetic activations only exist at layer 0, got layer {l}")));
            }
            if let Some(r) = self.ablation.runs.iter().find(|r| r.layer != 0) {
                return Err(Error::Config(format!(
                    "synthetic ablations act on layer 0 of the stand-in network, got layer {}",
                    r.layer
                )));
            }
        }
        if let Some(r) = &self.recipe {
            r.validate()?;
        }
        if let Some(r) = &self.ablation.head_recipe {
            r.validate()?;
        }
        for r in &self.ablation.runs {
            r.validate()?;
        }
        if self.analysis.images == 0 {
            return Err(Error::Config("analysis.images must be at least 1".into()));
        }
        if self.analysis.permutations < 100 {
            return Err(Error::Config("analysis.permutations must be at least 100".into()));
        }
        if !(0.0..1.0).contains(&self.analysis.position_held_out) || !(0.0..1.0).contains(&self.ablation.held_out_fraction) {
            return Err(Error::Config("held-out fractions must lie in [0, 1)".into()));
        }
        if self.families.contains(&ProbeFamily::Position) {
            return Err(Error::Config("position probes run in the pos-probe stage, not probe-train".into()));
        }
        Ok(())
    }

    /// Requested stages, deduplicated, in dependency order.
    pub fn ordered_stages(&self) -> Vec<Stage> {
        let mut s = self.stages.clone();
        s.sort_unstable();
        s.dedup();
        s
    }
}
