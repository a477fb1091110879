use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use vitbind::probes::ProbeFamily;
use vitbind::supervision::SyntheticSpec;
use vitbind::{Error, ErrorClass};
use vitbind_cli::{run, ExperimentConfig, Stage};

#[derive(Parser)]
#[command(name = "vitbind", version, about = "Probe and ablate object binding in ViT activations")]
struct Cli {
    /// JSON experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; all cores when unset.
    #[arg(long, global = true, env = "VITBIND_THREADS")]
    threads: Option<usize>,
    /// Output directory [default: config output_dir, then $VITBIND_OUT, then ./vitbind-out].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    bundle: Option<PathBuf>,
    #[arg(long, global = true)]
    labels: Option<PathBuf>,
    #[arg(long, global = true)]
    images: Option<PathBuf>,
    /// Comma-separated hidden-state indices.
    #[arg(long, global = true, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    /// Comma-separated probe families.
    #[arg(long, global = true, value_delimiter = ',')]
    families: Option<Vec<String>>,
    /// Use planted synthetic data with default generator settings.
    #[arg(long, global = true)]
    synthetic: bool,
    #[arg(long, global = true)]
    max_images: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate planted synthetic data.
    Synth,
    /// Record hidden states.
    Trace,
    /// Train probes per family and layer.
    ProbeTrain,
    /// Quadratic probe accuracy across layers.
    ProbeSweep,
    /// PCA of residual deltas between copies.
    Pca,
    /// Pair-score densities and score maps.
    Kde,
    /// Correlate attention with pair scores.
    AttnCorr,
    /// Decode patch position per layer.
    PosProbe,
    /// Binding ablations and head retraining.
    Ablate,
    /// Distillation loss under shuffling.
    DinoLoss,
    /// Markdown summary of the emitted tables.
    Report,
    /// Run the stages listed in the config, or all of them.
    Run,
}

impl Command {
    fn stage(&self) -> Option<Stage> {
        Some(match self {
            Command::Synth => Stage::Synth,
            Command::Trace => Stage::Trace,
            Command::ProbeTrain => Stage::ProbeTrain,
            Command::ProbeSweep => Stage::ProbeSweep,
            Command::Pca => Stage::Pca,
            Command::Kde => Stage::Kde,
            Command::AttnCorr => Stage::AttnCorr,
            Command::PosProbe => Stage::PosProbe,
            Command::Ablate => Stage::Ablate,
            Command::DinoLoss => Stage::DinoLoss,
            Command::Report => Stage::Report,
            Command::Run => return None,
        })
    }
}

fn build_config(cli: &Cli) -> vitbind::Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.bundle.is_some() {
        cfg.bundle.clone_from(&cli.bundle);
    }
    if cli.labels.is_some() {
        cfg.labels.clone_from(&cli.labels);
    }
    if cli.images.is_some() {
        cfg.images.clone_from(&cli.images);
    }
    if let Some(l) = &cli.layers {
        cfg.layers.clone_from(l);
    }
    if let Some(f) = &cli.families {
        cfg.families = f.iter().map(|s| s.parse::<ProbeFamily>()).collect::<vitbind::Result<_>>()?;
    }
    if cli.synthetic && cfg.synthetic.is_none() {
        cfg.synthetic = Some(SyntheticSpec::default());
    }
    if cli.max_images.is_some() {
        cfg.max_images = cli.max_images;
    }
    match cli.command.stage() {
        Some(s) => cfg.stages = vec![s],
        None if cfg.stages.is_empty() => {
            cfg.stages = cfg.default_stages();
            cfg.skip_unsupported = true;
        }
        None => {}
    }
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .or_else(|| std::env::var_os("VITBIND_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("vitbind-out"));
    Ok((cfg, out))
}

fn exit_code(e: &Error) -> ExitCode {
    ExitCode::from(match e.class() {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numeric => 4,
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            error!("thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let (cfg, out) = match build_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            error!("{e}");
            return exit_code(&e);
        }
    };
    match run(&cfg, &out) {
        Ok(m) => {
            println!("{} files written to {}", m.files.len(), out.display());
            ExitCode::SUCCESS
        }
        Err(f) => {
            error!("{}", f.error);
            exit_code(&f.error)
        }
    }
}
