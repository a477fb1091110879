//! Stage runner behind the `vitbind` binary.

pub mod config;
pub mod manifest;
mod stages;

use std::path::Path;

use vitbind::{Error, Result};

pub use config::{ExperimentConfig, Stage};
pub use manifest::{Manifest, MANIFEST_FILE};

/// A failed run; the partial manifest has already been written.
#[derive(Debug, thiserror::Error)]
#[error("{error}")]
pub struct RunFailure {
    pub error: Error,
    pub manifest: Manifest,
}

/// Run the configured stages in dependency order and write `out/manifest.json`.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> std::result::Result<Manifest, RunFailure> {
    let mut manifest = Manifest::new();
    let result = run_inner(cfg, out, &mut manifest);
    match result {
        Ok(()) => match manifest.write(out) {
            Ok(_) => Ok(manifest),
            Err(error) => Err(RunFailure { error, manifest }),
        },
        Err(error) => {
            manifest.complete = false;
            if out.is_dir() {
                if let Err(e) = manifest.write(out) {
                    log::warn!("could not write partial manifest: {e}");
                }
            }
            Err(RunFailure { error, manifest })
        }
    }
}

fn run_inner(cfg: &ExperimentConfig, out: &Path, manifest: &mut Manifest) -> Result<()> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let stages = cfg.ordered_stages();
    let mut ctx = stages::Context::new(cfg, out, manifest);
    for stage in stages {
        match ctx.run_stage(stage) {
            Ok(()) => ctx.finish_stage(stage),
            Err(Error::Unsupported(why)) if cfg.skip_unsupported => log::warn!("skipping {stage}: {why}"),
            Err(e) => return Err(e),
        }
    }
    Ok(())
}
