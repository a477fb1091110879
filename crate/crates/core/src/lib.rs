//! Workbench for decoding and manipulating object-binding signals in
//! Vision Transformer activations.
//!
//! Modules follow the pipeline: [`tensor`] kernels, [`io`] archive formats,
//! [`vit`] forward pass with hooks, [`supervision`] pair labels and planted
//! data, [`probes`], [`analysis`], [`ablation`], and [`report`] emitters.

pub mod ablation;
pub mod analysis;
pub mod error;
pub mod io;
pub mod probes;
pub mod report;
pub mod par;
pub mod rng;
pub mod supervision;
pub mod tensor;
pub mod vit;

pub use error::{Error, ErrorClass, Result};
