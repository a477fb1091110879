//! On-disk formats shared with the exporter.

pub mod archive;
pub mod bundle;
pub mod images;
pub mod labels;

pub use archive::{read_archive, write_archive, ArchiveBuilder, EntryMeta, TensorArchive};
pub use bundle::{Activation, Architecture, DinoHead, DinoHeadSpec, LayerWeights, ModelBundle, NormPlacement};
pub use images::{add_image, images_from_archive, load_images, mirror_pixels, ImageRecord};
pub use labels::{load_labels, write_labels, LabelRaster, IGNORE_ID};
