//! Images, synthetic datasets and manifest loading.

mod dataset;
mod image;
pub mod synth;

pub use dataset::{load_dataset, ImageSample, Manifest, ManifestRow, MANIFEST_HEADER};
pub use image::Image;
pub use synth::synth_generate;
