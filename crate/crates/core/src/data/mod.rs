//! Dataset and file IO: manifests, PPM/PGM images and masks, the LSNW
//! weights format, the synthetic dataset generator, and in-memory datasets.

pub mod dataset;
pub mod manifest;
pub mod pnm;
pub mod synth;
pub mod weights;

pub use dataset::{Dataset, Sample};
pub use manifest::{load_manifest, write_manifest, ManifestRecord, MANIFEST_HEADER};
pub use pnm::{load_image, load_mask, save_image, save_mask, ImageBuffer};
pub use synth::{class_counts, generate, write_dataset, SyntheticConfig};
pub use weights::{load_weights, save_weights, CheckpointMeta, WeightsFile};
