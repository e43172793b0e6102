//! Dataset ingestion, the synthetic toy dataset and checkpoint persistence.

pub mod checkpoint;
pub mod manifest;
pub mod ppm;
pub mod synthetic;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointMeta};
pub use manifest::{DatasetManifest, ManifestFile, Sample, SampleRecord, Split};
pub use ppm::RgbImage;
pub use synthetic::{generate_synthetic, synthesize, SyntheticConfig};
