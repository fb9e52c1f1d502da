//! File formats: checkpoints, run configuration, PGM image export.

mod checkpoint;
mod config;
mod pgm;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ManifestEntry, FORMAT_VERSION};
pub use config::RunConfig;
pub use pgm::{mosaic, write_pgm, encode_pgm};
