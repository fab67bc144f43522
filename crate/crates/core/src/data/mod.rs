//! Dataset manifests, raster I/O, synthetic data, and checkpoints.

pub mod checkpoint;
pub mod image_io;
pub mod manifest;
pub mod synth;

use std::path::Path;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::training::LoadedSample;

pub use checkpoint::{load_checkpoint, restore_model, save_checkpoint, Checkpoint};
pub use manifest::{load_fr_manifest, load_manifest, save_manifest, FrPairRecord, ManifestRecord};
pub use synth::{synth_dataset, Distortion, SynthSpec};

/// Loads every record's image pair into memory.
pub fn load_samples<S: Scalar>(
    manifest_path: &Path,
    records: &[ManifestRecord],
) -> Result<Vec<LoadedSample<S>>> {
    records
        .iter()
        .map(|rec| {
            let rgb = image_io::load_rgb(&manifest::resolve_path(manifest_path, &rec.rgb_path))?;
            let depth =
                image_io::load_depth(&manifest::resolve_path(manifest_path, &rec.depth_path))?;
            Ok(LoadedSample {
                rgb,
                depth,
                score: S::of_f64(rec.score),
                group: rec.group_id.clone(),
            })
        })
        .collect()
}
