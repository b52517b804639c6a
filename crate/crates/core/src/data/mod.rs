//! Image and annotation I/O, resampling helpers, and the synthetic scene generator.

pub mod image_ops;
pub mod io;
pub mod manifest;
pub mod synth;

pub use io::{load_image, save_image};
pub use manifest::{
    image_id_of, parse_manifest, parse_manifest_str, Annotation, DatasetManifest, ManifestEntry,
    Split, Visibility, DEFAULT_CLASS_NAMES, NUM_SIGN_CLASSES,
};
pub use synth::{render_scene, synth_generate, Scene, SynthConfig};

use crate::error::Result;
use crate::geometry::BBox;
use crate::tensor::Tensor;

/// A decoded manifest image with its `(box, class)` annotations.
#[derive(Debug, Clone)]
pub struct LoadedImage {
    pub image_id: String,
    pub image: Tensor,
    pub signs: Vec<(BBox, usize)>,
}

/// Decodes every manifest image in parallel, in manifest order.
pub fn load_dataset(manifest: &DatasetManifest) -> Result<Vec<LoadedImage>> {
    use rayon::prelude::*;
    manifest
        .entries
        .par_iter()
        .map(|e| {
            Ok(LoadedImage {
                image_id: e.image_id(),
                image: load_image(&manifest.resolve(e))?,
                signs: e.annotations.iter().map(|a| (a.bbox, a.class_id)).collect(),
            })
        })
        .collect()
}
