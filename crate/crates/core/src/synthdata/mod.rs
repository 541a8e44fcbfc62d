//! Synthetic segmentation data: scene generation, merged-label dataset
//! construction and the on-disk formats.

mod dataset;
mod format;
mod generator;

use thiserror::Error;

use crate::labelspace::{LabelMap, SchemeError, ValidityMask};
use crate::tensor::Tensor;

pub use dataset::{build_dataset, load_items, DatasetManifest, LabelSource, ManifestItem, Split, SplitCounts, MANIFEST_FILE};
pub use format::{
    decode, encode, read_array, read_image, read_item, read_labels, write_array, write_item, write_label_pgm, write_pgm, FormatError, HsegArray,
    HSEG_MAGIC, HSEG_VERSION,
};
pub use generator::{generate_scene, GeometryConfig, Preset, Scene, SceneProvenance};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("infeasible geometry: {0}")]
    Geometry(String),
    #[error("invalid dataset request: {0}")]
    Request(String),
    #[error("dataset manifest not found at {0}")]
    ManifestNotFound(String),
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("item {item}: {detail}")]
    Item { item: String, detail: String },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Scheme(#[from] SchemeError),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// An image with the annotation a model is trained or scored against.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: Tensor,
    pub labels: LabelMap,
    pub mask: ValidityMask,
}

/// Stacks H×W×C images into one B×H×W×C tensor.
pub fn stack_images(items: &[&LabeledImage]) -> Tensor {
    let shape = items[0].image.shape();
    let mut data = Vec::with_capacity(items.len() * items[0].image.len());
    for it in items {
        assert_eq!(it.image.shape(), shape, "images in a batch must share a shape");
        data.extend_from_slice(it.image.data());
    }
    let mut full = vec![items.len()];
    full.extend_from_slice(shape);
    Tensor::new(full, data).expect("shape")
}

/// SplitMix64 finaliser applied to `seed + stream·γ`; used for every derived
/// seed (scenes, merge selection, training arms).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
