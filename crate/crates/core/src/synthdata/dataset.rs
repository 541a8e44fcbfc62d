//! Train/validation/test splits where a fraction of the training and
//! validation items has its super label members merged.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::format::{read_image, read_labels, write_array, write_label_pgm, write_pgm, HsegArray};
use super::generator::{generate_scene, GeometryConfig};
use super::{derive_seed, DataError, LabeledImage};
use crate::labelspace::{mask_from_labels, merge_labels, LabelId, LabelScheme};

pub const MANIFEST_FILE: &str = "manifest.toml";
const DATA_DIR: &str = "data";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn code(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self { train: 200, val: 40, test: 40 }
    }
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestItem {
    pub name: String,
    pub split: Split,
    #[serde(with = "hex_seed")]
    pub scene_seed: u64,
    pub merged: bool,
    pub image: String,
    /// Complete annotation, always present.
    pub labels: String,
    /// Annotation with the super label applied, for merged items only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub merged_labels: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    #[serde(with = "hex_seed")]
    pub seed: u64,
    pub super_id: LabelId,
    pub merge_fraction: f64,
    pub counts: SplitCounts,
    pub geometry: GeometryConfig,
    pub scheme: LabelScheme,
    pub items: Vec<ManifestItem>,
}

/// Which annotation of an item to load.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelSource {
    /// Original labels, base ids only.
    Full,
    /// Merged labels where the item was merged, original labels elsewhere.
    AsAnnotated,
}

impl DatasetManifest {
    pub fn items_in(&self, split: Split) -> impl Iterator<Item = &ManifestItem> {
        self.items.iter().filter(move |i| i.split == split)
    }

    pub fn merged_count(&self, split: Split) -> usize {
        self.items_in(split).filter(|i| i.merged).count()
    }

    pub fn save(&self, dir: &Path) -> Result<(), DataError> {
        let text = toml::to_string(self).map_err(|e| DataError::Manifest(e.to_string()))?;
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, text).map_err(|source| DataError::Io { path: path.display().to_string(), source })
    }

    pub fn load(dir: &Path) -> Result<Self, DataError> {
        let path = dir.join(MANIFEST_FILE);
        if !path.is_file() {
            return Err(DataError::ManifestNotFound(path.display().to_string()));
        }
        let text = fs::read_to_string(&path).map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
        let manifest: Self = toml::from_str(&text).map_err(|e| DataError::Manifest(e.to_string()))?;
        if manifest.scheme.super_label(manifest.super_id).is_none() {
            return Err(DataError::Manifest(format!("super id {} is not in the scheme", manifest.super_id)));
        }
        if manifest.items.iter().any(|i| i.merged != i.merged_labels.is_some() || (i.merged && i.split == Split::Test)) {
            return Err(DataError::Manifest("merged flags inconsistent with merged label files".into()));
        }
        Ok(manifest)
    }
}

/// Seeds are written as hex strings; TOML integers stop at `i64::MAX`.
mod hex_seed {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{v:#018x}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let text = String::deserialize(d)?;
        let digits = text.strip_prefix("0x").ok_or_else(|| D::Error::custom("seed must start with 0x"))?;
        u64::from_str_radix(digits, 16).map_err(D::Error::custom)
    }
}

fn merged_indices(seed: u64, split: Split, n: usize, fraction: f64) -> Vec<bool> {
    let k = ((n as f64) * fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x6d65_7267_6500 + split.code())));
    let mut merged = vec![false; n];
    for &i in &order[..k.min(n)] {
        merged[i] = true;
    }
    merged
}

/// Generates every split, merges the super label's members in
/// `round(merge_fraction · n)` training and validation items each, and writes
/// the HSEG1 files and `manifest.toml` under `out_dir`.
pub fn build_dataset(
    seed: u64,
    geometry: &GeometryConfig,
    counts: SplitCounts,
    merge_fraction: f64,
    super_id: LabelId,
    out_dir: &Path,
    export_pgm: bool,
) -> Result<DatasetManifest, DataError> {
    let scheme = geometry.preset.scheme();
    if scheme.super_label(super_id).is_none() {
        return Err(DataError::Scheme(crate::labelspace::SchemeError::UndefinedSuperLabel(super_id)));
    }
    if counts.train < 20 || counts.val < 5 || counts.test < 5 {
        return Err(DataError::Request(format!("need at least 20/5/5 train/val/test items, got {}/{}/{}", counts.train, counts.val, counts.test)));
    }
    if !(0.0..=1.0).contains(&merge_fraction) {
        return Err(DataError::Request(format!("merge_fraction {merge_fraction} outside [0, 1]")));
    }
    let data_dir = out_dir.join(DATA_DIR);
    fs::create_dir_all(&data_dir).map_err(|source| DataError::Io { path: data_dir.display().to_string(), source })?;

    let mut items = Vec::new();
    for split in Split::ALL {
        let n = counts.get(split);
        let merged = match split {
            Split::Test => vec![false; n],
            _ => merged_indices(seed, split, n, merge_fraction),
        };
        for (index, &is_merged) in merged.iter().enumerate() {
            let name = format!("{}_{index:04}", split.name());
            let scene_seed = derive_seed(seed, (split.code() << 32) | index as u64);
            let scene = generate_scene(scene_seed, geometry)?;
            let rel = |suffix: &str| format!("{DATA_DIR}/{name}.{suffix}.hseg");
            let (image, labels) = (rel("img"), rel("lbl"));
            write_array(&out_dir.join(&image), &HsegArray::Image(scene.image.clone()))?;
            write_array(&out_dir.join(&labels), &HsegArray::Labels(scene.labels.clone()))?;
            let merged_labels = if is_merged {
                let path = rel("mrg");
                write_array(&out_dir.join(&path), &HsegArray::Labels(merge_labels(&scene.labels, &scheme, super_id)?))?;
                Some(path)
            } else {
                None
            };
            if export_pgm {
                write_pgm(&out_dir.join(format!("{DATA_DIR}/{name}.img.pgm")), &scene.image)?;
                write_label_pgm(&out_dir.join(format!("{DATA_DIR}/{name}.lbl.pgm")), &scene.labels, scheme.num_base_labels() + 1)?;
            }
            items.push(ManifestItem { name, split, scene_seed, merged: is_merged, image, labels, merged_labels });
        }
    }
    let manifest = DatasetManifest { seed, super_id, merge_fraction, counts, geometry: geometry.clone(), scheme, items };
    manifest.save(out_dir)?;
    Ok(manifest)
}

/// Loads items from disk with validity masks derived from their labels.
/// Merged label files are checked against the merge of the complete labels.
pub fn load_items<'a>(
    dir: &Path,
    manifest: &DatasetManifest,
    items: impl IntoIterator<Item = &'a ManifestItem>,
    source: LabelSource,
) -> Result<Vec<LabeledImage>, DataError> {
    let scheme = &manifest.scheme;
    let mut out = Vec::new();
    for item in items {
        let err = |detail: String| DataError::Item { item: item.name.clone(), detail };
        let image = read_image(&dir.join(&item.image))?;
        let full = read_labels(&dir.join(&item.labels))?;
        if image.shape()[..2] != [full.height, full.width] {
            return Err(err("image and labels differ in size".into()));
        }
        scheme.validate_base_only(&full).map_err(|e| err(e.to_string()))?;
        let labels = match (source, &item.merged_labels) {
            (LabelSource::AsAnnotated, Some(path)) => {
                let merged = read_labels(&dir.join(path))?;
                if merged != merge_labels(&full, scheme, manifest.super_id)? {
                    return Err(err("merged labels do not match the merged complete labels".into()));
                }
                merged
            }
            _ => full,
        };
        let mask = mask_from_labels(&labels, scheme)?;
        out.push(LabeledImage { image, labels, mask });
    }
    Ok(out)
}
