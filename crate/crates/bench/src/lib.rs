//! Fixtures shared by the benchmarks in `benches/`.

use hetseg_core::labelspace::{mask_from_labels, merge_labels};
use hetseg_core::synthdata::{generate_scene, stack_images, GeometryConfig, LabeledImage, Preset};
use hetseg_core::{LabelMap, LabelScheme, Tensor, ValidityMask};

/// A desk-scale thigh batch with every other item merged.
pub struct SceneBatch {
    pub images: Tensor,
    pub labels: Vec<LabelMap>,
    pub masks: Vec<ValidityMask>,
    pub scheme: LabelScheme,
}

pub fn scene_batch(size: usize, batch: usize) -> SceneBatch {
    let preset = Preset::Thigh;
    let scheme = preset.scheme();
    let g = GeometryConfig { preset, height: size, width: size, ..Default::default() };
    let items: Vec<LabeledImage> = (0..batch as u64)
        .map(|i| {
            let s = generate_scene(i, &g).expect("scene");
            let labels = if i % 2 == 1 { merge_labels(&s.labels, &scheme, preset.super_id()).expect("merge") } else { s.labels };
            let mask = mask_from_labels(&labels, &scheme).expect("mask");
            LabeledImage { image: s.image, labels, mask }
        })
        .collect();
    let refs: Vec<&LabeledImage> = items.iter().collect();
    SceneBatch {
        images: stack_images(&refs),
        labels: items.iter().map(|i| i.labels.clone()).collect(),
        masks: items.iter().map(|i| i.mask.clone()).collect(),
        scheme,
    }
}
