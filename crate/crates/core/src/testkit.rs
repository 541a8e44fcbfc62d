//! Random inputs for property tests, gradient checks and benchmarks.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::labelspace::{mask_from_labels, LabelId, LabelMap, LabelScheme, SuperLabel};
use crate::losses::Batch;
use crate::metrics::StructureMask;
use crate::tensor::Tensor;

/// A scheme with `num_base` labels and one super label (id `num_base`) over a
/// random subset of at least two members.
pub fn random_scheme<R: Rng>(rng: &mut R, num_base: usize) -> LabelScheme {
    assert!(num_base >= 2);
    let mut ids: Vec<LabelId> = (0..num_base as LabelId).collect();
    ids.shuffle(rng);
    let k = rng.random_range(2..=num_base);
    let members: BTreeSet<LabelId> = ids[..k].iter().copied().collect();
    LabelScheme::new(num_base, vec![SuperLabel { id: num_base as LabelId, members, name: None }]).expect("valid scheme")
}

/// Labels drawn uniformly from base ids, with each pixel replaced by a super id
/// with probability `merged`.
pub fn random_labels<R: Rng>(rng: &mut R, scheme: &LabelScheme, height: usize, width: usize, merged: f64) -> LabelMap {
    let supers: Vec<LabelId> = scheme.super_labels().iter().map(|s| s.id).collect();
    let values = (0..height * width)
        .map(|_| {
            if !supers.is_empty() && rng.random_bool(merged) {
                supers[rng.random_range(0..supers.len())]
            } else {
                rng.random_range(0..scheme.num_base_labels() as LabelId)
            }
        })
        .collect();
    LabelMap::new(height, width, values).expect("size")
}

pub fn random_logits<R: Rng>(rng: &mut R, shape: [usize; 4], range: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-range..=range)).collect()).expect("shape")
}

#[derive(Debug, Clone, Copy)]
pub struct BatchSpec {
    pub channels: (usize, usize),
    pub batch: (usize, usize),
    pub max_side: usize,
    pub logit_range: f64,
    pub merged: f64,
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self { channels: (2, 6), batch: (1, 3), max_side: 8, logit_range: 5.0, merged: 0.3 }
    }
}

/// Random batch with a random one-super-label scheme; masks follow the labels.
pub fn random_batch<R: Rng>(rng: &mut R, spec: &BatchSpec) -> Batch {
    let c = rng.random_range(spec.channels.0..=spec.channels.1);
    let scheme = random_scheme(rng, c);
    let b = rng.random_range(spec.batch.0..=spec.batch.1);
    let h = rng.random_range(1..=spec.max_side);
    let w = rng.random_range(1..=spec.max_side);
    let logits = random_logits(rng, [b, h, w, c], spec.logit_range);
    let labels: Vec<LabelMap> = (0..b).map(|_| random_labels(rng, &scheme, h, w, spec.merged)).collect();
    let masks = labels.iter().map(|l| mask_from_labels(l, &scheme).expect("labels valid")).collect();
    Batch::new(logits, labels, masks, scheme).expect("consistent batch")
}

/// Two masks of the same random size up to `max_side`, each built from a
/// few random rectangles plus scattered pixels (either may be empty).
pub fn random_mask_pair<R: Rng>(rng: &mut R, max_side: usize) -> (StructureMask, StructureMask) {
    let h = rng.random_range(1..=max_side);
    let w = rng.random_range(1..=max_side);
    let mut one = || {
        let mut values = vec![false; h * w];
        for _ in 0..rng.random_range(0..=3) {
            let (r0, c0) = (rng.random_range(0..h), rng.random_range(0..w));
            let (r1, c1) = (rng.random_range(r0..h), rng.random_range(c0..w));
            for r in r0..=r1 {
                for c in c0..=c1 {
                    values[r * w + c] = true;
                }
            }
        }
        let flips = rng.random_range(0..=h * w / 4);
        for _ in 0..flips {
            let i = rng.random_range(0..h * w);
            values[i] = !values[i];
        }
        StructureMask::new(h, w, values)
    };
    let a = one();
    let b = one();
    (a, b)
}
