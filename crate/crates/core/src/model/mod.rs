//! Encoder–decoder pixel classifier and its training machinery.
//!
//! The network is a miniature U-Net: `depth` levels of two 3×3 conv + ReLU
//! blocks separated by 2×2 max pooling, a bottleneck block, a mirrored
//! decoder with nearest-neighbour upsampling and (optionally) skip
//! concatenation, and a 1×1 classifier. Weights are `f32`; logits are handed
//! to the losses as `f64`.

mod adam;
mod checkpoint;
mod layers;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labelspace::{LabelMap, LabelScheme, ValidityMask};
use crate::losses::{compute_loss, Batch, LossError, LossKind, LossResult, Reduction};
use crate::tensor::Tensor;
use layers::{col2im3, concat, gemm, im2col3, maxpool2, maxpool2_backward, split, upsample2, upsample2_backward, Act};

pub use adam::AdamState;
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{dataset_loss, train, Arm, EpochLog, TrainConfig, TrainOutcome, TrainingLog};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("input must be B×H×W×{expected}, got shape {got:?}")]
    InputShape { expected: usize, got: Vec<usize> },
    #[error("input {h}x{w} is not divisible by the pooling factor {factor}")]
    NotDivisible { h: usize, w: usize, factor: usize },
    #[error("parameter and gradient lengths differ ({params} vs {grads})")]
    LengthMismatch { params: usize, grads: usize },
    #[error("non-finite {what} (first at index {index})")]
    NonFinite { what: &'static str, index: usize },
    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
    #[error("arm {arm} cannot train on labels with super ids (item {item})")]
    MergedLabelsForArm { arm: &'static str, item: usize },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Shape of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Architecture {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Number of 2× downsamplings.
    pub depth: usize,
    pub base_channels: usize,
    pub skip: bool,
}

impl Architecture {
    pub fn new(in_channels: usize, num_classes: usize) -> Self {
        Self { in_channels, num_classes, depth: 2, base_channels: 16, skip: true }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Architecture(m.to_string()));
        if self.in_channels == 0 || self.in_channels > usize::from(u16::MAX) {
            return bad("in_channels must be in 1..=65535");
        }
        if self.num_classes < 2 || self.num_classes > usize::from(u16::MAX) {
            return bad("num_classes must be in 2..=65535");
        }
        if self.depth > 6 {
            return bad("depth must be at most 6");
        }
        if self.base_channels == 0 || self.base_channels << self.depth > usize::from(u16::MAX) {
            return bad("base_channels out of range");
        }
        Ok(())
    }

    pub fn pool_factor(&self) -> usize {
        1 << self.depth
    }

    fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Conv layers in evaluation order: encoder pairs, bottleneck pair,
    /// decoder pairs (deepest first), then the 1×1 classifier.
    fn conv_shapes(&self) -> Vec<(usize, usize, usize)> {
        let mut shapes = Vec::new();
        let mut cin = self.in_channels;
        for level in 0..=self.depth {
            let c = self.level_channels(level);
            shapes.push((cin, c, 3));
            shapes.push((c, c, 3));
            cin = c;
        }
        for level in (0..self.depth).rev() {
            let c = self.level_channels(level);
            let up = self.level_channels(level + 1);
            let merged = if self.skip { up + c } else { up };
            shapes.push((merged, c, 3));
            shapes.push((c, c, 3));
        }
        shapes.push((self.base_channels, self.num_classes, 1));
        shapes
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ConvSpec {
    cin: usize,
    cout: usize,
    kernel: usize,
    weight: usize,
    bias: usize,
}

impl ConvSpec {
    fn fan_in(&self) -> usize {
        self.kernel * self.kernel * self.cin
    }

    fn weight_len(&self) -> usize {
        self.fan_in() * self.cout
    }
}

/// Network parameters, flattened into one buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct SegModel {
    arch: Architecture,
    convs: Vec<ConvSpec>,
    params: Vec<f32>,
}

/// Per-layer values the backward pass needs.
struct Cache {
    /// im2col patches (or the raw input for 1×1 convs), per conv.
    cols: Vec<Vec<f32>>,
    /// Post-ReLU outputs per 3×3 conv.
    outs: Vec<Act>,
    pool_args: Vec<(Vec<u8>, usize, usize)>,
    dims: (usize, usize, usize),
}

impl SegModel {
    /// He-uniform weights from `seed`, zero biases.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self, ModelError> {
        let mut model = Self::zeroed(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for conv in model.convs.clone() {
            let bound = (6.0 / conv.fan_in() as f64).sqrt();
            for w in &mut model.params[conv.weight..conv.weight + conv.weight_len()] {
                *w = rng.random_range(-bound..bound) as f32;
            }
        }
        Ok(model)
    }

    /// All parameters zero.
    pub fn zeroed(arch: Architecture) -> Result<Self, ModelError> {
        arch.validate()?;
        let mut convs = Vec::new();
        let mut offset = 0;
        for (cin, cout, kernel) in arch.conv_shapes() {
            let weight = offset;
            let bias = weight + kernel * kernel * cin * cout;
            offset = bias + cout;
            convs.push(ConvSpec { cin, cout, kernel, weight, bias });
        }
        Ok(Self { arch, convs, params: vec![0.0; offset] })
    }

    pub fn from_params(arch: Architecture, params: Vec<f32>) -> Result<Self, ModelError> {
        let mut model = Self::zeroed(arch)?;
        if params.len() != model.params.len() {
            return Err(ModelError::LengthMismatch { params: model.params.len(), grads: params.len() });
        }
        model.params = params;
        Ok(model)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    /// Range of the classifier's weights and biases in the parameter buffer.
    pub fn classifier_range(&self) -> std::ops::Range<usize> {
        let last = self.convs.last().unwrap();
        last.weight..last.bias + last.cout
    }

    fn check_input(&self, images: &Tensor) -> Result<(usize, usize, usize), ModelError> {
        let &[b, h, w, c] = images.shape() else {
            return Err(ModelError::InputShape { expected: self.arch.in_channels, got: images.shape().to_vec() });
        };
        if c != self.arch.in_channels {
            return Err(ModelError::InputShape { expected: self.arch.in_channels, got: images.shape().to_vec() });
        }
        let f = self.arch.pool_factor();
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(ModelError::NotDivisible { h, w, factor: f });
        }
        images.check_finite().map_err(|_| ModelError::NonFinite { what: "input", index: 0 })?;
        Ok((b, h, w))
    }

    fn conv_forward(&self, layer: usize, x: &Act, relu: bool, cache: Option<&mut Cache>) -> Act {
        let spec = self.convs[layer];
        let rows = x.rows();
        let cols_owned;
        let cols: &[f32] = if spec.kernel == 3 {
            cols_owned = im2col3(x);
            &cols_owned
        } else {
            cols_owned = Vec::new();
            &x.data
        };
        let mut out = Act::zeros(x.b, x.h, x.w, spec.cout);
        let bias = &self.params[spec.bias..spec.bias + spec.cout];
        for row in out.data.chunks_exact_mut(spec.cout) {
            row.copy_from_slice(bias);
        }
        let k = spec.fan_in();
        gemm(rows, k, spec.cout, cols, k, 1, &self.params[spec.weight..spec.weight + k * spec.cout], spec.cout, 1, 1.0, &mut out.data, spec.cout);
        if relu {
            for v in &mut out.data {
                *v = v.max(0.0);
            }
        }
        if let Some(cache) = cache {
            cache.cols.push(if spec.kernel == 3 { cols_owned } else { x.data.clone() });
            if relu {
                cache.outs.push(out.clone());
            }
        }
        out
    }

    fn run(&self, images: &Tensor, mut cache: Option<&mut Cache>) -> Result<Act, ModelError> {
        let (b, h, w) = self.check_input(images)?;
        let mut x = Act { b, h, w, c: self.arch.in_channels, data: images.data().iter().map(|&v| v as f32).collect() };
        let mut layer = 0;
        let mut skips = Vec::new();
        for level in 0..=self.arch.depth {
            x = self.conv_forward(layer, &x, true, cache.as_deref_mut());
            x = self.conv_forward(layer + 1, &x, true, cache.as_deref_mut());
            layer += 2;
            if level < self.arch.depth {
                let (pooled, arg) = maxpool2(&x);
                if let Some(c) = cache.as_deref_mut() {
                    c.pool_args.push((arg, x.h, x.w));
                }
                skips.push(std::mem::replace(&mut x, pooled));
            }
        }
        for _ in 0..self.arch.depth {
            let skip = skips.pop().unwrap();
            let up = upsample2(&x);
            x = if self.arch.skip { concat(&up, &skip) } else { up };
            x = self.conv_forward(layer, &x, true, cache.as_deref_mut());
            x = self.conv_forward(layer + 1, &x, true, cache.as_deref_mut());
            layer += 2;
        }
        Ok(self.conv_forward(layer, &x, false, cache))
    }

    /// Logits B×H×W×num_classes for images B×H×W×in_channels.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor, ModelError> {
        let out = self.run(images, None)?;
        let logits = Tensor::new(vec![out.b, out.h, out.w, out.c], out.data.iter().map(|&v| f64::from(v)).collect()).expect("shape");
        if let Err(e) = logits.check_finite() {
            let index = match e {
                crate::tensor::TensorError::NonFinite { index, .. } => index,
                _ => 0,
            };
            return Err(ModelError::NonFinite { what: "logits", index });
        }
        Ok(logits)
    }

    /// Per-pixel argmax label maps; ties go to the lowest channel.
    pub fn predict(&self, images: &Tensor) -> Result<Vec<LabelMap>, ModelError> {
        let logits = self.forward(images)?;
        Ok(argmax_maps(&logits))
    }

    /// Loss and its gradient with respect to every parameter.
    pub fn backward(
        &self,
        images: &Tensor,
        labels: &[LabelMap],
        masks: &[ValidityMask],
        scheme: &LabelScheme,
        kind: LossKind,
    ) -> Result<(Vec<f32>, LossResult), ModelError> {
        self.backward_with(images, labels, masks, scheme, kind, Reduction::Mean)
    }

    pub(crate) fn backward_with(
        &self,
        images: &Tensor,
        labels: &[LabelMap],
        masks: &[ValidityMask],
        scheme: &LabelScheme,
        kind: LossKind,
        reduction: Reduction,
    ) -> Result<(Vec<f32>, LossResult), ModelError> {
        let (b, h, w) = self.check_input(images)?;
        let mut cache = Cache { cols: Vec::new(), outs: Vec::new(), pool_args: Vec::new(), dims: (b, h, w) };
        let out = self.run(images, Some(&mut cache))?;
        let logits = Tensor::new(vec![b, h, w, out.c], out.data.iter().map(|&v| f64::from(v)).collect()).expect("shape");
        let batch = Batch::new(logits, labels.to_vec(), masks.to_vec(), scheme.clone())?;
        let loss = compute_loss(kind, &batch, reduction)?;
        if !loss.value.is_finite() {
            return Err(ModelError::NonFinite { what: "loss", index: 0 });
        }
        let dlogits = Act { b, h, w, c: out.c, data: loss.grad.data().iter().map(|&g| g as f32).collect() };
        let grads = self.backprop(cache, dlogits);
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(ModelError::NonFinite { what: "gradient", index });
        }
        Ok((grads, loss))
    }

    fn conv_backward(&self, layer: usize, cols: &[f32], dout: &Act, grads: &mut [f32], need_input: bool) -> Option<Vec<f32>> {
        let spec = self.convs[layer];
        let rows = dout.rows();
        let k = spec.fan_in();
        // dW = colsᵀ · dout
        gemm(k, rows, spec.cout, cols, 1, k, &dout.data, spec.cout, 1, 1.0, &mut grads[spec.weight..spec.weight + k * spec.cout], spec.cout);
        let db = &mut grads[spec.bias..spec.bias + spec.cout];
        for row in dout.data.chunks_exact(spec.cout) {
            for (g, &d) in db.iter_mut().zip(row) {
                *g += d;
            }
        }
        if !need_input {
            return None;
        }
        // dcols = dout · Wᵀ
        let mut dcols = vec![0.0f32; rows * k];
        gemm(rows, spec.cout, k, &dout.data, spec.cout, 1, &self.params[spec.weight..spec.weight + k * spec.cout], 1, spec.cout, 0.0, &mut dcols, k);
        Some(dcols)
    }

    fn backprop(&self, mut cache: Cache, dlogits: Act) -> Vec<f32> {
        let mut grads = vec![0.0f32; self.params.len()];
        let (b, h0, w0) = cache.dims;
        let mut layer = self.convs.len() - 1;

        let cols = cache.cols.pop().unwrap();
        let dcols = self.conv_backward(layer, &cols, &dlogits, &mut grads, true).unwrap();
        let mut d = Act { b, h: h0, w: w0, c: self.arch.base_channels, data: dcols };

        // One 3×3 conv + ReLU, walking the caches backwards.
        let step = |d: Act, layer: usize, cache: &mut Cache, grads: &mut [f32]| -> Act {
            let out = cache.outs.pop().unwrap();
            let cols = cache.cols.pop().unwrap();
            let mut d = d;
            for (g, &o) in d.data.iter_mut().zip(&out.data) {
                if o <= 0.0 {
                    *g = 0.0;
                }
            }
            let spec = self.convs[layer];
            let dcols = self.conv_backward(layer, &cols, &d, grads, layer > 0);
            match dcols {
                Some(dc) => col2im3(&dc, d.b, d.h, d.w, spec.cin),
                None => Act::zeros(0, 0, 0, 0),
            }
        };

        let mut skip_grads = Vec::new();
        for level in 0..self.arch.depth {
            layer -= 1;
            d = step(d, layer, &mut cache, &mut grads);
            layer -= 1;
            d = step(d, layer, &mut cache, &mut grads);
            let up_c = self.arch.level_channels(level + 1);
            let dup = if self.arch.skip {
                let (dup, dskip) = split(&d, up_c);
                skip_grads.push(dskip);
                dup
            } else {
                d
            };
            d = upsample2_backward(&dup);
        }
        for level in (0..=self.arch.depth).rev() {
            layer -= 1;
            d = step(d, layer, &mut cache, &mut grads);
            layer -= 1;
            d = step(d, layer, &mut cache, &mut grads);
            if level > 0 {
                let (arg, ph, pw) = cache.pool_args.pop().unwrap();
                let mut up = maxpool2_backward(&d, &arg, ph, pw);
                if self.arch.skip {
                    let dskip = skip_grads.pop().unwrap();
                    for (g, s) in up.data.iter_mut().zip(&dskip.data) {
                        *g += s;
                    }
                }
                d = up;
            }
        }
        debug_assert_eq!(layer, 0);
        grads
    }
}

/// Argmax over the channel axis of B×H×W×C logits.
pub fn argmax_maps(logits: &Tensor) -> Vec<LabelMap> {
    let &[b, h, w, c] = logits.shape() else { panic!("argmax_maps needs B×H×W×C logits") };
    let labels: Vec<u8> = logits
        .pixels()
        .map(|z| {
            let mut best = 0;
            for k in 1..c {
                if z[k] > z[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    labels.chunks_exact(h * w).take(b).map(|v| LabelMap { height: h, width: w, values: v.to_vec() }).collect()
}
