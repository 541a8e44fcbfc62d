//! Pixelwise crossentropy losses for partially merged annotations.
//!
//! All three losses share one per-pixel kernel. A pixel with a precise base
//! label (mask 1) contributes the usual negative log-likelihood. A pixel
//! carrying a super label (mask 0) contributes nothing under
//! [`LossKind::Naive`], and `-log Σ_{ℓ∈S} q_ℓ` over the super label's members
//! `S` under [`LossKind::Slac`]. [`LossKind::Xent`] refuses masked pixels.
//!
//! Values are the negated (non-negative) form, reduced by the mean over every
//! pixel of the batch unless [`Reduction::Sum`] is asked for. Masked pixels
//! that contribute nothing still count in the mean's denominator.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labelspace::{mask_from_labels, LabelId, LabelMap, LabelScheme, SchemeError, ValidityMask};
use crate::tensor::{logsumexp, logsumexp_group, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("logits must be B×H×W×C, got shape {0:?}")]
    LogitShape(Vec<usize>),
    #[error("logits have {got} channels but the scheme has {expected} base labels")]
    ChannelCount { expected: usize, got: usize },
    #[error("batch has {logits} logit images but {labels} label maps and {masks} masks")]
    BatchSize { logits: usize, labels: usize, masks: usize },
    #[error("item {item}: label map or mask is {got_h}x{got_w}, logits are {h}x{w}")]
    ItemShape { item: usize, h: usize, w: usize, got_h: usize, got_w: usize },
    #[error("item {item}: validity mask disagrees with the label map")]
    InconsistentMask { item: usize },
    #[error("crossentropy needs complete labels; item {item} pixel {pixel} holds super id {id}")]
    SuperLabelInXent { item: usize, pixel: usize, id: LabelId },
    #[error("finite-difference step {0} outside [1e-7, 1e-3]")]
    BadStep(f64),
    #[error("non-finite loss while probing logit {0}")]
    NonFiniteProbe(usize),
    #[error(transparent)]
    Scheme(#[from] SchemeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Xent,
    Naive,
    Slac,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Xent, LossKind::Naive, LossKind::Slac];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Xent => "xent",
            LossKind::Naive => "naive",
            LossKind::Slac => "slac",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    /// Divide by the number of pixels in the batch, masked or not.
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    /// Loss in nats.
    pub value: f64,
    /// ∂value/∂logits, same shape as the logits.
    pub grad: Tensor,
    /// Pixels whose term entered the loss.
    pub pixels_counted: usize,
}

/// Logits with the annotations they are scored against.
#[derive(Debug, Clone)]
pub struct Batch {
    pub logits: Tensor,
    pub labels: Vec<LabelMap>,
    pub masks: Vec<ValidityMask>,
    pub scheme: LabelScheme,
}

impl Batch {
    pub fn new(logits: Tensor, labels: Vec<LabelMap>, masks: Vec<ValidityMask>, scheme: LabelScheme) -> Result<Self, LossError> {
        let batch = Self { logits, labels, masks, scheme };
        batch.validate()?;
        Ok(batch)
    }

    /// Builds a batch with masks derived from the label maps.
    pub fn from_labels(logits: Tensor, labels: Vec<LabelMap>, scheme: LabelScheme) -> Result<Self, LossError> {
        let masks = labels.iter().map(|l| mask_from_labels(l, &scheme)).collect::<Result<Vec<_>, _>>()?;
        Self::new(logits, labels, masks, scheme)
    }

    fn dims(&self) -> Result<[usize; 4], LossError> {
        match *self.logits.shape() {
            [b, h, w, c] => Ok([b, h, w, c]),
            _ => Err(LossError::LogitShape(self.logits.shape().to_vec())),
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let [b, h, w, c] = self.dims()?;
        if c != self.scheme.num_base_labels() {
            return Err(LossError::ChannelCount { expected: self.scheme.num_base_labels(), got: c });
        }
        if self.labels.len() != b || self.masks.len() != b {
            return Err(LossError::BatchSize { logits: b, labels: self.labels.len(), masks: self.masks.len() });
        }
        for (item, (l, m)) in self.labels.iter().zip(&self.masks).enumerate() {
            for (got_h, got_w) in [(l.height, l.width), (m.height, m.width)] {
                if (got_h, got_w) != (h, w) {
                    return Err(LossError::ItemShape { item, h, w, got_h, got_w });
                }
            }
            if mask_from_labels(l, &self.scheme)? != *m {
                return Err(LossError::InconsistentMask { item });
            }
        }
        Ok(())
    }

    pub fn num_pixels(&self) -> usize {
        self.logits.len() / self.logits.channels()
    }
}

/// Per-pixel targets flattened across the batch, with super labels resolved to
/// member channel lists once.
struct Targets<'a> {
    labels: Vec<LabelId>,
    valid: Vec<bool>,
    groups: Vec<(LabelId, Vec<usize>)>,
    scheme: &'a LabelScheme,
}

impl<'a> Targets<'a> {
    fn new(batch: &'a Batch) -> Self {
        let labels = batch.labels.iter().flat_map(|l| l.values.iter().copied()).collect();
        let valid = batch.masks.iter().flat_map(|m| m.values.iter().map(|&v| v == 1)).collect();
        let groups = batch
            .scheme
            .super_labels()
            .iter()
            .map(|s| (s.id, s.members.iter().map(|&m| usize::from(m)).collect()))
            .collect();
        Self { labels, valid, groups, scheme: &batch.scheme }
    }

    fn group(&self, id: LabelId) -> Result<&[usize], LossError> {
        self.groups
            .iter()
            .find(|(g, _)| *g == id)
            .map(|(_, members)| members.as_slice())
            .ok_or(LossError::Scheme(SchemeError::UndefinedSuperLabel(id)))
    }
}

/// One pixel's loss term; writes the unnormalized gradient into `g`.
/// Returns `None` for pixels that do not enter the loss.
fn pixel_term(kind: LossKind, z: &[f64], label: LabelId, valid: bool, targets: &Targets, g: &mut [f64]) -> Result<Option<f64>, LossError> {
    if valid {
        let lse = logsumexp(z);
        for (gk, &zk) in g.iter_mut().zip(z) {
            *gk = (zk - lse).exp();
        }
        let t = usize::from(label);
        g[t] -= 1.0;
        return Ok(Some(lse - z[t]));
    }
    match kind {
        LossKind::Naive => {
            g.fill(0.0);
            Ok(None)
        }
        LossKind::Slac => {
            let members = targets.group(label)?;
            let lse = logsumexp(z);
            let lse_group = logsumexp_group(z, members);
            for (gk, &zk) in g.iter_mut().zip(z) {
                *gk = (zk - lse).exp();
            }
            // q_k − q_k/Q_S for members, with q_k/Q_S = exp(z_k − lse_S).
            for &k in members {
                g[k] -= (z[k] - lse_group).exp();
            }
            Ok(Some((lse - lse_group).max(0.0)))
        }
        LossKind::Xent => unreachable!("checked before the pixel loop"),
    }
}

/// Evaluates one of the losses and its exact gradient with respect to the logits.
pub fn compute_loss(kind: LossKind, batch: &Batch, reduction: Reduction) -> Result<LossResult, LossError> {
    let [_, h, w, c] = batch.dims()?;
    if c != batch.scheme.num_base_labels() {
        return Err(LossError::ChannelCount { expected: batch.scheme.num_base_labels(), got: c });
    }
    let targets = Targets::new(batch);
    if kind == LossKind::Xent {
        if let Some(p) = targets.valid.iter().position(|v| !v) {
            return Err(LossError::SuperLabelInXent { item: p / (h * w), pixel: p % (h * w), id: targets.labels[p] });
        }
    }
    debug_assert!(targets.labels.iter().all(|&l| targets.scheme.is_valid(l)));

    let mut grad = Tensor::zeros(batch.logits.shape().to_vec());
    let mut total = 0.0;
    let mut counted = 0;
    for (p, (z, g)) in batch.logits.data().chunks_exact(c).zip(grad.data_mut().chunks_exact_mut(c)).enumerate() {
        if let Some(v) = pixel_term(kind, z, targets.labels[p], targets.valid[p], &targets, g)? {
            total += v;
            counted += 1;
        }
    }
    let value = match reduction {
        Reduction::Sum => total,
        Reduction::Mean => {
            let n = batch.num_pixels() as f64;
            for g in grad.data_mut() {
                *g /= n;
            }
            total / n
        }
    };
    Ok(LossResult { value, grad, pixels_counted: counted })
}

pub fn xent_loss(batch: &Batch) -> Result<LossResult, LossError> {
    compute_loss(LossKind::Xent, batch, Reduction::Mean)
}

pub fn naive_loss(batch: &Batch) -> Result<LossResult, LossError> {
    compute_loss(LossKind::Naive, batch, Reduction::Mean)
}

pub fn slac_loss(batch: &Batch) -> Result<LossResult, LossError> {
    compute_loss(LossKind::Slac, batch, Reduction::Mean)
}

/// Central-difference gradient of the mean-reduced loss, one logit at a time.
pub fn finite_diff_grad(kind: LossKind, batch: &Batch, h: f64) -> Result<Tensor, LossError> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(LossError::BadStep(h));
    }
    let mut probe = batch.clone();
    let mut out = Tensor::zeros(batch.logits.shape().to_vec());
    for i in 0..batch.logits.len() {
        let orig = probe.logits.data()[i];
        probe.logits.data_mut()[i] = orig + h;
        let up = compute_loss(kind, &probe, Reduction::Mean)?.value;
        probe.logits.data_mut()[i] = orig - h;
        let down = compute_loss(kind, &probe, Reduction::Mean)?.value;
        probe.logits.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(LossError::NonFiniteProbe(i));
        }
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(out)
}

/// Largest `|a − b| / max(1, |b|)` over paired entries.
pub fn max_relative_error(analytic: &Tensor, reference: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (a - b).abs() / b.abs().max(1.0))
        .fold(0.0, f64::max)
}
