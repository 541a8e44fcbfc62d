//! Mini-batch Adam training with best-validation-loss model selection.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{write_checkpoint, Checkpoint};
use super::{AdamState, Architecture, ModelError, SegModel};
use crate::labelspace::LabelScheme;
use crate::losses::{compute_loss, Batch, LossKind, Reduction};
use crate::synthdata::{stack_images, LabeledImage};

// Keeps the shuffling stream apart from weight initialisation.
const SHUFFLE_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

/// One of the four training regimes compared by the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    /// Crossentropy on the fully annotated part only.
    Lb,
    /// Masked crossentropy on all data.
    Naive,
    /// Super-label-aware crossentropy on all data.
    Slac,
    /// Crossentropy on all data with the original, unmerged labels.
    Ub,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Lb, Arm::Naive, Arm::Slac, Arm::Ub];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Lb => "lb",
            Arm::Naive => "naive",
            Arm::Slac => "slac",
            Arm::Ub => "ub",
        }
    }

    pub fn loss_kind(self) -> LossKind {
        match self {
            Arm::Lb | Arm::Ub => LossKind::Xent,
            Arm::Naive => LossKind::Naive,
            Arm::Slac => LossKind::Slac,
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Arm::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| format!("unknown arm {s:?} (expected lb, naive, slac or ub)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub arm: Arm,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: f64,
    /// Validate every this many epochs; the last epoch is always validated.
    pub eval_every: usize,
    /// Where `best.ckpt`, `last.ckpt` and `train_log.csv` go, if anywhere.
    pub checkpoint_dir: Option<PathBuf>,
    pub depth: usize,
    pub base_channels: usize,
    pub skip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arm: Arm::Slac,
            epochs: 30,
            batch_size: 8,
            seed: 0,
            lr: 0.01,
            eval_every: 1,
            checkpoint_dir: None,
            depth: 2,
            base_channels: 16,
            skip: true,
        }
    }
}

impl TrainConfig {
    pub fn architecture(&self, in_channels: usize, num_classes: usize) -> Architecture {
        Architecture { in_channels, num_classes, depth: self.depth, base_channels: self.base_channels, skip: self.skip }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Architecture(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` on epochs without validation.
    pub val_loss: Option<f64>,
    pub wall_ms: u128,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainingLog {
    /// CSV with header `epoch,train_loss,val_loss,wall_ms`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,wall_ms\n");
        for e in &self.epochs {
            let val = e.val_loss.map(|v| format!("{v:.9}")).unwrap_or_default();
            s.push_str(&format!("{},{:.9},{},{}\n", e.epoch, e.train_loss, val, e.wall_ms));
        }
        s
    }

    pub fn best_val_loss(&self) -> Option<f64> {
        self.epochs.iter().filter_map(|e| e.val_loss).reduce(f64::min)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Checkpoint with the lowest validation loss.
    pub best: Checkpoint,
    pub final_model: SegModel,
    pub log: TrainingLog,
}

fn check_arm_labels(arm: Arm, scheme: &LabelScheme, items: &[LabeledImage]) -> Result<(), ModelError> {
    if arm.loss_kind() != LossKind::Xent {
        return Ok(());
    }
    match items.iter().position(|it| it.labels.values.iter().any(|&v| !scheme.is_base(v))) {
        Some(item) => Err(ModelError::MergedLabelsForArm { arm: arm.name(), item }),
        None => Ok(()),
    }
}

/// Mean per-pixel loss of `model` over `items`.
pub fn dataset_loss(model: &SegModel, scheme: &LabelScheme, items: &[LabeledImage], kind: LossKind, chunk: usize) -> Result<f64, ModelError> {
    let mut total = 0.0;
    let mut pixels = 0usize;
    for group in items.chunks(chunk.max(1)) {
        let refs: Vec<&LabeledImage> = group.iter().collect();
        let logits = model.forward(&stack_images(&refs))?;
        let batch = Batch::new(logits, group.iter().map(|i| i.labels.clone()).collect(), group.iter().map(|i| i.mask.clone()).collect(), scheme.clone())?;
        pixels += batch.num_pixels();
        total += compute_loss(kind, &batch, Reduction::Sum)?.value;
    }
    Ok(total / pixels as f64)
}

/// Trains a fresh model for `config.epochs` epochs and keeps the checkpoint
/// with the lowest validation loss under the arm's own loss.
pub fn train(config: &TrainConfig, scheme: &LabelScheme, train_set: &[LabeledImage], val_set: &[LabeledImage]) -> Result<TrainOutcome, ModelError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(ModelError::EmptyDataset("training set"));
    }
    if val_set.is_empty() {
        return Err(ModelError::EmptyDataset("validation set"));
    }
    check_arm_labels(config.arm, scheme, train_set)?;
    check_arm_labels(config.arm, scheme, val_set)?;
    let kind = config.arm.loss_kind();
    let in_channels = train_set[0].image.channels();
    let mut model = SegModel::new(config.architecture(in_channels, scheme.num_base_labels()), config.seed)?;
    let mut adam = AdamState::new(model.num_params(), config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_STREAM);
    if let Some(dir) = &config.checkpoint_dir {
        fs::create_dir_all(dir)?;
    }

    let mut log = TrainingLog::default();
    let mut best: Option<Checkpoint> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut pixels = 0usize;
        for idx in order.chunks(config.batch_size) {
            let items: Vec<&LabeledImage> = idx.iter().map(|&i| &train_set[i]).collect();
            let images = stack_images(&items);
            let labels: Vec<_> = items.iter().map(|i| i.labels.clone()).collect();
            let masks: Vec<_> = items.iter().map(|i| i.mask.clone()).collect();
            let (grads, loss) = model
                .backward(&images, &labels, &masks, scheme, kind)
                .map_err(|e| ModelError::Diverged { epoch, detail: e.to_string() })?;
            adam.step(model.params_mut(), &grads).map_err(|e| ModelError::Diverged { epoch, detail: e.to_string() })?;
            let n = loss.grad.len() / loss.grad.channels();
            loss_sum += loss.value * n as f64;
            pixels += n;
        }
        let train_loss = loss_sum / pixels as f64;

        let val_loss = if epoch % config.eval_every == 0 || epoch == config.epochs {
            let v = dataset_loss(&model, scheme, val_set, kind, config.batch_size)
                .map_err(|e| ModelError::Diverged { epoch, detail: e.to_string() })?;
            if !v.is_finite() {
                return Err(ModelError::Diverged { epoch, detail: "validation loss is not finite".into() });
            }
            if best.as_ref().is_none_or(|b| v < b.val_loss) {
                let ckpt = Checkpoint { model: model.clone(), adam: adam.clone(), epoch: epoch as u32, val_loss: v };
                if let Some(dir) = &config.checkpoint_dir {
                    write_checkpoint(&dir.join("best.ckpt"), &ckpt)?;
                }
                best = Some(ckpt);
            }
            Some(v)
        } else {
            None
        };
        log.epochs.push(EpochLog { epoch, train_loss, val_loss, wall_ms: started.elapsed().as_millis() });
    }

    let best = best.expect("the last epoch is always validated");
    if let Some(dir) = &config.checkpoint_dir {
        let last = Checkpoint {
            model: model.clone(),
            adam: adam.clone(),
            epoch: config.epochs as u32,
            val_loss: log.epochs.last().and_then(|e| e.val_loss).unwrap_or(f64::NAN),
        };
        write_checkpoint(&dir.join("last.ckpt"), &last)?;
        fs::File::create(dir.join("train_log.csv"))?.write_all(log.to_csv().as_bytes())?;
    }
    Ok(TrainOutcome { best, final_model: model, log })
}
