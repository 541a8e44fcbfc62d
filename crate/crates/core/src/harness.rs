//! The four-arm experiment: one dataset, four trained models, one table.
//!
//! Output directory layout:
//!
//! ```text
//! manifest.toml, data/     generated dataset
//! ckpt/<arm>/              best.ckpt, last.ckpt, train_log.csv
//! report_<arm>.csv         per-structure test metrics
//! comparison.csv           all arms side by side with winner flags
//! provenance.txt           seeds, config hash, versions, arm status
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::metrics::{evaluate_arm, ArmReport, MetricError, StructureStats, AVERAGE_ROW};
use crate::model::{read_checkpoint, train, Arm, CheckpointError, ModelError, TrainConfig, TrainOutcome};
use crate::synthdata::{
    build_dataset, derive_seed, load_items, DataError, DatasetManifest, GeometryConfig, LabelSource, LabeledImage, Preset, Split, SplitCounts,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("no arm reports found in {0}")]
    NoReports(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub preset: Preset,
    pub height: usize,
    pub width: usize,
    pub noise_sigma: f64,
    pub bias_amplitude: f64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub merge_fraction: f64,
    pub export_pgm: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let g = GeometryConfig::default();
        let c = SplitCounts::default();
        Self {
            preset: g.preset,
            height: g.height,
            width: g.width,
            noise_sigma: g.noise_sigma,
            bias_amplitude: g.bias_amplitude,
            train: c.train,
            val: c.val,
            test: c.test,
            merge_fraction: 0.5,
            export_pgm: false,
        }
    }
}

impl DatasetConfig {
    pub fn geometry(&self) -> GeometryConfig {
        GeometryConfig { preset: self.preset, height: self.height, width: self.width, noise_sigma: self.noise_sigma, bias_amplitude: self.bias_amplitude }
    }

    pub fn counts(&self) -> SplitCounts {
        SplitCounts { train: self.train, val: self.val, test: self.test }
    }
}

/// Training settings shared by all arms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eval_every: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub skip: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self { epochs: t.epochs, batch_size: t.batch_size, lr: t.lr, eval_every: t.eval_every, depth: t.depth, base_channels: t.base_channels, skip: t.skip }
    }
}

/// Per-arm replacements for [`TrainSettings`] fields.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverride {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub eval_every: Option<usize>,
    pub depth: Option<usize>,
    pub base_channels: Option<usize>,
    pub skip: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Train the arms on separate threads.
    pub parallel: bool,
    pub arms: Vec<Arm>,
    pub out_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub train: TrainSettings,
    pub overrides: BTreeMap<Arm, TrainOverride>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            parallel: false,
            arms: Arm::ALL.to_vec(),
            out_dir: None,
            dataset: DatasetConfig::default(),
            train: TrainSettings::default(),
            overrides: BTreeMap::new(),
        }
    }
}

/// Seed for an arm's weight initialisation and shuffling.
pub fn arm_seed(seed: u64, arm: Arm) -> u64 {
    let index = Arm::ALL.iter().position(|&a| a == arm).expect("known arm") as u64;
    derive_seed(seed, 0x6172_6d00 + index)
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let config: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_toml(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// SHA-256 of the canonical TOML form, hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes()).iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.seed > i64::MAX as u64 {
            return Err(HarnessError::Config(format!("seed {} exceeds {}", self.seed, i64::MAX)));
        }
        if self.arms.is_empty() {
            return Err(HarnessError::Config("arms must name at least one arm".into()));
        }
        for arm in Arm::ALL {
            self.train_config(arm, None).validate().map_err(|e| HarnessError::Config(format!("arm {arm}: {e}")))?;
        }
        Ok(())
    }

    pub fn train_config(&self, arm: Arm, checkpoint_dir: Option<PathBuf>) -> TrainConfig {
        let t = &self.train;
        let o = self.overrides.get(&arm).cloned().unwrap_or_default();
        TrainConfig {
            arm,
            epochs: o.epochs.unwrap_or(t.epochs),
            batch_size: o.batch_size.unwrap_or(t.batch_size),
            seed: arm_seed(self.seed, arm),
            lr: o.lr.unwrap_or(t.lr),
            eval_every: o.eval_every.unwrap_or(t.eval_every),
            checkpoint_dir,
            depth: o.depth.unwrap_or(t.depth),
            base_channels: o.base_channels.unwrap_or(t.base_channels),
            skip: o.skip.unwrap_or(t.skip),
        }
    }
}

/// Copy of the experiment config stored next to the generated data.
pub const CONFIG_FILE: &str = "config.toml";

/// Generates the dataset under `out`, saves the config as [`CONFIG_FILE`]
/// and returns the manifest.
pub fn generate_data(config: &ExperimentConfig, out: &Path) -> Result<DatasetManifest, HarnessError> {
    config.validate()?;
    let d = &config.dataset;
    let manifest = build_dataset(config.seed, &d.geometry(), d.counts(), d.merge_fraction, d.preset.super_id(), out, d.export_pgm)?;
    let path = out.join(CONFIG_FILE);
    fs::write(&path, config.to_toml()).map_err(io_err(&path))?;
    Ok(manifest)
}

/// Training and validation items an arm sees.
pub fn arm_data(out: &Path, manifest: &DatasetManifest, arm: Arm) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>), HarnessError> {
    let load = |split: Split| -> Result<Vec<LabeledImage>, DataError> {
        let items = manifest.items_in(split);
        match arm {
            Arm::Lb => load_items(out, manifest, items.filter(|i| !i.merged), LabelSource::Full),
            Arm::Ub => load_items(out, manifest, items, LabelSource::Full),
            Arm::Naive | Arm::Slac => load_items(out, manifest, items, LabelSource::AsAnnotated),
        }
    };
    Ok((load(Split::Train)?, load(Split::Val)?))
}

pub fn test_data(out: &Path, manifest: &DatasetManifest) -> Result<Vec<LabeledImage>, HarnessError> {
    Ok(load_items(out, manifest, manifest.items_in(Split::Test), LabelSource::Full)?)
}

pub fn checkpoint_dir(out: &Path, arm: Arm) -> PathBuf {
    out.join("ckpt").join(arm.name())
}

pub fn report_path(out: &Path, arm: Arm) -> PathBuf {
    out.join(format!("report_{}.csv", arm.name()))
}

/// Trains one arm on the dataset already generated under `out`.
pub fn train_arm(config: &ExperimentConfig, out: &Path, arm: Arm) -> Result<TrainOutcome, HarnessError> {
    let manifest = DatasetManifest::load(out)?;
    let (train_set, val_set) = arm_data(out, &manifest, arm)?;
    let tc = config.train_config(arm, Some(checkpoint_dir(out, arm)));
    Ok(train(&tc, &manifest.scheme, &train_set, &val_set)?)
}

/// Scores an arm's best checkpoint on the test split and writes its report.
pub fn eval_arm(out: &Path, arm: Arm) -> Result<ArmReport, HarnessError> {
    let manifest = DatasetManifest::load(out)?;
    let ckpt = read_checkpoint(&checkpoint_dir(out, arm).join("best.ckpt"))?;
    let test = test_data(out, &manifest)?;
    let report = evaluate_arm(arm.name(), &ckpt.model, &test, &manifest.scheme)?;
    report.write_csv(&report_path(out, arm))?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Metric {
    Dsc,
    Assd,
    Hd,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Dsc, Metric::Assd, Metric::Hd];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Dsc => "dsc",
            Metric::Assd => "assd",
            Metric::Hd => "hd",
        }
    }

    fn mean(self, s: &StructureStats) -> f64 {
        match self {
            Metric::Dsc => s.dsc.mean,
            Metric::Assd => s.assd.mean,
            Metric::Hd => s.hd.mean,
        }
    }

    fn std(self, s: &StructureStats) -> f64 {
        match self {
            Metric::Dsc => s.dsc.std,
            Metric::Assd => s.assd.std,
            Metric::Hd => s.hd.std,
        }
    }

    fn better(self, a: f64, b: f64) -> bool {
        match self {
            Metric::Dsc => a > b,
            _ => a < b,
        }
    }
}

/// Per-arm reports side by side. `None` marks an arm that failed or was not run.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub arms: Vec<(Arm, Option<ArmReport>)>,
}

pub const COMPARISON_HEADER: &str = "structure,arm,status,dsc_mean,dsc_std,assd_mean,assd_std,hd_mean,hd_std,dsc_best,assd_best,hd_best";

impl ComparisonTable {
    /// Reads `report_<arm>.csv` for every arm; missing files become absent arms.
    pub fn from_dir(out: &Path) -> Result<Self, HarnessError> {
        let mut arms = Vec::new();
        for arm in Arm::ALL {
            let path = report_path(out, arm);
            arms.push((arm, if path.is_file() { Some(ArmReport::read_csv(&path)?) } else { None }));
        }
        if arms.iter().all(|(_, r)| r.is_none()) {
            return Err(HarnessError::NoReports(out.display().to_string()));
        }
        Ok(Self { arms })
    }

    pub fn report(&self, arm: Arm) -> Option<&ArmReport> {
        self.arms.iter().find(|(a, _)| *a == arm).and_then(|(_, r)| r.as_ref())
    }

    /// Structure names in row order, the average row last.
    pub fn structures(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for (_, r) in &self.arms {
            for s in r.iter().flat_map(|r| r.rows()) {
                if !names.contains(&s.structure) {
                    names.push(s.structure.clone());
                }
            }
        }
        if let Some(i) = names.iter().position(|n| n == AVERAGE_ROW) {
            let avg = names.remove(i);
            names.push(avg);
        }
        names
    }

    fn row(&self, arm: Arm, structure: &str) -> Option<&StructureStats> {
        self.report(arm).and_then(|r| r.rows().find(|s| s.structure == structure))
    }

    /// Whether `arm` has the best value of `metric` for `structure` among the
    /// non-UB arms. Ties flag every tied arm.
    pub fn is_winner(&self, arm: Arm, structure: &str, metric: Metric) -> bool {
        if arm == Arm::Ub {
            return false;
        }
        let Some(v) = self.row(arm, structure).map(|s| metric.mean(s)).filter(|v| !v.is_nan()) else {
            return false;
        };
        !self
            .arms
            .iter()
            .filter(|(a, _)| *a != Arm::Ub)
            .filter_map(|(a, _)| self.row(*a, structure))
            .any(|s| metric.better(metric.mean(s), v))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(COMPARISON_HEADER);
        s.push('\n');
        for structure in self.structures() {
            for (arm, _) in &self.arms {
                match self.row(*arm, &structure) {
                    Some(row) => {
                        let _ = write!(s, "{structure},{arm},ok");
                        for m in Metric::ALL {
                            let _ = write!(s, ",{:.6},{:.6}", m.mean(row), m.std(row));
                        }
                        for m in Metric::ALL {
                            let _ = write!(s, ",{}", u8::from(self.is_winner(*arm, &structure, m)));
                        }
                        s.push('\n');
                    }
                    None => {
                        let _ = writeln!(s, "{structure},{arm},absent,,,,,,,,,");
                    }
                }
            }
        }
        s
    }

    /// Plain-text table: one row per structure and arm, best non-UB values starred.
    pub fn render(&self) -> String {
        let mut s = format!("{:<12} {:<6} {:>18} {:>18} {:>18}\n", "structure", "arm", "DSC", "ASSD", "HD");
        for structure in self.structures() {
            for (arm, _) in &self.arms {
                let _ = write!(s, "{structure:<12} {:<6}", arm.name());
                match self.row(*arm, &structure) {
                    Some(row) => {
                        for m in Metric::ALL {
                            let star = if self.is_winner(*arm, &structure, m) { "*" } else { " " };
                            let _ = write!(s, " {:>17}{star}", format!("{:.3} ({:.3})", m.mean(row), m.std(row)));
                        }
                    }
                    None => s.push_str("   (absent)"),
                }
                s.push('\n');
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArmStatus {
    Ok { best_epoch: u32, best_val_loss: f64, wall_secs: f64 },
    Failed(String),
    Skipped,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub table: ComparisonTable,
    pub status: Vec<(Arm, ArmStatus)>,
}

fn run_arm(config: &ExperimentConfig, out: &Path, arm: Arm) -> ArmStatus {
    let started = Instant::now();
    let result = train_arm(config, out, arm).and_then(|outcome| eval_arm(out, arm).map(|_| outcome));
    match result {
        Ok(o) => ArmStatus::Ok { best_epoch: o.best.epoch, best_val_loss: o.best.val_loss, wall_secs: started.elapsed().as_secs_f64() },
        Err(e) => {
            let _ = fs::remove_file(report_path(out, arm));
            ArmStatus::Failed(e.to_string())
        }
    }
}

/// Generates the dataset, trains and evaluates every configured arm, and
/// writes the comparison table and provenance record.
pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> Result<ExperimentOutcome, HarnessError> {
    config.validate()?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    generate_data(config, out)?;
    for arm in Arm::ALL {
        let _ = fs::remove_file(report_path(out, arm));
    }

    let selected: Vec<Arm> = Arm::ALL.into_iter().filter(|a| config.arms.contains(a)).collect();
    let results: Vec<ArmStatus> = if config.parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = selected.iter().map(|&arm| scope.spawn(move || run_arm(config, out, arm))).collect();
            handles.into_iter().map(|h| h.join().unwrap_or_else(|_| ArmStatus::Failed("training thread panicked".into()))).collect()
        })
    } else {
        selected.iter().map(|&arm| run_arm(config, out, arm)).collect()
    };
    let mut status: Vec<(Arm, ArmStatus)> = selected.into_iter().zip(results).collect();
    for arm in Arm::ALL {
        if !config.arms.contains(&arm) {
            status.push((arm, ArmStatus::Skipped));
        }
    }
    status.sort_by_key(|(a, _)| *a);

    let table = ComparisonTable::from_dir(out)?;
    let path = out.join("comparison.csv");
    fs::write(&path, table.to_csv()).map_err(io_err(&path))?;
    let path = out.join("provenance.txt");
    fs::write(&path, provenance(config, &status)).map_err(io_err(&path))?;
    Ok(ExperimentOutcome { table, status })
}

fn provenance(config: &ExperimentConfig, status: &[(Arm, ArmStatus)]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "hetseg-core {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(s, "config_sha256 {}", config.hash());
    let _ = writeln!(s, "seed {}", config.seed);
    for (arm, st) in status {
        let _ = write!(s, "arm {arm} seed {} ", arm_seed(config.seed, *arm));
        let _ = match st {
            ArmStatus::Ok { best_epoch, best_val_loss, wall_secs } => writeln!(s, "ok best_epoch {best_epoch} best_val_loss {best_val_loss:.6} wall_secs {wall_secs:.1}"),
            ArmStatus::Failed(e) => writeln!(s, "failed {e}"),
            ArmStatus::Skipped => writeln!(s, "skipped"),
        };
    }
    s.push_str("\n[config]\n");
    s.push_str(&config.to_toml());
    s
}
