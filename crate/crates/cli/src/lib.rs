//! Command line front end: `hetseg <gen-data|train|eval|report|run-all>`.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};
use hetseg_core::harness::{self, ArmStatus, ComparisonTable, ExperimentConfig, HarnessError, CONFIG_FILE};
use hetseg_core::model::Arm;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

const DEFAULT_OUT: &str = "hetseg-out";

#[derive(Debug, Parser)]
#[command(name = "hetseg", version, about = "Train and compare segmentation models on partially merged annotations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dataset and its manifest.
    GenData(Common),
    /// Train one arm, or every configured arm, on generated data.
    Train(WithArm),
    /// Score trained arms on the test split and write their reports.
    Eval(WithArm),
    /// Print the comparison table built from the arm reports.
    Report(Common),
    /// Generate data, train and evaluate all arms, write the comparison.
    RunAll(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (TOML). Defaults to the config saved with the data, then built-in defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Global seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the config [default: hetseg-out].
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct WithArm {
    #[command(flatten)]
    common: Common,
    /// Arm to run: lb, naive, slac or ub. Defaults to every arm in the config.
    #[arg(long, value_parser = parse_arm)]
    arm: Option<Arm>,
}

fn parse_arm(s: &str) -> Result<Arm, String> {
    Arm::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| format!("unknown arm '{s}' (expected lb, naive, slac or ub)"))
}

impl Common {
    /// Resolves the config and output directory. A saved config in the
    /// output directory is used when `--config` is absent.
    fn resolve(&self, prefer_saved: bool) -> Result<(ExperimentConfig, PathBuf), HarnessError> {
        let explicit_out = self.out.clone();
        let mut config = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => {
                let saved = explicit_out.as_deref().unwrap_or(Path::new(DEFAULT_OUT)).join(CONFIG_FILE);
                if prefer_saved && saved.is_file() {
                    ExperimentConfig::load(&saved)?
                } else {
                    ExperimentConfig::default()
                }
            }
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        config.validate()?;
        let out = explicit_out.or_else(|| config.out_dir.clone()).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
        Ok((config, out))
    }
}

fn arms(config: &ExperimentConfig, arm: Option<Arm>) -> Vec<Arm> {
    match arm {
        Some(a) => vec![a],
        None => Arm::ALL.into_iter().filter(|a| config.arms.contains(a)).collect(),
    }
}

fn execute(command: Command, stdout: &mut dyn Write) -> Result<(), HarnessError> {
    let say = |stdout: &mut dyn Write, line: String| {
        let _ = writeln!(stdout, "{line}");
    };
    match command {
        Command::GenData(c) => {
            let (config, out) = c.resolve(false)?;
            let m = harness::generate_data(&config, &out)?;
            say(stdout, format!("wrote {} items ({} merged) to {}", m.items.len(), m.items.iter().filter(|i| i.merged).count(), out.display()));
        }
        Command::Train(w) => {
            let (config, out) = w.common.resolve(true)?;
            for arm in arms(&config, w.arm) {
                let o = harness::train_arm(&config, &out, arm)?;
                say(stdout, format!("{arm}: best epoch {} val loss {:.6}", o.best.epoch, o.best.val_loss));
            }
        }
        Command::Eval(w) => {
            let (config, out) = w.common.resolve(true)?;
            for arm in arms(&config, w.arm) {
                let r = harness::eval_arm(&out, arm)?;
                say(stdout, format!("{arm}: mean dsc {:.4} -> {}", r.average.dsc.mean, harness::report_path(&out, arm).display()));
            }
        }
        Command::Report(c) => {
            let (_, out) = c.resolve(true)?;
            let table = ComparisonTable::from_dir(&out)?;
            let path = out.join("comparison.csv");
            std::fs::write(&path, table.to_csv()).map_err(|source| HarnessError::Io { path: path.display().to_string(), source })?;
            let _ = write!(stdout, "{}", table.render());
        }
        Command::RunAll(c) => {
            let (config, out) = c.resolve(false)?;
            let outcome = harness::run_experiment(&config, &out)?;
            let _ = write!(stdout, "{}", outcome.table.render());
            for (arm, status) in &outcome.status {
                match status {
                    ArmStatus::Ok { best_epoch, wall_secs, .. } => say(stdout, format!("{arm}: ok (best epoch {best_epoch}, {wall_secs:.1}s)")),
                    ArmStatus::Failed(e) => say(stdout, format!("{arm}: failed: {e}")),
                    ArmStatus::Skipped => {}
                }
            }
            if !outcome.status.iter().any(|(_, s)| matches!(s, ArmStatus::Ok { .. })) {
                return Err(HarnessError::NoReports(out.display().to_string()));
            }
        }
    }
    Ok(())
}

/// Runs the CLI on `argv` (including the program name), writing normal
/// output to `stdout` and diagnostics to `stderr`. Returns the exit code.
pub fn run_with<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let mut text = e.render().to_string();
            if e.kind() == ErrorKind::UnknownArgument {
                text.push_str(&valid_flags(&argv));
            }
            let _ = if code == EXIT_OK { write!(stdout, "{text}") } else { write!(stderr, "{text}") };
            return code;
        }
    };
    match execute(cli.command, stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            EXIT_RUNTIME
        }
    }
}

/// "valid flags: ..." for the subcommand named in `argv`, or the top level.
fn valid_flags(argv: &[OsString]) -> String {
    let root = Cli::command();
    let cmd = argv.iter().skip(1).find_map(|a| root.find_subcommand(a)).unwrap_or(&root);
    let mut flags: Vec<String> = cmd.get_arguments().filter_map(|a| a.get_long()).map(|l| format!("--{l}")).collect();
    flags.push("--help".into());
    if cmd.get_name() == root.get_name() {
        flags.push("--version".into());
    }
    format!("valid flags: {}\n", flags.join(", "))
}

pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(argv, &mut std::io::stdout(), &mut std::io::stderr())
}
