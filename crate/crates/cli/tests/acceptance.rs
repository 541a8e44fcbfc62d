//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. The desk-scale experiments take roughly
//! 15 minutes on one core.

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use hetseg_core::harness::{run_experiment, ArmStatus, ExperimentConfig, ExperimentOutcome};
use hetseg_core::labelspace::LabelId;
use hetseg_core::losses::{compute_loss, finite_diff_grad, max_relative_error, naive_loss, slac_loss, xent_loss, Batch, LossKind, Reduction};
use hetseg_core::metrics::{assd, dice, hausdorff, surface_distances, DistanceMode};
use hetseg_core::model::Arm;
use hetseg_core::synthdata::{decode, encode, read_item, write_item, FormatError, HsegArray, Preset};
use hetseg_core::testkit::{random_batch, random_logits, random_mask_pair, BatchSpec};
use hetseg_core::{LabelMap, LabelScheme, SuperLabel, Tensor, ValidityMask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DESK: &str = include_str!("../../../configs/desk.toml");

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn gradient_oracle() -> Verdict {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let mut worst = 0.0f64;
    for kind in LossKind::ALL {
        let spec = BatchSpec { merged: if kind == LossKind::Xent { 0.0 } else { 0.3 }, ..Default::default() };
        for _ in 0..50 {
            let batch = random_batch(&mut rng, &spec);
            let analytic = compute_loss(kind, &batch, Reduction::Mean).unwrap().grad;
            let numeric = finite_diff_grad(kind, &batch, 1e-5).unwrap();
            worst = worst.max(max_relative_error(&analytic, &numeric));
        }
    }
    let secs = started.elapsed().as_secs_f64();
    verdict(worst < 1e-4 && secs < 30.0, format!("max relative error {worst:.2e}, {secs:.1}s"))
}

fn reduction_identities() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1002);
    let mut mismatches = 0;
    for _ in 0..100 {
        let batch = random_batch(&mut rng, &BatchSpec { merged: 0.0, ..Default::default() });
        let x = xent_loss(&batch).unwrap();
        for other in [naive_loss(&batch).unwrap(), slac_loss(&batch).unwrap()] {
            mismatches += usize::from(other.value.to_bits() != x.value.to_bits() || other.grad != x.grad);
        }
    }
    let mut nonzero = 0;
    for c in 2..=6usize {
        let all: BTreeSet<LabelId> = (0..c as LabelId).collect();
        let scheme = LabelScheme::new(c, vec![SuperLabel { id: c as LabelId, members: all, name: None }]).unwrap();
        let logits = random_logits(&mut rng, [2, 4, 4, c], 5.0);
        let batch = Batch::new(logits, vec![LabelMap::filled(4, 4, c as LabelId); 2], vec![ValidityMask::zeros(4, 4); 2], scheme).unwrap();
        nonzero += usize::from(slac_loss(&batch).unwrap().value != 0.0);
    }
    verdict(mismatches == 0 && nonzero == 0, format!("{mismatches} bitwise mismatches over 100 batches, {nonzero} non-zero full-super losses"))
}

fn metric_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1003);
    let (mut differ, mut asymmetric) = (0, 0);
    for _ in 0..100 {
        let (a, b) = random_mask_pair(&mut rng, 16);
        let fast = surface_distances(&a, &b, DistanceMode::Transform).unwrap();
        let slow = surface_distances(&a, &b, DistanceMode::BruteForce).unwrap();
        differ += usize::from(fast.assd.to_bits() != slow.assd.to_bits() || fast.hausdorff.to_bits() != slow.hausdorff.to_bits());
        let sym = dice(&a, &b).unwrap().to_bits() == dice(&b, &a).unwrap().to_bits()
            && assd(&a, &b).unwrap().to_bits() == assd(&b, &a).unwrap().to_bits()
            && hausdorff(&a, &b).unwrap().to_bits() == hausdorff(&b, &a).unwrap().to_bits();
        asymmetric += usize::from(!sym);
    }
    verdict(differ == 0 && asymmetric == 0, format!("{differ} transform/brute-force differences, {asymmetric} asymmetric pairs"))
}

fn format_round_trip(dir: &Path) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1006);
    let mut bad = 0;
    for i in 0..1000 {
        let (h, w, c) = (rng.random_range(1..48), rng.random_range(1..48), rng.random_range(1..4));
        let image = Tensor::new(vec![h, w, c], (0..h * w * c).map(|_| f64::from(rng.random::<f32>() * 8.0 - 4.0)).collect()).unwrap();
        let labels = LabelMap::new(h, w, (0..h * w).map(|_| rng.random()).collect()).unwrap();
        let (ip, lp) = (dir.join(format!("{i}.img")), dir.join(format!("{i}.lbl")));
        write_item(&ip, &lp, &image, &labels).unwrap();
        let (ri, rl) = read_item(&ip, &lp).unwrap();
        let same = ri.shape() == image.shape() && ri.data().iter().zip(image.data()).all(|(a, b)| a.to_bits() == b.to_bits()) && rl == labels;
        bad += usize::from(!same);
    }
    let bytes = encode(&HsegArray::Labels(LabelMap::filled(5, 7, 2))).unwrap();
    let mut magic = bytes.clone();
    magic[1] ^= 0xff;
    let e1 = decode(&magic).unwrap_err();
    let e2 = decode(&bytes[..bytes.len() - 3]).unwrap_err();
    let distinct = matches!(e1, FormatError::BadMagic) && matches!(e2, FormatError::Truncated { .. }) && e1.to_string() != e2.to_string();
    verdict(bad == 0 && distinct, format!("{bad} of 1000 items changed, corruption errors: \"{e1}\" / \"{e2}\""))
}

fn desk_config() -> ExperimentConfig {
    ExperimentConfig::from_toml(DESK).unwrap()
}

fn merged_structures() -> Vec<String> {
    let scheme = Preset::Thigh.scheme();
    scheme.super_label(Preset::Thigh.super_id()).unwrap().members.iter().map(|&id| scheme.name(id)).collect()
}

fn merged_dsc(outcome: &ExperimentOutcome, arm: Arm) -> Option<f64> {
    let names = merged_structures();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    outcome.table.report(arm)?.mean_dsc_of(&refs)
}

fn average_dsc(outcome: &ExperimentOutcome, arm: Arm) -> Option<f64> {
    outcome.table.report(arm).map(|r| r.average.dsc.mean)
}

fn desk_experiment(root: &Path) -> Vec<(&'static str, Verdict)> {
    let config = desk_config();
    let outcome = run_experiment(&config, &root.join("desk")).unwrap();
    print!("{}", outcome.table.render());
    let mut secs = Vec::new();
    for (arm, status) in &outcome.status {
        println!("  {arm}: {status:?}");
        if let ArmStatus::Ok { wall_secs, .. } = status {
            secs.push(*wall_secs);
        }
    }
    let ub = average_dsc(&outcome, Arm::Ub);
    let slac = average_dsc(&outcome, Arm::Slac);
    let a = verdict(ub.is_some_and(|d| d >= 0.90), format!("UB mean DSC {}", fmt(ub)));

    let gap = |o: &ExperimentOutcome| Some(merged_dsc(o, Arm::Slac)? - merged_dsc(o, Arm::Naive)?);
    let first = gap(&outcome);
    let b = if first.is_some_and(|g| g >= 0.02) {
        verdict(true, format!("seed {}: slac - naive on merged structures {}", config.seed, fmt(first)))
    } else {
        let mut gaps = vec![first];
        for k in 1..5 {
            let c = ExperimentConfig { seed: config.seed + k, arms: vec![Arm::Naive, Arm::Slac], ..config.clone() };
            let o = run_experiment(&c, &root.join(format!("desk_seed{}", c.seed))).unwrap();
            gaps.push(gap(&o));
        }
        let held = gaps.iter().filter(|g| g.is_some_and(|g| g >= 0.02)).count();
        let listed: Vec<String> = gaps.iter().map(|g| fmt(*g)).collect();
        verdict(held >= 4, format!("gap held on {held} of 5 seeds ({})", listed.join(", ")))
    };
    let c = verdict(
        matches!((slac, ub), (Some(s), Some(u)) if (s - u).abs() <= 0.05),
        format!("SLAC mean DSC {} vs UB {}", fmt(slac), fmt(ub)),
    );
    let slowest = secs.iter().copied().fold(0.0f64, f64::max);
    let d = verdict(secs.len() == 4 && slowest <= 600.0, format!("{} arms finished, slowest {slowest:.0}s on one thread", secs.len()));
    vec![("4a", a), ("4b", b), ("4c", c), ("4d", d)]
}

fn determinism(root: &Path) -> Verdict {
    let config = root.join("det.toml");
    let mut c = desk_config();
    c.train.epochs = 2;
    std::fs::write(&config, c.to_toml()).unwrap();
    let mut sink = Vec::new();
    let mut outputs = Vec::new();
    for run in ["det_a", "det_b"] {
        let out = root.join(run);
        let args = ["hetseg", "run-all", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
        let code = hetseg_cli::run_with(args, &mut sink, &mut std::io::stderr());
        assert_eq!(code, 0);
        outputs.push(std::fs::read(out.join("comparison.csv")).unwrap());
    }
    verdict(outputs[0] == outputs[1], format!("two run-all invocations, {} byte comparison.csv each", outputs[0].len()))
}

fn control(root: &Path) -> Verdict {
    let mut config = desk_config();
    config.dataset.merge_fraction = 0.0;
    let outcome = run_experiment(&config, &root.join("control")).unwrap();
    print!("{}", outcome.table.render());
    let dsc: Vec<Option<f64>> = Arm::ALL.iter().map(|&a| average_dsc(&outcome, a)).collect();
    let listed: Vec<String> = Arm::ALL.iter().zip(&dsc).map(|(a, d)| format!("{a} {}", fmt(*d))).collect();
    let spread = if dsc.iter().all(Option::is_some) {
        let v: Vec<f64> = dsc.iter().flatten().copied().collect();
        Some(v.iter().copied().fold(f64::MIN, f64::max) - v.iter().copied().fold(f64::MAX, f64::min))
    } else {
        None
    };
    verdict(spread.is_some_and(|s| s <= 0.02), format!("spread {} ({})", fmt(spread), listed.join(", ")))
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_owned(), |v| format!("{v:.4}"))
}

fn main() {
    let root = tempfile::tempdir().unwrap();
    let formats = root.path().join("formats");
    std::fs::create_dir_all(&formats).unwrap();

    let mut results: Vec<(&str, &str, Verdict)> = vec![
        ("1", "gradient oracle", gradient_oracle()),
        ("2", "reduction identities", reduction_identities()),
        ("3", "metric oracle equivalence", metric_oracle()),
    ];
    for (id, v) in desk_experiment(root.path()) {
        let name = match id {
            "4a" => "desk experiment: UB quality",
            "4b" => "desk experiment: SLAC beats naive on merged structures",
            "4c" => "desk experiment: SLAC close to UB",
            _ => "desk experiment: runtime per arm",
        };
        results.push((id, name, v));
    }
    results.push(("5", "determinism", determinism(root.path())));
    results.push(("6", "format round-trip", format_round_trip(&formats)));
    results.push(("7", "control experiment", control(root.path())));

    println!();
    for (id, name, v) in &results {
        println!("criterion {id:<3} {:<4} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    let failed = results.iter().filter(|(_, _, v)| !v.pass).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
