use hetseg_core::labelspace::mask_from_labels;
use hetseg_core::losses::LossKind;
use hetseg_core::model::{read_checkpoint, train, Architecture, Arm, Checkpoint, TrainConfig};
use hetseg_core::synthdata::{generate_scene, stack_images, GeometryConfig, LabeledImage, Preset};
use hetseg_core::testkit::{random_labels, random_scheme};
use hetseg_core::{AdamState, LabelMap, SegModel, Tensor, ValidityMask};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> Architecture {
    Architecture { in_channels: 1, num_classes: 4, depth: 1, base_channels: 4, skip: true }
}

fn noise_image(rng: &mut ChaCha8Rng, b: usize, h: usize, w: usize) -> Tensor {
    Tensor::new(vec![b, h, w, 1], (0..b * h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

fn loss_at(model: &SegModel, images: &Tensor, labels: &[LabelMap], masks: &[ValidityMask], scheme: &hetseg_core::LabelScheme, kind: LossKind) -> f64 {
    model.backward(images, labels, masks, scheme, kind).unwrap().1.value
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let scheme = random_scheme(&mut rng, 4);
    let model = SegModel::new(tiny(), 3).unwrap();
    assert!(model.num_params() <= 10_000);
    let images = noise_image(&mut rng, 2, 8, 8);
    let labels: Vec<LabelMap> = (0..2).map(|_| random_labels(&mut rng, &scheme, 8, 8, 0.3)).collect();
    let masks: Vec<ValidityMask> = labels.iter().map(|l| mask_from_labels(l, &scheme).unwrap()).collect();
    for kind in [LossKind::Naive, LossKind::Slac] {
        let (grads, _) = model.backward(&images, &labels, &masks, &scheme, kind).unwrap();
        let n = model.num_params();
        let picks = sample(&mut rng, n, (n / 100).max(10));
        let fd = |i: usize, h: f32| {
            let mut plus = model.clone();
            plus.params_mut()[i] += h;
            let mut minus = model.clone();
            minus.params_mut()[i] -= h;
            let step = f64::from(plus.params()[i]) - f64::from(minus.params()[i]);
            (loss_at(&plus, &images, &labels, &masks, &scheme, kind) - loss_at(&minus, &images, &labels, &masks, &scheme, kind)) / step
        };
        // f32 forward passes leave ~1e-6 absolute noise in the estimates, hence the floor.
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-2);
        let (mut checked, mut kinked) = (0, 0);
        for i in picks.iter() {
            // A ReLU switching inside the step makes neighbouring estimates disagree;
            // shrink the step until two of them agree.
            let ladder: Vec<f64> = [2e-3, 1e-3, 5e-4, 2.5e-4].iter().map(|&h| fd(i, h)).collect();
            let Some(pair) = ladder.windows(2).find(|w| rel(w[0], w[1]) < 5e-4) else {
                kinked += 1;
                continue;
            };
            let g = f64::from(grads[i]);
            assert!(rel(g, pair[0]) < 1e-3, "{kind:?} param {i}: analytic {g} numeric {}", pair[0]);
            checked += 1;
        }
        assert!(kinked * 10 <= checked + kinked, "{kinked} of {} samples straddle a kink", checked + kinked);
        assert!(checked >= 9);
    }
}

#[test]
fn confident_correct_prediction_has_vanishing_gradient() {
    let scheme = Preset::Cardiac.scheme();
    let mut model = SegModel::zeroed(tiny()).unwrap();
    let r = model.classifier_range();
    let bias_start = r.end - 4;
    model.params_mut()[bias_start] = 60.0;
    let images = Tensor::zeros(vec![1, 8, 8, 1]);
    let labels = vec![LabelMap::filled(8, 8, 0)];
    let masks = vec![ValidityMask::ones(8, 8)];
    let (grads, loss) = model.backward(&images, &labels, &masks, &scheme, LossKind::Xent).unwrap();
    assert!(loss.value < 1e-20);
    let norm = grads.iter().map(|&g| f64::from(g).powi(2)).sum::<f64>().sqrt();
    assert!(norm < 1e-6, "{norm}");
}

fn scenes(seed: u64, n: usize) -> Vec<LabeledImage> {
    let g = GeometryConfig { height: 32, width: 32, ..Default::default() };
    let scheme = Preset::Thigh.scheme();
    (0..n)
        .map(|i| {
            let s = generate_scene(seed * 1000 + i as u64, &g).unwrap();
            let mask = mask_from_labels(&s.labels, &scheme).unwrap();
            LabeledImage { image: s.image, labels: s.labels, mask }
        })
        .collect()
}

fn small_config(arm: Arm, epochs: usize) -> TrainConfig {
    TrainConfig { arm, epochs, batch_size: 4, seed: 5, lr: 1e-3, base_channels: 4, depth: 1, ..Default::default() }
}

#[test]
fn loss_decreases_over_the_first_steps_at_small_rate() {
    let scheme = Preset::Thigh.scheme();
    let data = scenes(1, 4);
    let refs: Vec<&LabeledImage> = data.iter().collect();
    let images = stack_images(&refs);
    let labels: Vec<LabelMap> = data.iter().map(|d| d.labels.clone()).collect();
    let masks: Vec<ValidityMask> = data.iter().map(|d| d.mask.clone()).collect();
    let mut model = SegModel::new(Architecture { base_channels: 8, ..Architecture::new(1, 5) }, 9).unwrap();
    let mut adam = AdamState::new(model.num_params(), 1e-3);
    let mut losses = Vec::new();
    for _ in 0..11 {
        let (g, l) = model.backward(&images, &labels, &masks, &scheme, LossKind::Xent).unwrap();
        losses.push(l.value);
        adam.step(model.params_mut(), &g).unwrap();
    }
    assert!(losses[10] < losses[0], "{losses:?}");
}

#[test]
fn training_selects_the_best_validation_checkpoint() {
    let scheme = Preset::Thigh.scheme();
    let (tr, va) = (scenes(2, 8), scenes(3, 4));
    let one = train(&small_config(Arm::Ub, 1), &scheme, &tr, &va).unwrap();
    assert_eq!(one.best.epoch, 1);

    let dir = tempfile::tempdir().unwrap();
    let config = TrainConfig { checkpoint_dir: Some(dir.path().to_path_buf()), ..small_config(Arm::Slac, 4) };
    let out = train(&config, &scheme, &tr, &va).unwrap();
    let vals: Vec<f64> = out.log.epochs.iter().filter_map(|e| e.val_loss).collect();
    assert_eq!(vals.len(), 4);
    let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
    assert_eq!(out.best.val_loss, min);
    assert_eq!(out.log.best_val_loss(), Some(min));
    assert!(out.best.val_loss <= *vals.last().unwrap());

    let disk = read_checkpoint(&dir.path().join("best.ckpt")).unwrap();
    assert_eq!(disk.model.params(), out.best.model.params());
    assert_eq!(disk.epoch, out.best.epoch);
    let last: Checkpoint = read_checkpoint(&dir.path().join("last.ckpt")).unwrap();
    assert_eq!(last.model.params(), out.final_model.params());
    let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,train_loss,val_loss,wall_ms\n"));
    assert_eq!(log.lines().count(), 5);
}

#[test]
fn training_is_deterministic() {
    let scheme = Preset::Thigh.scheme();
    let (tr, va) = (scenes(4, 8), scenes(5, 4));
    let a = train(&small_config(Arm::Naive, 2), &scheme, &tr, &va).unwrap();
    let b = train(&small_config(Arm::Naive, 2), &scheme, &tr, &va).unwrap();
    assert_eq!(a.final_model.params(), b.final_model.params());
    assert_eq!(a.best.to_bytes(), b.best.to_bytes());
}

#[test]
fn crossentropy_arms_refuse_merged_labels() {
    let scheme = Preset::Thigh.scheme();
    let mut tr = scenes(6, 4);
    tr[1].labels.values[0] = scheme.super_labels()[0].id;
    tr[1].mask = mask_from_labels(&tr[1].labels, &scheme).unwrap();
    let va = scenes(7, 2);
    assert!(train(&small_config(Arm::Ub, 1), &scheme, &tr, &va).is_err());
    assert!(train(&small_config(Arm::Slac, 1), &scheme, &tr, &va).is_ok());
    assert!(train(&small_config(Arm::Slac, 1), &scheme, &tr, &[]).is_err());
}
