use neurovox_core::data_io::{load_checkpoint, save_checkpoint};
use neurovox_core::engine::{ModelParams, Tensor};
use neurovox_core::models::{Architecture, DenseNet, DenseNetConfig};
use neurovox_core::training::*;
use neurovox_core::windowing::ExampleSource;
use neurovox_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Windows of 4 channels × 6 samples whose 3 targets are fixed linear
/// read-outs of per-channel means.
struct Toy {
    x: Vec<Vec<f32>>,
    y: Vec<Vec<f32>>,
}

impl Toy {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let level: Vec<f32> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w: Vec<f32> = (0..24).map(|i| level[i / 6] + 0.1 * rng.random_range(-1.0f32..1.0)).collect();
            y.push(vec![
                2.0 * level[0] - level[1],
                level[2] + level[3],
                -level[0] + 0.5 * level[3] + 1.0,
            ]);
            x.push(w);
        }
        Self { x, y }
    }
}

impl ExampleSource for Toy {
    fn len(&self) -> usize {
        self.x.len()
    }
    fn input_shape(&self) -> Vec<usize> {
        vec![1, 2, 2, 6]
    }
    fn target_shape(&self) -> Vec<usize> {
        vec![3]
    }
    fn fill(&self, i: usize, x: &mut [f32], y: &mut [f32]) {
        x.copy_from_slice(&self.x[i]);
        y.copy_from_slice(&self.y[i]);
    }
}

fn model() -> DenseNet {
    DenseNet::new(DenseNetConfig {
        in_channels: 4,
        window_ms: 60.0,
        neural_fs: 100.0,
        init_channels: 4,
        blocks: 1,
        layers_per_block: 2,
        growth: 4,
        compression: 0.5,
        n_mels: 3,
    })
    .unwrap()
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        lr: 0.01,
        weight_decay: 0.0001,
        epochs,
        lr_halve_epoch: epochs.max(1),
        teacher_forcing_p: 0.0,
        seed: 3,
        lr_grid: vec![0.01],
    }
}

fn scalar_params(w: f64) -> ModelParams<f64> {
    let mut p = ModelParams::new();
    p.insert("w", Tensor::new(&[1], vec![w]).unwrap()).unwrap();
    p
}

fn set_grad(p: &mut ModelParams<f64>, g: f64) {
    p.get_mut("w").unwrap().grad = Some(Tensor::new(&[1], vec![g]).unwrap());
}

fn w(p: &ModelParams<f64>) -> f64 {
    p.get("w").unwrap().value.data()[0]
}

#[test]
fn adamw_matches_textbook_recursion() {
    // Reference: decay first, then the bias-corrected Adam step.
    let (lr, wd, b1, b2, eps) = (0.01, 0.05, 0.9, 0.999, 1e-8);
    let (mut rw, mut m, mut v) = (5.0f64, 0.0f64, 0.0f64);
    let mut p = scalar_params(5.0);
    let mut st = OptimizerState::for_params(&p);
    let adam = AdamW::default();
    for t in 1..=1000 {
        let g = 2.0 * (rw - 3.0) + (t as f64 * 0.7).sin();
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        rw *= 1.0 - lr * wd;
        rw -= lr * mh / (vh.sqrt() + eps);

        set_grad(&mut p, g);
        adam.step(&mut p, &mut st, lr, wd).unwrap();
        assert!((w(&p) - rw).abs() < 1e-7, "step {t}: {} vs {rw}", w(&p));
    }
    assert_eq!(st.step, 1000);
}

#[test]
fn zero_gradient_is_pure_decay() {
    let mut p = scalar_params(2.0);
    let mut st = OptimizerState::for_params(&p);
    for _ in 0..10 {
        set_grad(&mut p, 0.0);
        AdamW::default().step(&mut p, &mut st, 0.1, 0.01).unwrap();
    }
    assert!((w(&p) - 2.0 * (1.0f64 - 0.001).powi(10)).abs() < 1e-12);
}

#[test]
fn first_step_moves_by_learning_rate() {
    let mut p = scalar_params(1.0);
    let mut st = OptimizerState::for_params(&p);
    set_grad(&mut p, 0.5);
    AdamW::default().step(&mut p, &mut st, 1e-3, 0.0).unwrap();
    assert!((w(&p) - (1.0 - 1e-3)).abs() < 1e-10);
}

#[test]
fn non_finite_gradient_names_the_parameter() {
    let mut p = scalar_params(1.0);
    let mut st = OptimizerState::for_params(&p);
    set_grad(&mut p, f64::NAN);
    match AdamW::default().step(&mut p, &mut st, 1e-3, 0.0) {
        Err(Error::Training(msg)) => assert!(msg.contains('w')),
        other => panic!("{other:?}"),
    }
    assert_eq!(w(&p), 1.0);
}

#[test]
fn learning_rate_halves_from_configured_epoch() {
    let c = TrainConfig {
        epochs: 50,
        lr_halve_epoch: 45,
        lr: 5e-4,
        ..TrainConfig::default()
    };
    assert_eq!(c.lr_at(44), 5e-4);
    assert_eq!(c.lr_at(45), 2.5e-4);
    assert_eq!(c.lr_at(50), 2.5e-4);
}

#[test]
fn invalid_configs_rejected() {
    for bad in [
        TrainConfig { batch_size: 0, ..cfg(3) },
        TrainConfig { lr: 0.0, ..cfg(3) },
        TrainConfig { lr_halve_epoch: 4, ..cfg(3) },
        TrainConfig { teacher_forcing_p: 1.5, ..cfg(3) },
        TrainConfig { lr_grid: vec![-1.0], ..cfg(3) },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
    }
}

#[test]
fn zero_epochs_returns_initial_state() {
    let m = model();
    let out = train(&m, &Toy::new(16, 0), None, &cfg(0)).unwrap();
    assert!(out.log.is_empty());
    let (init, _) = m.init::<f32>(3).unwrap();
    assert_eq!(out.last.params, init);
    assert_eq!(out.last.state.epoch, 0);
}

#[test]
fn empty_training_set_is_an_error() {
    let r = train(&model(), &Toy::new(0, 0), None, &cfg(2));
    assert!(matches!(r, Err(Error::InsufficientData(_))));
}

#[test]
fn training_is_deterministic() {
    let data = Toy::new(40, 1);
    let a = train(&model(), &data, None, &cfg(3)).unwrap();
    let b = train(&model(), &data, None, &cfg(3)).unwrap();
    assert_eq!(a.last.params, b.last.params);
    assert_eq!(a.log, b.log);
}

#[test]
fn resume_equals_uninterrupted_run() {
    let (m, data, val) = (model(), Toy::new(40, 1), Toy::new(16, 2));
    let c = TrainConfig { lr_halve_epoch: 3, ..cfg(4) };
    let full = train(&m, &data, Some(&val), &c).unwrap();
    let half = train_with(&m, &data, Some(&val), &c, None, |e, _, _| {
        if e.epoch == 2 {
            Control::Stop
        } else {
            Control::Continue
        }
    })
    .unwrap();
    assert_eq!(half.log.len(), 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.nvck");
    save_checkpoint(&path, &half.last).unwrap();
    let restored = load_checkpoint(&path).unwrap();
    let rest = train_with(&m, &data, Some(&val), &c, Some(restored), |_, _, _| Control::Continue).unwrap();
    assert_eq!(rest.log, full.log[2..].to_vec());
    assert_eq!(rest.last.params, full.last.params);
    assert_eq!(rest.last.buffers, full.last.buffers);
    assert_eq!(rest.best.state.best_val_mse, full.best.state.best_val_mse);
}

#[test]
fn best_checkpoint_has_lowest_validation_error() {
    let out = train(&model(), &Toy::new(40, 1), Some(&Toy::new(16, 2)), &cfg(6)).unwrap();
    let lowest = out.log.iter().filter_map(|m| m.val_mse).fold(f64::INFINITY, f64::min);
    assert_eq!(out.best.state.best_val_mse, lowest);
    let at = out.log.iter().find(|m| m.val_mse == Some(lowest)).unwrap().epoch;
    assert_eq!(out.best.state.epoch, at);
}

#[test]
fn loss_falls_below_a_tenth_of_first_epoch() {
    let c = TrainConfig { batch_size: 32, lr: 0.005, lr_halve_epoch: 40, ..cfg(60) };
    let out = train(&model(), &Toy::new(128, 4), None, &c).unwrap();
    let first = out.log[0].train_mse;
    let last = out.log.last().unwrap().train_mse;
    assert!(last < 0.1 * first, "{first} -> {last}");
    assert!(metrics_csv(&out.log).starts_with("epoch,train_mse,val_mse,lr\n"));
}

#[test]
fn lr_search_skips_diverged_rates() {
    let (m, data, val) = (model(), Toy::new(24, 1), Toy::new(8, 2));
    let c = TrainConfig { lr_grid: vec![1e30, 0.01], ..cfg(2) };
    let s = lr_search(&m, &data, &val, &c).unwrap();
    assert_eq!(s.best_lr, 0.01);
    assert_eq!(s.results[0], (1e30, None));

    let single = lr_search(&m, &data, &val, &TrainConfig { lr_grid: vec![0.005], ..cfg(2) }).unwrap();
    assert_eq!(single.best_lr, 0.005);

    let all_bad = lr_search(&m, &data, &val, &TrainConfig { lr_grid: vec![1e30], ..cfg(2) });
    assert!(matches!(all_bad, Err(Error::Training(_))));
}
