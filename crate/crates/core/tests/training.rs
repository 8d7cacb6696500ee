use maskpredict::model::{Model, ModelBundle, ModelConfig, Regime};
use maskpredict::synth::{CorpusRecord, SynthConfig};
use maskpredict::training::{
    first_pass, regime_forward, validation_loss, Batch, OptConfig, OptState, Overrides, TrainConfig, Trainer,
};
use maskpredict::{Error, Schedule};
use maskpredict_tensor::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config() -> ModelConfig {
    ModelConfig {
        enc_layers: 1,
        dec_layers: 1,
        width: 32,
        heads: 2,
        seq_len_text: 8,
        ..Default::default()
    }
}

fn corpus(n: u64) -> Vec<CorpusRecord> {
    SynthConfig::default().generate_range(1, 0..n)
}

fn batch(model: &Model<f32>, records: &[CorpusRecord]) -> Batch {
    let refs: Vec<&CorpusRecord> = records.iter().collect();
    Batch::from_records(model, &refs).unwrap()
}

/// Loss value and all parameter gradients of one regime forward on a fresh tape.
fn loss_and_grads(model: &Model<f32>, b: &Batch, regime: Regime, overrides: Overrides) -> (f32, Vec<Vec<f32>>) {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, true);
    let fwd = regime_forward(model, &mut tape, &p, b, regime, Schedule::Linear, 77, &overrides).unwrap();
    let loss = tape.value(fwd.loss).data()[0];
    let grads = tape.backward(fwd.loss).unwrap();
    let gs = p
        .vars()
        .iter()
        .map(|&v| grads.get(v).map(|g| g.data().to_vec()).unwrap_or_default())
        .collect();
    (loss, gs)
}

#[test]
fn initial_loss_is_log_vocab() {
    let records = corpus(64);
    let expected = (512f64).ln();
    for regime in Regime::ALL {
        let bundle = ModelBundle::new(small_config(), regime, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let loss = validation_loss(&bundle.model, regime, Schedule::Linear, &records, 1).unwrap();
        assert!((loss - expected).abs() / expected < 0.02, "{regime}: {loss}");
    }
}

#[test]
fn v1_with_everything_masked_is_fully_nar() {
    let model: Model<f32> = Model::new(small_config(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = batch(&model, &corpus(8));
    let forced = Overrides {
        forced_ratio: Some(1.0),
        ..Default::default()
    };
    let v1 = loss_and_grads(&model, &b, Regime::IterV1, forced);
    let nar = loss_and_grads(&model, &b, Regime::FullyNar, Overrides::default());
    assert_eq!(v1.0.to_bits(), nar.0.to_bits());
    assert_eq!(v1.1, nar.1);
}

#[test]
fn v2_with_perfect_first_pass_is_v1() {
    let model: Model<f32> = Model::new(small_config(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let b = batch(&model, &corpus(8));
    let oracle = Overrides {
        oracle_pass1: true,
        ..Default::default()
    };
    let v2 = loss_and_grads(&model, &b, Regime::IterV2, oracle);
    let v1 = loss_and_grads(&model, &b, Regime::IterV1, Overrides::default());
    assert_eq!(v2.0.to_bits(), v1.0.to_bits());
    assert_eq!(v2.1, v1.1);
}

#[test]
fn first_pass_records_nothing_and_changes_nothing() {
    let model: Model<f32> = Model::new(small_config(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let before = model.params().to_vec();
    let b = batch(&model, &corpus(8));
    let n = b.n();
    for regime in [Regime::IterV2, Regime::IterV3] {
        let fp = first_pass(&model, &b, regime, Schedule::Linear, 5, &Overrides::default()).unwrap();
        assert_eq!(fp.grad_buffers, 0);
        assert_eq!(fp.tracked_nodes, 0);
        assert_eq!(fp.tokens.len(), b.targets.len());
        let mask = model.config().mask_id();
        for i in 0..b.targets.len() {
            let masked = fp.y_mask[i] == mask;
            if regime == Regime::IterV2 && !masked {
                // Revealed positions keep the ground truth.
                assert_eq!(fp.tokens[i], b.targets[i], "position {}", i % n);
            }
            assert!(fp.tokens[i] < mask);
        }
    }
    assert_eq!(model.params(), before.as_slice());
}

#[test]
fn v1_gradient_vanishes_at_unmasked_positions() {
    let model: Model<f32> = Model::new(small_config(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let b = batch(&model, &corpus(4));
    let v = model.config().vocab_image;
    let check = |regime: Regime| -> (usize, usize) {
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, true);
        let overrides = Overrides {
            forced_ratio: Some(0.5),
            ..Default::default()
        };
        let fwd = regime_forward(&model, &mut tape, &p, &b, regime, Schedule::Linear, 9, &overrides).unwrap();
        let logits = fwd.logits;
        let grads = tape.backward(fwd.loss).unwrap();
        let g = grads.get(logits).unwrap();
        let mask = model.config().mask_id();
        let (mut zero_unmasked, mut unmasked) = (0, 0);
        for (i, &tok) in fwd.y_obs.iter().enumerate() {
            let row = &g.data()[i * v..(i + 1) * v];
            if tok != mask {
                unmasked += 1;
                if row.iter().all(|&x| x == 0.0) {
                    zero_unmasked += 1;
                }
            } else {
                assert!(
                    row.iter().any(|&x| x != 0.0),
                    "{regime}: masked position {i} has no gradient"
                );
            }
        }
        (zero_unmasked, unmasked)
    };
    let (zero, total) = check(Regime::IterV1);
    assert!(total > 0);
    assert_eq!(zero, total, "iter_v1 must not train on revealed positions");
    let (zero, total) = check(Regime::IterV3);
    assert!(total > 0);
    assert_eq!(zero, 0, "iter_v3 trains on every position");
}

#[test]
fn autoregressive_logits_ignore_future_targets() {
    let model: Model<f32> = Model::new(small_config(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let records = corpus(2);
    let a = batch(&model, &records);
    let mut b = a.clone();
    let n = a.n();
    let j = 20;
    b.targets[j] = (b.targets[j] + 1) % 512;
    let v = model.config().vocab_image;
    let logits = |bt: &Batch| {
        let mut tape = Tape::no_grad();
        let p = model.bind(&mut tape, false);
        let fwd = regime_forward(
            &model,
            &mut tape,
            &p,
            bt,
            Regime::Autoregressive,
            Schedule::Linear,
            1,
            &Overrides::default(),
        )
        .unwrap();
        tape.value(fwd.logits).clone()
    };
    let (la, lb) = (logits(&a), logits(&b));
    // Target j enters the decoder at input position j + 1.
    assert_eq!(&la.data()[..(j + 1) * v], &lb.data()[..(j + 1) * v]);
    assert_ne!(
        &la.data()[(j + 1) * v..(j + 2) * v],
        &lb.data()[(j + 1) * v..(j + 2) * v]
    );
    // The second sequence of the batch is untouched.
    assert_eq!(&la.data()[n * v..], &lb.data()[n * v..]);
}

#[test]
fn weight_decay_alone_scales_parameters() {
    let cfg = OptConfig {
        peak_lr: 0.1,
        warmup_ratio: 0.0,
        weight_decay: 0.5,
        total_steps: 10,
        ..Default::default()
    };
    let mut params = vec![Tensor::new(vec![3], vec![1.0f32, -2.0, 4.0]).unwrap()];
    let mut opt = OptState::new(cfg.clone(), &params);
    let zero = Tensor::zeros(vec![3]);
    let report = opt.update(&mut params, &[Some(&zero)]).unwrap();
    let factor = 1.0 - report.lr * 0.5;
    assert_eq!(report.lr, cfg.lr_at(1));
    for (p, orig) in params[0].data().iter().zip([1.0f64, -2.0, 4.0]) {
        assert!((*p as f64 - orig * factor).abs() < 1e-6);
    }
}

#[test]
fn global_norm_clipping() {
    let cfg = OptConfig {
        clip_norm: 4.0,
        ..Default::default()
    };
    let mut params = vec![Tensor::zeros(vec![2]), Tensor::zeros(vec![2])];
    let mut opt = OptState::new(cfg.clone(), &params);
    // Global norm sqrt(16+16+16+16) = 8.
    let g = Tensor::new(vec![2], vec![4.0f32, -4.0]).unwrap();
    let report = opt.update(&mut params, &[Some(&g), Some(&g)]).unwrap();
    assert!((report.grad_norm - 8.0).abs() < 1e-9);
    assert!((report.clip_scale - 0.5).abs() < 1e-12);
    // First moment holds (1 - β1) times the clipped gradient.
    let want = (1.0 - cfg.beta1) as f32 * 2.0;
    assert!((opt.m[0].data()[0] - want).abs() < 1e-6);
    let small = Tensor::new(vec![2], vec![0.1f32, 0.1]).unwrap();
    let report = opt.update(&mut params, &[Some(&small), None]).unwrap();
    assert_eq!(report.clip_scale, 1.0);
}

#[test]
fn non_finite_gradient_is_an_error() {
    let mut params = vec![Tensor::zeros(vec![2])];
    let mut opt = OptState::new(OptConfig::default(), &params);
    let g = Tensor::new(vec![2], vec![f32::NAN, 0.0]).unwrap();
    assert!(matches!(
        opt.update(&mut params, &[Some(&g)]),
        Err(Error::NonFinite { .. })
    ));
}

#[test]
fn learning_rate_schedule() {
    let cfg = OptConfig {
        peak_lr: 1e-3,
        warmup_ratio: 0.1,
        total_steps: 100,
        ..Default::default()
    };
    assert_eq!(cfg.warmup_steps(), 10);
    assert!((cfg.lr_at(1) - 1e-4).abs() < 1e-15);
    assert!((cfg.lr_at(10) - 1e-3).abs() < 1e-15);
    assert!((cfg.lr_at(55) - 5e-4).abs() < 1e-12);
    assert!(cfg.lr_at(100).abs() < 1e-15);
    let mut prev = cfg.lr_at(10);
    for s in 11..=100 {
        let lr = cfg.lr_at(s);
        assert!(lr <= prev);
        prev = lr;
    }
}

fn trainer(regime: Regime, seed: u64) -> Trainer {
    let bundle = ModelBundle::new(small_config(), regime, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    Trainer::new(
        bundle,
        TrainConfig {
            regime,
            batch_size: 8,
            seed,
            opt: OptConfig {
                peak_lr: 1e-3,
                total_steps: 100,
                ..Default::default()
            },
            ..Default::default()
        },
    )
    .unwrap()
}

#[test]
fn training_is_deterministic() {
    let data = corpus(200);
    for regime in [Regime::IterV2, Regime::IterV3] {
        let mut a = trainer(regime, 4);
        let mut b = trainer(regime, 4);
        for _ in 0..3 {
            let ra = a.step(&data).unwrap();
            let rb = b.step(&data).unwrap();
            assert_eq!(ra.loss.to_bits(), rb.loss.to_bits());
        }
        assert_eq!(a.bundle.model.params(), b.bundle.model.params());
        assert_eq!(a.opt, b.opt);
    }
}

#[test]
fn regime_mismatch_is_rejected() {
    let bundle = ModelBundle::new(small_config(), Regime::IterV3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let err = Trainer::new(bundle, TrainConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn non_finite_parameters_abort_with_context() {
    let data = corpus(16);
    let mut t = trainer(Regime::IterV1, 1);
    t.bundle.model.params_mut()[0].data_mut()[0] = f32::NAN;
    match t.step(&data) {
        Err(Error::NonFinite { step, regime, .. }) => {
            assert_eq!(step, 1);
            assert_eq!(regime, "iter_v1");
        }
        other => panic!("expected NonFinite, got {other:?}"),
    }
}

#[test]
fn latent_free_fully_nar_learns() {
    let cfg = SynthConfig {
        latent_free: true,
        families: vec![maskpredict::synth::Family::Stripes],
        ..Default::default()
    };
    let data = cfg.generate_range(2, 0..500);
    let bundle = ModelBundle::new(small_config(), Regime::FullyNar, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let mut t = Trainer::new(
        bundle,
        TrainConfig {
            regime: Regime::FullyNar,
            batch_size: 16,
            seed: 3,
            opt: OptConfig {
                peak_lr: 3e-3,
                total_steps: 200,
                ..Default::default()
            },
            ..Default::default()
        },
    )
    .unwrap();
    let first = t.step(&data).unwrap().loss;
    let mut tail = Vec::new();
    for step in 1..200 {
        let loss = t.step(&data).unwrap().loss;
        if step >= 180 {
            tail.push(loss);
        }
    }
    let last = tail.iter().sum::<f64>() / tail.len() as f64;
    // The constant-per-caption target is learnable by a single pass.
    assert!(last < 0.5 * first, "loss went from {first} to {last}");
    assert_eq!(t.step_count(), 200);
}
