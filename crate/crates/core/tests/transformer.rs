use maskpredict::model::{Bound, Model, ModelConfig, Regime};
use maskpredict::training::{regime_forward, Batch, Overrides};
use maskpredict::{Error, Schedule};
use maskpredict_tensor::{gradcheck, Real, Tape, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn micro_config() -> ModelConfig {
    ModelConfig {
        enc_layers: 2,
        dec_layers: 2,
        width: 16,
        heads: 2,
        vocab_text: 8,
        vocab_image: 6,
        seq_len_text: 3,
        seq_len_target: 5,
        dropout: 0.0,
        ffn_mult: 2,
    }
}

/// Spreads parameters out so gradients are far from zero.
fn roughen<T: Real>(model: &mut Model<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in model.params_mut() {
        for v in p.data_mut() {
            *v = T::of(v.f64() + rng.random_range(-0.5..0.5));
        }
    }
}

fn micro_batch(cfg: &ModelConfig, size: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let captions = (0..size * cfg.seq_len_text)
        .map(|_| rng.random_range(1..cfg.vocab_text as u32))
        .collect();
    let targets = (0..size * cfg.seq_len_target)
        .map(|_| rng.random_range(0..cfg.vocab_image as u32))
        .collect();
    Batch {
        size,
        caption_len: cfg.seq_len_text,
        captions,
        targets,
    }
}

fn untensor(e: Error) -> TensorError {
    match e {
        Error::Tensor(t) => t,
        other => panic!("unexpected error: {other}"),
    }
}

#[test]
fn micro_transformer_gradients_match_finite_differences() {
    let cfg = micro_config();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut model: Model<f64> = Model::new(cfg.clone(), &mut rng).unwrap();
    roughen(&mut model, 12);
    let batch = micro_batch(&cfg, 2, 13);
    for regime in Regime::ALL {
        let overrides = Overrides {
            forced_ratio: Some(0.6),
            ..Default::default()
        };
        let report = gradcheck::check(model.params(), 1e-5, Some(6), |tape, vars| {
            let p = Bound::from_vars(vars.to_vec());
            regime_forward(&model, tape, &p, &batch, regime, Schedule::Linear, 5, &overrides)
                .map(|f| f.loss)
                .map_err(untensor)
        })
        .unwrap();
        assert!(
            report.checked > 100,
            "{regime}: only {} elements probed",
            report.checked
        );
        assert!(
            report.max_rel_error <= 1e-4,
            "{regime}: relative error {} at {:?}",
            report.max_rel_error,
            report.worst
        );
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let cfg = micro_config();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model: Model<f64> = Model::new(cfg.clone(), &mut rng).unwrap();
    let batch = micro_batch(&cfg, 3, 4);
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, true);
    let fwd = regime_forward(
        &model,
        &mut tape,
        &p,
        &batch,
        Regime::IterV3,
        Schedule::Linear,
        1,
        &Overrides::default(),
    )
    .unwrap();
    let grads = tape.backward(fwd.loss).unwrap();
    for (name, &v) in model.names().iter().zip(p.vars()) {
        let g = grads.get(v).unwrap_or_else(|| panic!("{name} has no gradient"));
        assert!(g.data().iter().any(|x| *x != 0.0), "{name} gradient is zero");
    }
}

#[test]
fn forward_is_deterministic_and_shaped() {
    let cfg = micro_config();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model: Model<f32> = Model::new(cfg.clone(), &mut rng).unwrap();
    let mem = model.encode(&[1, 2, 3]).unwrap();
    assert_eq!(mem.shape(), &[3, cfg.width]);
    let y = vec![cfg.mask_id(), 1, 2, cfg.mask_id(), 0];
    let a = model.decode_parallel(&mem, &y).unwrap();
    let b = model.decode_parallel(&mem, &y).unwrap();
    assert_eq!(a.shape(), &[cfg.seq_len_target, cfg.vocab_image]);
    assert_eq!(a, b);
    assert!(a.all_finite());
}

#[test]
fn same_seed_same_weights() {
    let cfg = micro_config();
    let a: Model<f32> = Model::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b: Model<f32> = Model::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let c: Model<f32> = Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
    assert_eq!(a.params(), b.params());
    assert_ne!(a.params(), c.params());
}

#[test]
fn output_depends_on_caption_order() {
    let cfg = micro_config();
    let mut model: Model<f32> = Model::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    roughen(&mut model, 3);
    let y = vec![cfg.mask_id(); cfg.seq_len_target];
    let a = model.decode_parallel(&model.encode(&[1, 2, 3]).unwrap(), &y).unwrap();
    let b = model.decode_parallel(&model.encode(&[3, 2, 1]).unwrap(), &y).unwrap();
    assert_ne!(a, b);
}

#[test]
fn bidirectional_decoder_sees_later_positions() {
    let cfg = micro_config();
    let mut model: Model<f32> = Model::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    roughen(&mut model, 5);
    let mem = model.encode(&[1, 2, 3]).unwrap();
    let m = cfg.mask_id();
    let a = model.decode_parallel(&mem, &[m, m, m, m, 1]).unwrap();
    let b = model.decode_parallel(&mem, &[m, m, m, m, 2]).unwrap();
    let v = cfg.vocab_image;
    assert_ne!(
        &a.data()[..v],
        &b.data()[..v],
        "position 0 ignored a change at position 4"
    );
}

#[test]
fn causal_decoder_ignores_later_positions() {
    let cfg = micro_config();
    let mut model: Model<f32> = Model::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    roughen(&mut model, 7);
    let mem = model.encode(&[4, 5, 6]).unwrap();
    let short = model.decode_causal(&mem, &[1, 2]).unwrap();
    // Prediction for position 2 from the prefix must not change when the model
    // later sees a longer prefix; check via the batched causal path.
    let mut tape = Tape::no_grad();
    let p = model.bind(&mut tape, false);
    let mv = tape.constant(mem.clone());
    let full = model
        .decode_batch(&mut tape, &p, mv, 3, &[cfg.mask_id(), 1, 2, 4, 3], 1, true, None)
        .unwrap();
    let v = cfg.vocab_image;
    let row2 = &tape.value(full).data()[2 * v..3 * v];
    for (a, b) in short.data().iter().zip(row2) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn batched_decode_matches_single_decode() {
    let cfg = micro_config();
    let mut model: Model<f32> = Model::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    roughen(&mut model, 9);
    let caps = [1u32, 2, 3, 5, 6, 7];
    let ys = [cfg.mask_id(), 1, 2, 3, 4, 0, cfg.mask_id(), cfg.mask_id(), 5, 1];
    let mem = model.encode_many(&caps, 2).unwrap();
    let both = model.decode_parallel_many(&mem, &ys, 2).unwrap();
    let per = cfg.seq_len_target * cfg.vocab_image;
    for b in 0..2 {
        let m = model.encode(&caps[b * 3..b * 3 + 3]).unwrap();
        let one = model.decode_parallel(&m, &ys[b * 5..b * 5 + 5]).unwrap();
        for (x, y) in one.data().iter().zip(&both.data()[b * per..(b + 1) * per]) {
            assert!((x - y).abs() < 1e-5, "batch element {b} differs");
        }
    }
    assert_eq!(model.counters().decoder(), 4);
    assert_eq!(model.counters().encoder(), 4);
}

#[test]
fn all_regimes_share_one_architecture() {
    let cfg = ModelConfig::default();
    let counts: Vec<usize> = Regime::ALL
        .iter()
        .map(|&r| {
            maskpredict::ModelBundle::new(cfg.clone(), r, &mut ChaCha8Rng::seed_from_u64(0))
                .unwrap()
                .model
                .parameter_count()
        })
        .collect();
    assert!(counts.windows(2).all(|w| w[0] == w[1]), "{counts:?}");
}

#[test]
fn invalid_inputs_are_rejected() {
    let cfg = micro_config();
    let model: Model<f32> = Model::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(matches!(model.encode(&[]), Err(Error::Empty(_))));
    assert!(matches!(model.encode(&[1, 2, 99]), Err(Error::Token { .. })));
    assert!(matches!(model.encode(&[1, 2, 3, 4]), Err(Error::Length { .. })));
    let mem = model.encode(&[1]).unwrap();
    assert!(matches!(
        model.decode_parallel(&mem, &[0, 1]),
        Err(Error::Length { .. })
    ));
    assert!(matches!(
        model.decode_parallel(&mem, &[0, 1, 2, 3, 77]),
        Err(Error::Token { .. })
    ));
    let bad = ModelConfig { heads: 3, ..cfg };
    assert!(matches!(
        Model::<f32>::new(bad, &mut ChaCha8Rng::seed_from_u64(0)),
        Err(Error::Config(_))
    ));
}

#[test]
fn regime_names_round_trip() {
    for r in Regime::ALL {
        assert_eq!(r.name().parse::<Regime>().unwrap(), r);
    }
    assert!("iter_v4".parse::<Regime>().is_err());
}
