use maskpredict::decoding::{Algorithm, DecodeOptions, Decoder, Sampling, Scorer};
use maskpredict::eval::{
    bench_latency, bigram_js, correction_rate, iterations_csv, metrics_from_outputs, run_training, sweep_iterations,
    CurveWriter, EvalSettings, CURVE_TAG,
};
use maskpredict::model::{ModelBundle, ModelConfig, Regime};
use maskpredict::synth::{self, SynthConfig};
use maskpredict::training::{OptConfig, TrainConfig, Trainer};
use maskpredict::Schedule;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_model(n_side: usize) -> ModelBundle {
    let cfg = ModelConfig {
        enc_layers: 1,
        dec_layers: 1,
        width: 16,
        heads: 2,
        seq_len_text: 8,
        seq_len_target: n_side * n_side,
        ..Default::default()
    };
    ModelBundle::new(cfg, Regime::IterV1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
}

#[test]
fn ground_truth_outputs_score_perfectly() {
    let cfg = SynthConfig {
        noise_levels: vec![0.0],
        ..Default::default()
    };
    let records = cfg.generate_range(1, 0..100);
    let outputs: Vec<Vec<u32>> = records.iter().map(|r| r.grid.clone()).collect();
    let m = metrics_from_outputs(&cfg.shape, &records, &outputs).unwrap();
    assert_eq!(m.token_accuracy, 1.0);
    assert_eq!(m.exact_match, 1.0);
    assert_eq!(m.mode_match, 1.0);
    assert_eq!(m.bigram_js, 0.0);
    assert_eq!(m.count, 100);
}

#[test]
fn uniform_noise_outputs_score_badly() {
    let cfg = SynthConfig::default();
    let records = cfg.generate_range(2, 0..200);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let outputs: Vec<Vec<u32>> = records
        .iter()
        .map(|_| (0..64).map(|_| rng.random_range(0..512)).collect())
        .collect();
    let m = metrics_from_outputs(&cfg.shape, &records, &outputs).unwrap();
    assert_eq!(m.mode_match, 0.0);
    assert_eq!(m.exact_match, 0.0);
    assert!(m.token_accuracy < 0.01);
    assert!(m.bigram_js > 0.9 * std::f64::consts::LN_2, "{}", m.bigram_js);
}

#[test]
fn another_mode_is_a_mode_match_but_not_exact() {
    let cfg = SynthConfig {
        families: vec![synth::Family::Stripes],
        noise_levels: vec![0.0],
        ..Default::default()
    };
    let records = cfg.generate_range(4, 0..50);
    let outputs: Vec<Vec<u32>> = records
        .iter()
        .map(|r| {
            let modes = synth::modes(&cfg.shape, &r.caption).unwrap().unwrap();
            modes.into_iter().find(|m| *m != r.grid).unwrap()
        })
        .collect();
    let m = metrics_from_outputs(&cfg.shape, &records, &outputs).unwrap();
    assert_eq!(m.mode_match, 1.0);
    assert_eq!(m.exact_match, 0.0);
}

#[test]
fn metric_inputs_are_validated() {
    let cfg = SynthConfig::default();
    let records = cfg.generate_range(1, 0..2);
    assert!(metrics_from_outputs(&cfg.shape, &records, &[vec![0; 64]]).is_err());
    assert!(metrics_from_outputs(&cfg.shape, &records, &[vec![0; 64], vec![0; 3]]).is_err());
    assert!(metrics_from_outputs(&cfg.shape, &[], &[]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn bigram_js_is_symmetric_and_bounded(seed in any::<u64>(), span in 1u32..20) {
        let shape = SynthConfig::default().shape;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut grid = || -> Vec<u32> { (0..64).map(|_| rng.random_range(0..span)).collect() };
        let a: Vec<Vec<u32>> = (0..3).map(|_| grid()).collect();
        let b: Vec<Vec<u32>> = (0..3).map(|_| grid()).collect();
        let ar: Vec<&[u32]> = a.iter().map(|g| g.as_slice()).collect();
        let br: Vec<&[u32]> = b.iter().map(|g| g.as_slice()).collect();
        let ab = bigram_js(&shape, &ar, &br);
        let ba = bigram_js(&shape, &br, &ar);
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((0.0..=std::f64::consts::LN_2).contains(&ab));
        prop_assert_eq!(bigram_js(&shape, &ar, &ar), 0.0);
    }
}

#[test]
fn latency_counts_passes_per_decode() {
    let bundle = small_model(4);
    let caption = [1u32, 5, 8, 11, 32, 33];
    let mp = Decoder::MaskPredict {
        algorithm: Algorithm::Freeze,
        opts: DecodeOptions::greedy(4, Schedule::Cosine),
    };
    let r = bench_latency(&bundle.model, &mp, &caption, 1, 3, 0).unwrap();
    assert_eq!(r.decoder_forward_passes, 4);
    assert_eq!(r.encoder_forward_passes, 1);
    assert!(r.wall_clock > 0.0);
    let ar = Decoder::Autoregressive {
        sampling: Sampling::Greedy,
    };
    let r = bench_latency(&bundle.model, &ar, &caption, 0, 1, 0).unwrap();
    assert_eq!(r.decoder_forward_passes, 16);
    assert!(bench_latency(&bundle.model, &ar, &caption, 0, 0, 0).is_err());
}

#[test]
fn iteration_sweep_has_one_row_per_t() {
    let bundle = small_model(8);
    let records = SynthConfig::default().generate_range(1, 0..6);
    let settings = EvalSettings {
        algorithm: Algorithm::Freeze,
        iterations: 16,
        schedule: Schedule::Cosine,
        gumbel_temp: 0.0,
        candidates: 2,
        scorer: Scorer::SelfLikelihood,
        seed: 0,
        sample_tokens: false,
        latency_repeats: 1,
    };
    let rows = sweep_iterations(
        &bundle.model,
        &SynthConfig::default().shape,
        &records,
        &[4, 8, 16, 32],
        &settings,
    )
    .unwrap();
    assert_eq!(
        rows.iter().map(|r| r.iterations).collect::<Vec<_>>(),
        vec![4, 8, 16, 32]
    );
    for r in &rows {
        assert_eq!(r.latency.decoder_forward_passes, r.iterations as u64);
    }
    let csv = iterations_csv(&rows);
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("iterations,"));
}

#[test]
fn curve_file_gets_one_row_per_interval() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("curve.csv");
    let bundle = small_model(8);
    let data = SynthConfig::default().generate_range(1, 0..64);
    let mut trainer = Trainer::new(
        bundle,
        TrainConfig {
            batch_size: 4,
            opt: OptConfig {
                total_steps: 12,
                ..Default::default()
            },
            ..Default::default()
        },
    )
    .unwrap();
    let mut curve = CurveWriter::create(&path, Regime::IterV1, 0).unwrap();
    let rows = run_training(&mut trainer, &data, &data[..8], 12, 4, Some(&mut curve), 1).unwrap();
    drop(curve);
    assert_eq!(rows.iter().map(|r| r.step).collect::<Vec<_>>(), vec![4, 8, 12]);
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with(CURVE_TAG));
    assert_eq!(lines[1], "step,train_loss,val_loss,lr,wall_clock");
    assert_eq!(lines.len(), 5);
    assert!(lines[4].starts_with("12,"));
}

#[test]
fn correction_rate_is_a_seeded_fraction() {
    let bundle = small_model(8);
    let records = SynthConfig::default().generate_range(4, 0..40);
    let a = correction_rate(&bundle.model, &records, 8, 1).unwrap();
    assert_eq!(a, correction_rate(&bundle.model, &records, 8, 1).unwrap());
    assert!((0.0..=1.0).contains(&a));
    // An untrained model almost never lands on the original token among 512.
    assert!(a < 0.05, "{a}");
    assert!(correction_rate(&bundle.model, &records, 0, 1).is_err());
    assert!(correction_rate(&bundle.model, &records, 65, 1).is_err());
    assert!(correction_rate(&bundle.model, &[], 8, 1).is_err());
}
