//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use maskpredict::checkpoint::Checkpoint;
use maskpredict::decoding::{
    compatibility_warning, sample_candidates, Algorithm, DecodeOptions, Decoder, Sampling, Scorer,
};
use maskpredict::eval::{self, CurveRow, CurveWriter, EvalSettings, ScheduleSweepPlan};
use maskpredict::model::{ModelBundle, Regime};
use maskpredict::synth::{self, record_seed, CorpusHeader, CorpusRecord, GridShape};
use maskpredict::training::{validation_loss, Overrides, TrainConfig, Trainer};
use maskpredict::{Error, Result, Schedule};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, ScorerKind};

const SPLITS: [&str; 3] = ["train", "val", "test"];

fn corpus_path(cfg: &RunConfig, split: &str) -> PathBuf {
    cfg.data_dir.join(format!("{split}.txt"))
}

fn warn(msg: &str) {
    eprintln!("warning: {msg}");
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn init_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    rng
}

pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    create_dir(&cfg.data_dir)?;
    if !cfg.force {
        if let Some(p) = SPLITS.iter().map(|s| corpus_path(cfg, s)).find(|p| p.exists()) {
            return Err(Error::Config(format!(
                "{} exists; pass --force to overwrite",
                p.display()
            )));
        }
    }
    let header = CorpusHeader {
        shape: cfg.synth.shape,
        seed: cfg.seed,
    };
    let bounds = [
        0,
        cfg.n_train,
        cfg.n_train + cfg.n_val,
        cfg.n_train + cfg.n_val + cfg.n_test,
    ];
    for (i, split) in SPLITS.iter().enumerate() {
        let records = cfg.synth.generate_range(cfg.seed, bounds[i]..bounds[i + 1]);
        let path = corpus_path(cfg, split);
        synth::write_corpus(&path, &header, &records)?;
        let floor = mean_floor(&cfg.synth.shape, &records)?;
        println!(
            "wrote {} ({} records, mean entropy floor {floor:.4} nats/position)",
            path.display(),
            records.len()
        );
    }
    Ok(())
}

fn mean_floor(shape: &GridShape, records: &[CorpusRecord]) -> Result<f64> {
    if records.is_empty() {
        return Ok(0.0);
    }
    Ok(records
        .iter()
        .map(|r| synth::entropy_floor(shape, &r.caption))
        .sum::<Result<f64>>()?
        / records.len() as f64)
}

fn load_split(cfg: &RunConfig, split: &str, limit: Option<usize>) -> Result<(GridShape, Vec<CorpusRecord>)> {
    let path = corpus_path(cfg, split);
    let mut reader = synth::CorpusReader::open(&path)?;
    let shape = reader.header().shape;
    if shape != cfg.synth.shape {
        return Err(Error::Config(format!(
            "{} was generated for {:?}, but the config describes {:?}",
            path.display(),
            shape,
            cfg.synth.shape
        )));
    }
    let mut records = Vec::new();
    for r in reader.by_ref() {
        records.push(r?);
        if limit.is_some_and(|l| records.len() >= l) {
            break;
        }
    }
    if records.is_empty() {
        return Err(Error::Empty("corpus split"));
    }
    Ok((shape, records))
}

fn load_checkpoint(cfg: &RunConfig) -> Result<Checkpoint> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("this command needs --checkpoint".into()))?;
    let ck = Checkpoint::load(path)?;
    println!(
        "loaded {} (regime {}, step {}, {} parameters)",
        path.display(),
        ck.bundle.regime,
        ck.bundle.step,
        ck.bundle.model.parameter_count()
    );
    Ok(ck)
}

fn train_config(cfg: &RunConfig) -> TrainConfig {
    TrainConfig {
        regime: cfg.regime,
        schedule: cfg.train_schedule,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        opt: cfg.opt.clone(),
        overrides: Overrides {
            sample_pass1: cfg.sample_pass1,
            ..Default::default()
        },
    }
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    if cfg.regime == Regime::Autoregressive || cfg.regime == Regime::FullyNar {
        for key in ["train_schedule", "sample_pass1"] {
            if cfg.raw.is_explicit(key) {
                warn(&format!("{key} has no effect for regime {}; ignored", cfg.regime));
            }
        }
    }
    let (_, train) = load_split(cfg, "train", None)?;
    let (_, val) = load_split(cfg, "val", Some(cfg.val_records))?;
    create_dir(&cfg.out)?;
    let ckpt_path = cfg.out.join(format!("{}.ckpt", cfg.regime));
    let curve_path = cfg.out.join(format!("curve_{}.csv", cfg.regime));
    let tc = train_config(cfg);
    let (mut trainer, mut curve) = match &cfg.checkpoint {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.bundle.regime != cfg.regime {
                return Err(Error::Config(format!(
                    "checkpoint regime {} differs from configured regime {}",
                    ck.bundle.regime, cfg.regime
                )));
            }
            let mut trainer = Trainer::new(ck.bundle, tc)?;
            match (ck.opt, ck.rng) {
                (Some(opt), Some(rng)) => {
                    trainer.opt = opt;
                    trainer.rng = rng;
                }
                _ => {
                    return Err(Error::Config(format!(
                        "{} holds no optimizer state to resume",
                        path.display()
                    )))
                }
            }
            println!("resuming from step {}", trainer.step_count());
            let curve = if curve_path.exists() {
                CurveWriter::append(&curve_path)?
            } else {
                CurveWriter::create(&curve_path, cfg.regime, cfg.seed)?
            };
            (trainer, curve)
        }
        None => {
            if ckpt_path.exists() && !cfg.force {
                return Err(Error::Config(format!(
                    "{} exists; pass --force to overwrite or --checkpoint to resume",
                    ckpt_path.display()
                )));
            }
            let bundle = ModelBundle::new(cfg.model.clone(), cfg.regime, &mut init_rng(cfg.seed))?;
            println!("initialized {} parameters", bundle.model.parameter_count());
            (
                Trainer::new(bundle, tc)?,
                CurveWriter::create(&curve_path, cfg.regime, cfg.seed)?,
            )
        }
    };
    let mut meta = BTreeMap::new();
    meta.insert("train_schedule".to_string(), cfg.train_schedule.to_string());
    meta.insert("batch_size".to_string(), cfg.batch_size.to_string());
    let start = Instant::now();
    let (mut acc, mut since) = (0.0, 0u64);
    while trainer.step_count() < cfg.steps {
        let report = trainer.step(&train)?;
        acc += report.loss;
        since += 1;
        if cfg.log_interval > 0 && report.step % cfg.log_interval == 0 {
            let val_loss = validation_loss(&trainer.bundle.model, cfg.regime, Schedule::Linear, &val, cfg.seed)?;
            let row = CurveRow {
                step: report.step,
                train_loss: acc / since as f64,
                val_loss,
                lr: report.lr,
                wall_clock: start.elapsed().as_secs_f64(),
            };
            curve.write(&row)?;
            println!(
                "step {} train_loss {:.4} val_loss {:.4} lr {:.3e}",
                row.step, row.train_loss, row.val_loss, row.lr
            );
            acc = 0.0;
            since = 0;
        }
        if cfg.checkpoint_interval > 0 && report.step % cfg.checkpoint_interval == 0 {
            Checkpoint::from_trainer(&trainer, cfg.seed, meta.clone()).save(&ckpt_path)?;
        }
    }
    Checkpoint::from_trainer(&trainer, cfg.seed, meta).save(&ckpt_path)?;
    println!("wrote {} at step {}", ckpt_path.display(), trainer.step_count());
    Ok(())
}

fn resolve_algorithm(cfg: &RunConfig, regime: Regime) -> Algorithm {
    let algorithm = cfg.algorithm.unwrap_or(if regime == Regime::IterV3 {
        Algorithm::Revise
    } else {
        Algorithm::Freeze
    });
    if let Some(w) = compatibility_warning(regime, algorithm) {
        warn(&w);
    }
    algorithm
}

fn decoder_for(cfg: &RunConfig, regime: Regime) -> Decoder {
    if regime == Regime::Autoregressive {
        let sampling = match cfg.ar_temperature {
            None => Sampling::Greedy,
            Some(t) => Sampling::Temperature(t),
        };
        return Decoder::Autoregressive { sampling };
    }
    Decoder::MaskPredict {
        algorithm: resolve_algorithm(cfg, regime),
        opts: DecodeOptions {
            iterations: cfg.iterations,
            schedule: cfg.infer_schedule,
            gumbel_temp: cfg.gumbel_temp,
            choice: cfg.token_choice,
        },
    }
}

fn scorer(cfg: &RunConfig, shape: GridShape) -> Scorer {
    match cfg.scorer {
        ScorerKind::SelfLikelihood => Scorer::SelfLikelihood,
        ScorerKind::Oracle => Scorer::Oracle(shape),
    }
}

fn join(ids: &[u32]) -> String {
    ids.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",")
}

pub fn decode(cfg: &RunConfig) -> Result<()> {
    let ck = load_checkpoint(cfg)?;
    let (shape, records) = load_split(cfg, "test", Some(cfg.eval_records))?;
    let model = &ck.bundle.model;
    let decoder = decoder_for(cfg, ck.bundle.regime);
    let scorer = scorer(cfg, shape);
    create_dir(&cfg.out)?;
    let mut grids = String::new();
    let mut telemetry = String::new();
    let mut selected = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let set = sample_candidates(
            model,
            &r.caption,
            cfg.candidates,
            &decoder,
            scorer,
            record_seed(cfg.seed, i as u64),
        )?;
        for (k, cand) in set.candidates.iter().enumerate() {
            let _ = writeln!(
                grids,
                "record={i} candidate={k} selected={} score={:.6} caption={} grid={}",
                k == set.selected,
                set.scores[k],
                join(&r.caption),
                join(cand)
            );
            for line in set.traces[k].telemetry_lines() {
                let _ = writeln!(telemetry, "record={i} candidate={k} {line}");
            }
        }
        let _ = writeln!(telemetry, "record={i} selected={}", set.selected);
        selected.push(set.best().to_vec());
    }
    write_file(&cfg.out.join("decode.txt"), &grids)?;
    write_file(&cfg.out.join("decode_telemetry.txt"), &telemetry)?;
    let m = eval::metrics_from_outputs(&shape, &records, &selected)?;
    println!(
        "decoded {} captions x {} candidates: token_accuracy {:.4} exact_match {:.4} mode_match {:.4} bigram_js {:.4}",
        records.len(),
        cfg.candidates,
        m.token_accuracy,
        m.exact_match,
        m.mode_match,
        m.bigram_js
    );
    Ok(())
}

pub fn bench(cfg: &RunConfig) -> Result<()> {
    let (bundle, regime) = match &cfg.checkpoint {
        Some(_) => {
            let ck = load_checkpoint(cfg)?;
            let r = ck.bundle.regime;
            (ck.bundle, r)
        }
        None => {
            println!("no checkpoint given; benchmarking an untrained model");
            let b = ModelBundle::new(cfg.model.clone(), cfg.regime, &mut init_rng(cfg.seed))?;
            (b, cfg.regime)
        }
    };
    let model = &bundle.model;
    let caption = cfg.synth.record_at(cfg.seed, 0).caption;
    let nar = Decoder::MaskPredict {
        algorithm: cfg.algorithm.unwrap_or(if regime == Regime::IterV3 {
            Algorithm::Revise
        } else {
            Algorithm::Freeze
        }),
        opts: DecodeOptions {
            iterations: cfg.iterations,
            schedule: cfg.infer_schedule,
            gumbel_temp: cfg.gumbel_temp,
            choice: cfg.token_choice,
        },
    };
    let ar = Decoder::Autoregressive {
        sampling: Sampling::Greedy,
    };
    let a = eval::bench_latency(model, &nar, &caption, cfg.latency_warmup, cfg.latency_repeats, cfg.seed)?;
    let b = eval::bench_latency(model, &ar, &caption, cfg.latency_warmup, cfg.latency_repeats, cfg.seed)?;
    let mut csv = String::from("decoder,iterations,decoder_passes,encoder_passes,wall_clock_s,tokens_per_s\n");
    let _ = writeln!(
        csv,
        "maskpredict,{},{},{},{:.6},{:.3}",
        cfg.iterations, a.decoder_forward_passes, a.encoder_forward_passes, a.wall_clock, a.tokens_per_second
    );
    let _ = writeln!(
        csv,
        "autoregressive,{},{},{},{:.6},{:.3}",
        model.config().seq_len_target,
        b.decoder_forward_passes,
        b.encoder_forward_passes,
        b.wall_clock,
        b.tokens_per_second
    );
    create_dir(&cfg.out)?;
    write_file(&cfg.out.join("bench.csv"), &csv)?;
    print!("{csv}");
    println!(
        "pass ratio {}:{}  wall-clock speedup {:.2}x",
        b.decoder_forward_passes,
        a.decoder_forward_passes,
        b.wall_clock / a.wall_clock
    );
    Ok(())
}

fn eval_settings(cfg: &RunConfig, regime: Regime, shape: GridShape) -> EvalSettings {
    EvalSettings {
        algorithm: resolve_algorithm(cfg, regime),
        iterations: cfg.iterations,
        schedule: cfg.infer_schedule,
        gumbel_temp: cfg.gumbel_temp,
        candidates: cfg.candidates,
        scorer: scorer(cfg, shape),
        seed: cfg.seed,
        sample_tokens: cfg.token_choice == maskpredict::decoding::TokenChoice::Sample,
        latency_repeats: cfg.latency_repeats,
    }
}

pub fn sweep_iterations(cfg: &RunConfig) -> Result<()> {
    let ck = load_checkpoint(cfg)?;
    if !ck.bundle.regime.is_iterative() {
        return Err(Error::Config(format!(
            "sweep-iterations needs an iterative checkpoint, got {}",
            ck.bundle.regime
        )));
    }
    let (shape, records) = load_split(cfg, "test", Some(cfg.eval_records))?;
    let settings = eval_settings(cfg, ck.bundle.regime, shape);
    let rows = eval::sweep_iterations(&ck.bundle.model, &shape, &records, &cfg.t_values, &settings)?;
    let csv = eval::iterations_csv(&rows);
    create_dir(&cfg.out)?;
    write_file(&cfg.out.join("sweep_iterations.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

pub fn sweep_schedules(cfg: &RunConfig) -> Result<()> {
    let (shape, train) = load_split(cfg, "train", None)?;
    let (_, val) = load_split(cfg, "val", Some(cfg.val_records))?;
    let (_, test) = load_split(cfg, "test", Some(cfg.eval_records))?;
    let mut eval = eval_settings(cfg, Regime::IterV1, shape);
    eval.algorithm = Algorithm::Freeze;
    let plan = ScheduleSweepPlan {
        model: cfg.model.clone(),
        train: train_config(cfg),
        regimes: cfg.sweep_regimes.clone(),
        train_schedules: cfg.sweep_train_schedules.clone(),
        infer_schedules: cfg.sweep_infer_schedules.clone(),
        steps: cfg.sweep_steps,
        init_seed: cfg.seed,
        curve_interval: 0,
        train_set: &train,
        val_set: &val,
        test_set: &test,
        shape,
        eval,
        skip_decode: false,
    };
    let sweep = eval::sweep_schedules(&plan)?;
    let csv = eval::schedules_csv(&sweep.rows);
    create_dir(&cfg.out)?;
    write_file(&cfg.out.join("sweep_schedules.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}
