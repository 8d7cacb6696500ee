//! Quality metrics, latency benchmarks, learning curves and ablation sweeps.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use maskpredict_tensor::Real;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::decoding::{sample_candidates, Algorithm, DecodeOptions, Decoder, Scorer};
use crate::masking::Schedule;
use crate::model::{Model, ModelBundle, ModelConfig, Regime};
use crate::synth::{self, record_seed, CorpusRecord, GridShape};
use crate::training::{validation_loss, TrainConfig, Trainer};
use crate::{Error, Result};

pub const CURVE_TAG: &str = "# maskpredict-curve v1";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub token_accuracy: f64,
    pub exact_match: f64,
    /// Fraction of outputs equal to some clean mode of their caption.
    pub mode_match: f64,
    /// Jensen–Shannon divergence (nats) between generated and reference bigram statistics.
    pub bigram_js: f64,
    /// Mean model NLL per position on the references minus the generator's entropy floor.
    pub entropy_gap: Option<f64>,
    pub count: usize,
}

type Bigram = (u8, u32, u32);

fn bigram_counts(shape: &GridShape, grids: &[&[u32]]) -> HashMap<Bigram, f64> {
    let (h, w) = (shape.height, shape.width);
    let mut counts = HashMap::new();
    for g in grids {
        for r in 0..h {
            for c in 0..w {
                let t = g[r * w + c];
                if c + 1 < w {
                    *counts.entry((0, t, g[r * w + c + 1])).or_insert(0.0) += 1.0;
                }
                if r + 1 < h {
                    *counts.entry((1, t, g[(r + 1) * w + c])).or_insert(0.0) += 1.0;
                }
            }
        }
    }
    counts
}

/// Jensen–Shannon divergence, natural log, between horizontal+vertical bigram
/// distributions of two grid sets. Lies in [0, ln 2].
pub fn bigram_js(shape: &GridShape, generated: &[&[u32]], reference: &[&[u32]]) -> f64 {
    let p = bigram_counts(shape, generated);
    let q = bigram_counts(shape, reference);
    let zp: f64 = p.values().sum();
    let zq: f64 = q.values().sum();
    if zp == 0.0 || zq == 0.0 {
        return 0.0;
    }
    let mut keys: Vec<&Bigram> = p.keys().chain(q.keys()).collect();
    keys.sort_unstable();
    keys.dedup();
    let mut js = 0.0;
    for k in keys {
        let a = p.get(k).copied().unwrap_or(0.0) / zp;
        let b = q.get(k).copied().unwrap_or(0.0) / zq;
        let m = 0.5 * (a + b);
        if a > 0.0 {
            js += 0.5 * a * (a / m).ln();
        }
        if b > 0.0 {
            js += 0.5 * b * (b / m).ln();
        }
    }
    js.clamp(0.0, std::f64::consts::LN_2)
}

/// Metrics of `outputs[i]` against `records[i]`.
pub fn metrics_from_outputs(shape: &GridShape, records: &[CorpusRecord], outputs: &[Vec<u32>]) -> Result<MetricReport> {
    if records.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    if records.len() != outputs.len() {
        return Err(Error::Length {
            got: outputs.len(),
            expected: records.len(),
        });
    }
    let mut correct = 0usize;
    let mut tokens = 0usize;
    let mut exact = 0usize;
    let mut modes = 0usize;
    for (r, o) in records.iter().zip(outputs) {
        if o.len() != r.grid.len() {
            return Err(Error::Length {
                got: o.len(),
                expected: r.grid.len(),
            });
        }
        let c = r.grid.iter().zip(o).filter(|(a, b)| a == b).count();
        correct += c;
        tokens += o.len();
        exact += usize::from(c == o.len());
        modes += usize::from(synth::is_mode(shape, &r.caption, o)?);
    }
    let gen: Vec<&[u32]> = outputs.iter().map(|o| o.as_slice()).collect();
    let refs: Vec<&[u32]> = records.iter().map(|r| r.grid.as_slice()).collect();
    let count = records.len() as f64;
    Ok(MetricReport {
        token_accuracy: correct as f64 / tokens as f64,
        exact_match: exact as f64 / count,
        mode_match: modes as f64 / count,
        bigram_js: bigram_js(shape, &gen, &refs),
        entropy_gap: None,
        count: records.len(),
    })
}

/// Loss protocol used for the entropy gap: the model's own likelihood estimate.
fn gap_regime(regime: Regime) -> Regime {
    match regime {
        Regime::FullyNar | Regime::Autoregressive => regime,
        _ => Regime::IterV1,
    }
}

/// Per-position model NLL on the references minus the entropy floor, averaged over records.
pub fn entropy_gap(
    model: &Model<f32>,
    regime: Regime,
    shape: &GridShape,
    records: &[CorpusRecord],
    seed: u64,
) -> Result<f64> {
    let nll = validation_loss(model, gap_regime(regime), Schedule::Linear, records, seed)?;
    let floor = records
        .iter()
        .map(|r| synth::entropy_floor(shape, &r.caption))
        .sum::<Result<f64>>()?
        / records.len() as f64;
    Ok(nll - floor)
}

/// Best-of-`k` outputs for each record, in record order.
pub fn generate_outputs(
    model: &Model<f32>,
    decoder: &Decoder,
    records: &[CorpusRecord],
    k: usize,
    scorer: Scorer,
    seed: u64,
) -> Result<Vec<Vec<u32>>> {
    records
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let set = sample_candidates(model, &r.caption, k, decoder, scorer, record_seed(seed, i as u64))?;
            Ok(set.best().to_vec())
        })
        .collect()
}

/// Best-of-`k` decoding over `records` followed by [`metrics_from_outputs`].
pub fn evaluate(
    model: &Model<f32>,
    decoder: &Decoder,
    shape: &GridShape,
    records: &[CorpusRecord],
    k: usize,
    scorer: Scorer,
    seed: u64,
) -> Result<MetricReport> {
    let outputs = generate_outputs(model, decoder, records, k, scorer, seed)?;
    metrics_from_outputs(shape, records, &outputs)
}

/// Corrupted-context probe: in each record, `corrupt` distinct positions are replaced
/// by a different uniformly drawn image token, the sequence is fed with no MASKs, and
/// the result is the fraction of corrupted positions whose argmax is the original token.
pub fn correction_rate<T: Real>(model: &Model<T>, records: &[CorpusRecord], corrupt: usize, seed: u64) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let n = model.config().seq_len_target;
    let v = model.config().vocab_image;
    if corrupt == 0 || corrupt > n || v < 2 {
        return Err(Error::Config(format!("cannot corrupt {corrupt} of {n} positions")));
    }
    let mut fixed = 0usize;
    for (c, chunk) in records.chunks(32).enumerate() {
        let mut captions = Vec::with_capacity(chunk.len() * model.config().seq_len_text);
        let mut inputs = Vec::with_capacity(chunk.len() * n);
        let mut picked = Vec::with_capacity(chunk.len());
        for (i, r) in chunk.iter().enumerate() {
            if r.grid.len() != n {
                return Err(Error::Length {
                    got: r.grid.len(),
                    expected: n,
                });
            }
            let mut rng = ChaCha8Rng::seed_from_u64(record_seed(seed, (c * 32 + i) as u64));
            let positions = rand::seq::index::sample(&mut rng, n, corrupt).into_vec();
            let mut y = r.grid.clone();
            for &p in &positions {
                // Uniform over the V - 1 tokens that differ from the original.
                let draw = rng.random_range(0..v as u32 - 1);
                y[p] = if draw >= y[p] { draw + 1 } else { draw };
            }
            captions.extend(model.prepare_caption(&r.caption));
            inputs.extend(y);
            picked.push(positions);
        }
        let memory = model.encode_many(&captions, chunk.len())?;
        let logits = model.decode_parallel_many(&memory, &inputs, chunk.len())?;
        for (i, (r, positions)) in chunk.iter().zip(&picked).enumerate() {
            for &p in positions {
                let row = &logits.data()[(i * n + p) * v..(i * n + p + 1) * v];
                let mut best = 0;
                for (j, x) in row.iter().enumerate() {
                    if x.f64() > row[best].f64() {
                        best = j;
                    }
                }
                fixed += usize::from(best as u32 == r.grid[p]);
            }
        }
    }
    Ok(fixed as f64 / (records.len() * corrupt) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyReport {
    pub decoder_forward_passes: u64,
    pub encoder_forward_passes: u64,
    /// Median seconds per decode.
    pub wall_clock: f64,
    pub tokens_per_second: f64,
}

/// Times one single-sequence decode: `warmup` untimed runs, then the median of `repeats`.
/// Pass counts come from the model's counters for a single run.
pub fn bench_latency(
    model: &Model<f32>,
    decoder: &Decoder,
    caption: &[u32],
    warmup: usize,
    repeats: usize,
    seed: u64,
) -> Result<LatencyReport> {
    if repeats == 0 {
        return Err(Error::Config("latency repeats must be positive".into()));
    }
    for _ in 0..warmup {
        decoder.decode_many(model, caption, 1, seed)?;
    }
    let mut times = Vec::with_capacity(repeats);
    let mut passes = (0, 0);
    for _ in 0..repeats {
        model.counters().reset();
        let start = Instant::now();
        decoder.decode_many(model, caption, 1, seed)?;
        times.push(start.elapsed().as_secs_f64());
        passes = (model.counters().decoder(), model.counters().encoder());
    }
    times.sort_by(f64::total_cmp);
    let median = times[times.len() / 2];
    Ok(LatencyReport {
        decoder_forward_passes: passes.0,
        encoder_forward_passes: passes.1,
        wall_clock: median,
        tokens_per_second: model.config().seq_len_target as f64 / median,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRow {
    pub iterations: usize,
    pub metrics: MetricReport,
    pub latency: LatencyReport,
}

/// Settings shared by evaluation-style sweeps.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub algorithm: Algorithm,
    pub iterations: usize,
    pub schedule: Schedule,
    pub gumbel_temp: f64,
    pub candidates: usize,
    pub scorer: Scorer,
    pub seed: u64,
    pub sample_tokens: bool,
    pub latency_repeats: usize,
}

impl EvalSettings {
    pub fn decoder(&self, iterations: usize, schedule: Schedule) -> Decoder {
        Decoder::MaskPredict {
            algorithm: self.algorithm,
            opts: DecodeOptions {
                iterations,
                schedule,
                gumbel_temp: self.gumbel_temp,
                choice: if self.sample_tokens {
                    crate::decoding::TokenChoice::Sample
                } else {
                    crate::decoding::TokenChoice::Argmax
                },
            },
        }
    }
}

/// One evaluation and one latency measurement per iteration count.
pub fn sweep_iterations(
    model: &Model<f32>,
    shape: &GridShape,
    records: &[CorpusRecord],
    t_values: &[usize],
    settings: &EvalSettings,
) -> Result<Vec<IterationRow>> {
    let first = records.first().ok_or(Error::Empty("evaluation set"))?;
    t_values
        .iter()
        .map(|&t| {
            let decoder = settings.decoder(t, settings.schedule);
            let metrics = evaluate(
                model,
                &decoder,
                shape,
                records,
                settings.candidates,
                settings.scorer,
                settings.seed,
            )?;
            let latency = bench_latency(
                model,
                &decoder,
                &first.caption,
                2,
                settings.latency_repeats,
                settings.seed,
            )?;
            Ok(IterationRow {
                iterations: t,
                metrics,
                latency,
            })
        })
        .collect()
}

pub fn iterations_csv(rows: &[IterationRow]) -> String {
    let mut s = String::from(
        "iterations,token_accuracy,exact_match,mode_match,bigram_js,decoder_passes,encoder_passes,wall_clock_s,tokens_per_s\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6},{},{},{:.6},{:.3}",
            r.iterations,
            r.metrics.token_accuracy,
            r.metrics.exact_match,
            r.metrics.mode_match,
            r.metrics.bigram_js,
            r.latency.decoder_forward_passes,
            r.latency.encoder_forward_passes,
            r.latency.wall_clock,
            r.latency.tokens_per_second
        );
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleRow {
    pub regime: Regime,
    pub train_schedule: Schedule,
    pub infer_schedule: Schedule,
    pub val_loss: f64,
    pub metrics: MetricReport,
}

pub struct ScheduleSweep {
    pub rows: Vec<ScheduleRow>,
    /// Trained models, one per (regime, training schedule).
    pub models: Vec<(Regime, Schedule, ModelBundle)>,
    pub curves: Vec<Vec<CurveRow>>,
}

/// Inputs for [`sweep_schedules`].
pub struct ScheduleSweepPlan<'a> {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub regimes: Vec<Regime>,
    pub train_schedules: Vec<Schedule>,
    pub infer_schedules: Vec<Schedule>,
    pub steps: u64,
    pub init_seed: u64,
    pub curve_interval: u64,
    pub train_set: &'a [CorpusRecord],
    pub val_set: &'a [CorpusRecord],
    pub test_set: &'a [CorpusRecord],
    pub shape: GridShape,
    pub eval: EvalSettings,
    /// Skip decoding metrics (validation losses only).
    pub skip_decode: bool,
}

/// Trains one model per (regime, training schedule) and evaluates it under each
/// inference schedule. Validation losses use the linear ratio sampler for every
/// cell so that cells trained with different samplers are scored on one protocol.
pub fn sweep_schedules(plan: &ScheduleSweepPlan<'_>) -> Result<ScheduleSweep> {
    let mut rows = Vec::new();
    let mut models = Vec::new();
    let mut curves = Vec::new();
    for &regime in &plan.regimes {
        for &ts in &plan.train_schedules {
            let mut tc = plan.train.clone();
            tc.regime = regime;
            tc.schedule = ts;
            tc.opt.total_steps = plan.steps;
            let mut rng = ChaCha8Rng::seed_from_u64(plan.init_seed);
            let bundle = ModelBundle::new(plan.model.clone(), regime, &mut rng)?;
            let mut trainer = Trainer::new(bundle, tc)?;
            let curve = run_training(
                &mut trainer,
                plan.train_set,
                plan.val_set,
                plan.steps,
                plan.curve_interval,
                None,
                plan.eval.seed,
            )?;
            let val_loss = validation_loss(
                &trainer.bundle.model,
                regime,
                Schedule::Linear,
                plan.val_set,
                plan.eval.seed,
            )?;
            for &is in &plan.infer_schedules {
                let metrics = if plan.skip_decode {
                    empty_metrics()
                } else {
                    let algorithm = if regime == Regime::IterV3 {
                        Algorithm::Revise
                    } else {
                        Algorithm::Freeze
                    };
                    let settings = EvalSettings {
                        algorithm,
                        ..plan.eval.clone()
                    };
                    let decoder = settings.decoder(settings.iterations, is);
                    evaluate(
                        &trainer.bundle.model,
                        &decoder,
                        &plan.shape,
                        plan.test_set,
                        plan.eval.candidates,
                        plan.eval.scorer,
                        plan.eval.seed,
                    )?
                };
                rows.push(ScheduleRow {
                    regime,
                    train_schedule: ts,
                    infer_schedule: is,
                    val_loss,
                    metrics,
                });
            }
            curves.push(curve);
            models.push((regime, ts, trainer.bundle));
        }
    }
    Ok(ScheduleSweep { rows, models, curves })
}

fn empty_metrics() -> MetricReport {
    MetricReport {
        token_accuracy: f64::NAN,
        exact_match: f64::NAN,
        mode_match: f64::NAN,
        bigram_js: f64::NAN,
        entropy_gap: None,
        count: 0,
    }
}

pub fn schedules_csv(rows: &[ScheduleRow]) -> String {
    let mut s =
        String::from("regime,train_schedule,infer_schedule,val_loss,token_accuracy,exact_match,mode_match,bigram_js\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.regime,
            r.train_schedule,
            r.infer_schedule,
            r.val_loss,
            r.metrics.token_accuracy,
            r.metrics.exact_match,
            r.metrics.mode_match,
            r.metrics.bigram_js
        );
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurveRow {
    pub step: u64,
    /// Mean training loss over the interval ending at `step`.
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub wall_clock: f64,
}

/// Appends learning-curve rows to a CSV file with a versioned header.
pub struct CurveWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl CurveWriter {
    pub fn create(path: &Path, regime: Regime, seed: u64) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        writeln!(out, "{CURVE_TAG} regime={regime} seed={seed}")
            .and_then(|_| writeln!(out, "step,train_loss,val_loss,lr,wall_clock"))
            .map_err(|e| Error::io(path, e))?;
        Ok(CurveWriter {
            path: path.to_path_buf(),
            out,
        })
    }

    /// Opens an existing curve for appending (used when resuming).
    pub fn append(path: &Path) -> Result<Self> {
        let file = std::fs::OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(CurveWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn write(&mut self, row: &CurveRow) -> Result<()> {
        writeln!(
            self.out,
            "{},{:.6},{:.6},{:.6e},{:.3}",
            row.step, row.train_loss, row.val_loss, row.lr, row.wall_clock
        )
        .and_then(|_| self.out.flush())
        .map_err(|e| Error::io(&self.path, e))
    }
}

/// Runs `steps` training steps, evaluating validation loss every `interval` steps
/// (interval 0 disables evaluation). Validation uses the linear sampler and a
/// fixed seed, so rows from different runs are comparable.
pub fn run_training(
    trainer: &mut Trainer,
    train: &[CorpusRecord],
    val: &[CorpusRecord],
    steps: u64,
    interval: u64,
    mut curve: Option<&mut CurveWriter>,
    val_seed: u64,
) -> Result<Vec<CurveRow>> {
    let start = Instant::now();
    let mut rows = Vec::new();
    let mut acc = 0.0;
    let mut since = 0u64;
    for _ in 0..steps {
        let report = trainer.step(train)?;
        acc += report.loss;
        since += 1;
        if interval > 0 && report.step % interval == 0 {
            let val_loss = validation_loss(
                &trainer.bundle.model,
                trainer.config.regime,
                Schedule::Linear,
                val,
                val_seed,
            )?;
            let row = CurveRow {
                step: report.step,
                train_loss: acc / since as f64,
                val_loss,
                lr: report.lr,
                wall_clock: start.elapsed().as_secs_f64(),
            };
            if let Some(c) = curve.as_deref_mut() {
                c.write(&row)?;
            }
            rows.push(row);
            acc = 0.0;
            since = 0;
        }
    }
    Ok(rows)
}
