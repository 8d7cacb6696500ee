//! Training regimes and the AdamW optimizer loop.
//!
//! Every step draws one seed from the trainer's RNG. Batch selection, the first
//! (non-differentiated) pass, the gradient pass and dropout each derive their own
//! ChaCha stream from that seed, so regimes that coincide mathematically also
//! coincide bit for bit: an `iter_v1` step whose ratio is forced to 1 matches a
//! `fully_nar` step, and an `iter_v2` step with a perfect first pass matches
//! `iter_v1`.

use std::f64::consts::PI;

use maskpredict_tensor::{Normalization, Real, Tape, Tensor, TensorError, Var};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::masking::{self, Schedule};
use crate::model::{Bound, Model, ModelBundle, Regime};
use crate::synth::CorpusRecord;
use crate::{Error, Result};

const STREAM_BATCH: u64 = 0;
const STREAM_PASS1: u64 = 1;
const STREAM_PASS2: u64 = 2;
const STREAM_DROPOUT: u64 = 3;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Optimizer hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptConfig {
    pub peak_lr: f64,
    pub warmup_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub total_steps: u64,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig {
            peak_lr: 3e-4,
            warmup_ratio: 0.02,
            beta1: 0.9,
            beta2: 0.96,
            eps: 1e-8,
            weight_decay: 4.5e-2,
            clip_norm: 4.0,
            total_steps: 3000,
        }
    }
}

impl OptConfig {
    pub fn warmup_steps(&self) -> u64 {
        ((self.warmup_ratio * self.total_steps as f64).ceil() as u64).max(1)
    }

    /// Learning rate for update number `step` (1-based): linear warmup to the
    /// peak, then cosine decay reaching zero at `total_steps`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let warm = self.warmup_steps();
        if step <= warm {
            return self.peak_lr * step as f64 / warm as f64;
        }
        let span = self.total_steps.saturating_sub(warm).max(1) as f64;
        let progress = ((step - warm) as f64 / span).min(1.0);
        self.peak_lr * 0.5 * (1.0 + (PI * progress).cos())
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.peak_lr > 0.0
            && (0.0..1.0).contains(&self.warmup_ratio)
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.clip_norm > 0.0
            && self.total_steps > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// AdamW moments and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub config: OptConfig,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub step: u64,
}

/// What one optimizer update did.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateReport {
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clip_scale: f64,
}

impl OptState {
    pub fn new(config: OptConfig, params: &[Tensor<f32>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        OptState {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// Clips the global gradient norm, then applies one AdamW update with decoupled
    /// weight decay. `grads[i] = None` stands for an all-zero gradient.
    pub fn update(&mut self, params: &mut [Tensor<f32>], grads: &[Option<&Tensor<f32>>]) -> Result<UpdateReport> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Config("parameter / gradient / moment counts differ".into()));
        }
        let mut sq = 0.0f64;
        for (p, g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::Tensor(TensorError::ShapeMismatch {
                        op: "optimizer_update",
                        lhs: p.shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    }));
                }
                sq += g.data().iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>();
            }
        }
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite {
                what: "gradient".to_string(),
                step: self.step + 1,
                regime: String::new(),
            });
        }
        let c = &self.config;
        let clip_scale = if grad_norm > c.clip_norm {
            c.clip_norm / grad_norm
        } else {
            1.0
        };
        self.step += 1;
        let lr = c.lr_at(self.step);
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let decay = (1.0 - lr * c.weight_decay) as f32;
        let step_size = (lr / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let eps = c.eps as f32;
        let cs = clip_scale as f32;
        for (i, p) in params.iter_mut().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let pd = p.data_mut();
            match grads[i] {
                Some(g) => {
                    for j in 0..pd.len() {
                        let gj = g.data()[j] * cs;
                        m[j] = b1 * m[j] + (1.0 - b1) * gj;
                        v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                        pd[j] = pd[j] * decay - step_size * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
                    }
                }
                None => {
                    for j in 0..pd.len() {
                        m[j] *= b1;
                        v[j] *= b2;
                        pd[j] = pd[j] * decay - step_size * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(UpdateReport {
            lr,
            grad_norm,
            clip_scale,
        })
    }
}

/// A batch of padded captions and targets, flattened row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub caption_len: usize,
    pub captions: Vec<u32>,
    pub targets: Vec<u32>,
}

impl Batch {
    pub fn from_records<T: Real>(model: &Model<T>, records: &[&CorpusRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let n = model.config().seq_len_target;
        let mut captions = Vec::new();
        let mut targets = Vec::with_capacity(records.len() * n);
        for r in records {
            if r.grid.len() != n {
                return Err(Error::Length {
                    got: r.grid.len(),
                    expected: n,
                });
            }
            if r.caption.len() > model.config().seq_len_text {
                return Err(Error::Length {
                    got: r.caption.len(),
                    expected: model.config().seq_len_text,
                });
            }
            if let Some(position) = r.grid.iter().position(|&t| t as usize >= model.config().vocab_image) {
                return Err(Error::Token {
                    position,
                    token: r.grid[position],
                    limit: model.config().vocab_image,
                });
            }
            captions.extend(model.prepare_caption(&r.caption));
            targets.extend_from_slice(&r.grid);
        }
        Ok(Batch {
            size: records.len(),
            caption_len: model.config().seq_len_text,
            captions,
            targets,
        })
    }

    pub fn n(&self) -> usize {
        self.targets.len() / self.size
    }

    pub fn target(&self, b: usize) -> &[u32] {
        let n = self.n();
        &self.targets[b * n..(b + 1) * n]
    }
}

/// Test and ablation hooks for a regime forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Overrides {
    /// Use this mask ratio for every example instead of sampling one.
    pub forced_ratio: Option<f64>,
    /// Replace the first-pass prediction with the ground truth.
    pub oracle_pass1: bool,
    /// Sample first-pass tokens instead of taking the argmax.
    pub sample_pass1: bool,
}

/// Everything a regime's differentiated pass consumed and produced.
pub struct RegimeForward {
    pub loss: Var,
    /// `[B, n, V]` logits of the gradient pass.
    pub logits: Var,
    /// Decoder input of the gradient pass (`y_obs`), flattened.
    pub y_obs: Vec<u32>,
    /// Positions contributing to the loss, flattened.
    pub selected: Vec<bool>,
    /// First-pass output: `y_mix` for v2, `y_pred` for v3.
    pub pass1: Option<Vec<u32>>,
}

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sample_row<T: Real, R: Rng + ?Sized>(row: &[T], rng: &mut R) -> usize {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max).f64();
    let weights: Vec<f64> = row.iter().map(|v| (v.f64() - mx).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    row.len() - 1
}

fn mask_batch<R: Rng>(
    targets: &[u32],
    size: usize,
    schedule: Schedule,
    forced: Option<f64>,
    mask_id: u32,
    rng: &mut R,
) -> Result<(Vec<u32>, Vec<bool>)> {
    let n = targets.len() / size;
    let mut out = Vec::with_capacity(targets.len());
    let mut sel = Vec::with_capacity(targets.len());
    for y in targets.chunks(n) {
        let r = forced.unwrap_or_else(|| masking::sample_mask_ratio(rng, schedule));
        let (masked, plan) = masking::apply_mask(y, masking::mask_count(r, n), mask_id, rng)?;
        out.extend(masked);
        sel.extend(plan.selection(n));
    }
    Ok((out, sel))
}

/// Output of the non-differentiated first pass of v2/v3.
#[derive(Clone, Debug, PartialEq)]
pub struct FirstPass {
    /// `y_mix` (v2) or `y_pred` (v3), flattened.
    pub tokens: Vec<u32>,
    /// First-pass decoder input.
    pub y_mask: Vec<u32>,
    /// Gradient buffers the first-pass tape allocated (always zero).
    pub grad_buffers: usize,
    pub tracked_nodes: usize,
}

/// First pass of v2/v3: a forward on a no-grad tape that only reads parameters.
/// v2 fills the masked positions with predictions; v3 predicts every position.
pub fn first_pass<T: Real>(
    model: &Model<T>,
    batch: &Batch,
    regime: Regime,
    schedule: Schedule,
    seed: u64,
    overrides: &Overrides,
) -> Result<FirstPass> {
    let mut rng = stream_rng(seed, STREAM_PASS1);
    let mask_id = model.config().mask_id();
    let (y_mask, sel) = mask_batch(&batch.targets, batch.size, schedule, None, mask_id, &mut rng)?;
    if overrides.oracle_pass1 {
        return Ok(FirstPass {
            tokens: batch.targets.clone(),
            y_mask,
            grad_buffers: 0,
            tracked_nodes: 0,
        });
    }
    let mut tape = Tape::no_grad();
    let p = model.bind(&mut tape, false);
    let mem = model.encode_batch(&mut tape, &p, &batch.captions, batch.size, None)?;
    let logits = model.decode_batch(&mut tape, &p, mem, batch.caption_len, &y_mask, batch.size, false, None)?;
    let v = model.config().vocab_image;
    let data = tape.value(logits).data();
    let mut out = batch.targets.clone();
    for (i, o) in out.iter_mut().enumerate() {
        if regime == Regime::IterV3 || sel[i] {
            let row = &data[i * v..(i + 1) * v];
            *o = if overrides.sample_pass1 {
                sample_row(row, &mut rng)
            } else {
                argmax(row)
            } as u32;
        }
    }
    Ok(FirstPass {
        tokens: out,
        y_mask,
        grad_buffers: tape.grad_buffers_allocated(),
        tracked_nodes: tape.tracked_nodes(),
    })
}

/// Builds the differentiated pass of `regime` on `tape` and returns its loss.
#[allow(clippy::too_many_arguments)]
pub fn regime_forward<T: Real>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    params: &Bound,
    batch: &Batch,
    regime: Regime,
    schedule: Schedule,
    seed: u64,
    overrides: &Overrides,
) -> Result<RegimeForward> {
    let n = batch.n();
    if n != model.config().seq_len_target {
        return Err(Error::Length {
            got: n,
            expected: model.config().seq_len_target,
        });
    }
    let mask_id = model.config().mask_id();
    let mut rng = stream_rng(seed, STREAM_PASS2);
    let mut drop_rng = stream_rng(seed, STREAM_DROPOUT);
    let use_dropout = tape.is_recording() && model.config().dropout > 0.0;
    let mut pass1 = None;
    let (y_obs, selected, causal) = match regime {
        Regime::FullyNar => (
            vec![mask_id; batch.targets.len()],
            vec![true; batch.targets.len()],
            false,
        ),
        Regime::IterV1 => {
            let (y, s) = mask_batch(
                &batch.targets,
                batch.size,
                schedule,
                overrides.forced_ratio,
                mask_id,
                &mut rng,
            )?;
            (y, s, false)
        }
        Regime::IterV2 => {
            let y_mix = first_pass(model, batch, regime, schedule, seed, overrides)?.tokens;
            let (y, s) = mask_batch(&y_mix, batch.size, schedule, overrides.forced_ratio, mask_id, &mut rng)?;
            pass1 = Some(y_mix);
            (y, s, false)
        }
        Regime::IterV3 => {
            let y_pred = first_pass(model, batch, regime, schedule, seed, overrides)?.tokens;
            let (y, _) = mask_batch(&y_pred, batch.size, schedule, overrides.forced_ratio, mask_id, &mut rng)?;
            pass1 = Some(y_pred);
            (y, vec![true; batch.targets.len()], false)
        }
        Regime::Autoregressive => {
            let mut y = Vec::with_capacity(batch.targets.len());
            for t in batch.targets.chunks(n) {
                y.push(mask_id);
                y.extend_from_slice(&t[..n - 1]);
            }
            (y, vec![true; batch.targets.len()], true)
        }
    };
    let (mem, logits) = if use_dropout {
        let mem = model.encode_batch(tape, params, &batch.captions, batch.size, Some(&mut drop_rng))?;
        let logits = model.decode_batch(
            tape,
            params,
            mem,
            batch.caption_len,
            &y_obs,
            batch.size,
            causal,
            Some(&mut drop_rng),
        )?;
        (mem, logits)
    } else {
        let mem = model.encode_batch(tape, params, &batch.captions, batch.size, None)?;
        let logits = model.decode_batch(tape, params, mem, batch.caption_len, &y_obs, batch.size, causal, None)?;
        (mem, logits)
    };
    let _ = mem;
    let targets: Vec<usize> = batch.targets.iter().map(|&t| t as usize).collect();
    let loss = tape.cross_entropy(logits, &targets, &selected, Normalization::PerExample)?;
    Ok(RegimeForward {
        loss,
        logits,
        y_obs,
        selected,
        pass1,
    })
}

/// Training-run settings besides the model and optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub regime: Regime,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub seed: u64,
    pub opt: OptConfig,
    pub overrides: Overrides,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            regime: Regime::IterV1,
            schedule: Schedule::Linear,
            batch_size: 32,
            seed: 0,
            opt: OptConfig::default(),
            overrides: Overrides::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Owns a model, its optimizer state and the run RNG.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub bundle: ModelBundle,
    pub opt: OptState,
    pub config: TrainConfig,
    pub rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(bundle: ModelBundle, config: TrainConfig) -> Result<Self> {
        config.opt.validate()?;
        if config.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if bundle.regime != config.regime {
            return Err(Error::Config(format!(
                "model is tagged {} but the run trains {}",
                bundle.regime, config.regime
            )));
        }
        let opt = OptState::new(config.opt.clone(), bundle.model.params());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(7);
        Ok(Trainer {
            bundle,
            opt,
            config,
            rng,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.bundle.step
    }

    /// One step on a batch drawn uniformly (with replacement) from `train`.
    pub fn step(&mut self, train: &[CorpusRecord]) -> Result<StepReport> {
        if train.is_empty() {
            return Err(Error::Empty("training set"));
        }
        let seed = self.rng.next_u64();
        let mut pick = stream_rng(seed, STREAM_BATCH);
        let records: Vec<&CorpusRecord> = (0..self.config.batch_size)
            .map(|_| &train[pick.random_range(0..train.len())])
            .collect();
        let batch = Batch::from_records(&self.bundle.model, &records)?;
        self.step_with_seed(&batch, seed)
    }

    /// One step on an explicit batch, drawing the step seed from the run RNG.
    pub fn step_on(&mut self, batch: &Batch) -> Result<StepReport> {
        let seed = self.rng.next_u64();
        self.step_with_seed(batch, seed)
    }

    fn step_with_seed(&mut self, batch: &Batch, seed: u64) -> Result<StepReport> {
        let regime = self.config.regime;
        let step = self.bundle.step + 1;
        let non_finite = |what: String| Error::NonFinite {
            what,
            step,
            regime: regime.name().into(),
        };
        let model = &self.bundle.model;
        let mut tape = Tape::new();
        let params = model.bind(&mut tape, true);
        let fwd = regime_forward(
            model,
            &mut tape,
            &params,
            batch,
            regime,
            self.config.schedule,
            seed,
            &self.config.overrides,
        )
        .map_err(|e| match e {
            Error::Tensor(TensorError::NonFinite { op }) => non_finite(format!("forward value in {op}")),
            other => other,
        })?;
        let loss = tape.value(fwd.loss).data()[0] as f64;
        let grads = tape.backward(fwd.loss).map_err(|e| match e {
            TensorError::NonFinite { op } => non_finite(format!("gradient in {op}")),
            other => Error::Tensor(other),
        })?;
        let gs: Vec<Option<&Tensor<f32>>> = params.vars().iter().map(|&v| grads.get(v)).collect();
        let report = self
            .opt
            .update(self.bundle.model.params_mut(), &gs)
            .map_err(|e| match e {
                Error::NonFinite { what, .. } => non_finite(what),
                other => other,
            })?;
        self.bundle.step = step;
        Ok(StepReport {
            step,
            loss,
            lr: report.lr,
            grad_norm: report.grad_norm,
        })
    }
}

/// Mean of a regime's objective over `records`, without gradients, using fixed
/// per-chunk seeds derived from `seed` so repeated calls agree exactly.
pub fn validation_loss(
    model: &Model<f32>,
    regime: Regime,
    schedule: Schedule,
    records: &[CorpusRecord],
    seed: u64,
) -> Result<f64> {
    validation_loss_with(model, regime, schedule, records, seed, &Overrides::default())
}

pub fn validation_loss_with(
    model: &Model<f32>,
    regime: Regime,
    schedule: Schedule,
    records: &[CorpusRecord],
    seed: u64,
    overrides: &Overrides,
) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    const CHUNK: usize = 32;
    let mut total = 0.0;
    for (i, chunk) in records.chunks(CHUNK).enumerate() {
        let refs: Vec<&CorpusRecord> = chunk.iter().collect();
        let batch = Batch::from_records(model, &refs)?;
        let mut tape = Tape::no_grad();
        let p = model.bind(&mut tape, false);
        let chunk_seed = crate::synth::record_seed(seed, i as u64);
        let fwd = regime_forward(model, &mut tape, &p, &batch, regime, schedule, chunk_seed, overrides)?;
        total += tape.value(fwd.loss).data()[0] as f64 * chunk.len() as f64;
    }
    Ok(total / records.len() as f64)
}
