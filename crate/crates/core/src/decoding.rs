//! Inference: mask-predict with frozen or revisable reveals, the autoregressive
//! rollout, and multi-candidate sampling with reranking.

use std::fmt;
use std::str::FromStr;

use maskpredict_tensor::{Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::masking::{keep_trajectory, Schedule};
use crate::model::{Model, Regime};
use crate::synth::{self, GridShape};
use crate::{Error, Result};

/// How previously revealed positions are treated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Algorithm {
    /// Revealed tokens never change.
    Freeze,
    /// Revealed positions stay revealed, but their values are re-predicted every iteration.
    Revise,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Freeze => "freeze",
            Algorithm::Revise => "revise",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "freeze" => Ok(Algorithm::Freeze),
            "revise" => Ok(Algorithm::Revise),
            other => Err(Error::Config(format!(
                "unknown algorithm {other:?}; expected freeze|revise"
            ))),
        }
    }
}

/// Warning text when a decoder is paired with a regime it was not designed for.
pub fn compatibility_warning(regime: Regime, algorithm: Algorithm) -> Option<String> {
    let fits = match algorithm {
        Algorithm::Freeze => matches!(regime, Regime::IterV1 | Regime::IterV2),
        Algorithm::Revise => regime == Regime::IterV3,
    };
    (!fits).then(|| format!("{algorithm} decoding on a {regime} checkpoint"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TokenChoice {
    #[default]
    Argmax,
    /// Categorical draw at temperature 1.
    Sample,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeOptions {
    pub iterations: usize,
    pub schedule: Schedule,
    /// Base Gumbel temperature; annealed linearly to 0 at the last iteration.
    pub gumbel_temp: f64,
    pub choice: TokenChoice,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            iterations: 16,
            schedule: Schedule::Cosine,
            gumbel_temp: 1.0,
            choice: TokenChoice::Argmax,
        }
    }
}

impl DecodeOptions {
    /// Deterministic decoding: argmax tokens and no Gumbel noise.
    pub fn greedy(iterations: usize, schedule: Schedule) -> Self {
        DecodeOptions {
            iterations,
            schedule,
            gumbel_temp: 0.0,
            choice: TokenChoice::Argmax,
        }
    }
}

/// Partially revealed sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeState {
    pub y_obs: Vec<u32>,
    /// 1.0 at revealed positions; below 1.0 elsewhere.
    pub p_obs: Vec<f64>,
    pub revealed: Vec<bool>,
    pub t: usize,
}

impl DecodeState {
    pub fn all_masked(n: usize, mask_id: u32) -> Self {
        DecodeState {
            y_obs: vec![mask_id; n],
            p_obs: vec![0.0; n],
            revealed: vec![false; n],
            t: 0,
        }
    }

    /// Test hook: starts from `tokens` with the listed positions already revealed.
    pub fn with_revealed(tokens: &[u32], positions: &[usize], mask_id: u32) -> Self {
        let mut s = DecodeState::all_masked(tokens.len(), mask_id);
        for &p in positions {
            s.y_obs[p] = tokens[p];
            s.p_obs[p] = 1.0;
            s.revealed[p] = true;
        }
        s
    }

    pub fn revealed_count(&self) -> usize {
        self.revealed.iter().filter(|&&r| r).count()
    }
}

/// Maps a log-probability into [0, 1): `exp(min(lp, 0)) * (1 - ε)`.
/// Monotone, so ranking by it equals ranking by `lp`; revealed slots hold exactly 1.
pub fn confidence_to_p(lp: f64) -> f64 {
    lp.min(0.0).exp() * (1.0 - f64::EPSILON)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationTrace {
    pub t: usize,
    /// Positions revealed in this iteration, in reveal order.
    pub newly_revealed: Vec<usize>,
    pub revealed_total: usize,
    /// Revealed positions whose value changed in this iteration.
    pub revised: usize,
    /// `y_obs` at the end of the iteration.
    pub y_obs: Vec<u32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DecodeTrace {
    pub iterations: Vec<IterationTrace>,
    pub decoder_passes: u64,
    pub encoder_passes: u64,
}

impl DecodeTrace {
    pub fn revealed_counts(&self) -> Vec<usize> {
        self.iterations.iter().map(|i| i.revealed_total).collect()
    }

    /// One structured line per iteration.
    pub fn telemetry_lines(&self) -> Vec<String> {
        let total = self.iterations.len();
        self.iterations
            .iter()
            .map(|it| {
                format!(
                    "decode.iter t={} T={} revealed={} new={} revised={}",
                    it.t,
                    total,
                    it.revealed_total,
                    it.newly_revealed.len(),
                    it.revised
                )
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOutput {
    pub tokens: Vec<u32>,
    pub trace: DecodeTrace,
    pub final_state: DecodeState,
}

fn log_softmax<T: Real>(row: &[T]) -> Vec<f64> {
    let mx = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + row.iter().map(|v| (v.f64() - mx).exp()).sum::<f64>().ln();
    row.iter().map(|v| v.f64() - lse).collect()
}

fn argmax(lp: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in lp.iter().enumerate() {
        if v > lp[best] {
            best = i;
        }
    }
    best
}

fn sample_categorical<R: Rng + ?Sized>(lp: &[f64], rng: &mut R) -> usize {
    let mut u: f64 = rng.random();
    for (i, &l) in lp.iter().enumerate() {
        let p = l.exp();
        if u < p {
            return i;
        }
        u -= p;
    }
    argmax(lp)
}

fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // u in (0, 1) keeps both logarithms finite.
    let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    -(-u.ln()).ln()
}

fn choose<R: Rng + ?Sized>(lp: &[f64], choice: TokenChoice, rng: &mut R) -> usize {
    match choice {
        TokenChoice::Argmax => argmax(lp),
        TokenChoice::Sample => sample_categorical(lp, rng),
    }
}

fn padded_memory<T: Real>(model: &Model<T>, captions: &[&[u32]]) -> Result<Tensor<T>> {
    let mut flat = Vec::with_capacity(captions.len() * model.config().seq_len_text);
    for c in captions {
        if c.len() > model.config().seq_len_text {
            return Err(Error::Length {
                got: c.len(),
                expected: model.config().seq_len_text,
            });
        }
        flat.extend(model.prepare_caption(c));
    }
    model.encode_many(&flat, captions.len())
}

/// Runs mask-predict for several sequences at once. Each sequence has its own
/// caption, starting state and RNG; the batch only shares decoder forward calls.
pub fn run_maskpredict<T: Real>(
    model: &Model<T>,
    captions: &[&[u32]],
    mut states: Vec<DecodeState>,
    algorithm: Algorithm,
    opts: &DecodeOptions,
    rngs: &mut [ChaCha8Rng],
) -> Result<Vec<DecodeOutput>> {
    let b = captions.len();
    if b == 0 || states.len() != b || rngs.len() != b {
        return Err(Error::Config(
            "captions, states and rngs must have equal non-zero length".into(),
        ));
    }
    let n = model.config().seq_len_target;
    let v = model.config().vocab_image;
    let total = opts.iterations;
    let trajectory = keep_trajectory(total, n, opts.schedule)?;
    for s in &states {
        if s.y_obs.len() != n {
            return Err(Error::Length {
                got: s.y_obs.len(),
                expected: n,
            });
        }
    }
    let memory = padded_memory(model, captions)?;
    let mut traces = vec![
        DecodeTrace {
            encoder_passes: 1,
            ..Default::default()
        };
        b
    ];
    let mut flat = vec![0u32; b * n];
    for t in 1..=total {
        for (i, s) in states.iter().enumerate() {
            flat[i * n..(i + 1) * n].copy_from_slice(&s.y_obs);
        }
        let logits = model.decode_parallel_many(&memory, &flat, b)?;
        let temp = opts.gumbel_temp * (1.0 - t as f64 / total as f64);
        for (i, s) in states.iter_mut().enumerate() {
            let rng = &mut rngs[i];
            traces[i].decoder_passes += 1;
            let rows = &logits.data()[i * n * v..(i + 1) * n * v];
            let mut candidates: Vec<(f64, usize, u32)> = Vec::new();
            let mut revised = 0;
            for pos in 0..n {
                let is_revealed = s.revealed[pos];
                if is_revealed && algorithm == Algorithm::Freeze {
                    continue;
                }
                let lp = log_softmax(&rows[pos * v..(pos + 1) * v]);
                let tok = choose(&lp, opts.choice, rng);
                if is_revealed {
                    if s.y_obs[pos] != tok as u32 {
                        s.y_obs[pos] = tok as u32;
                        revised += 1;
                    }
                    continue;
                }
                let noise = if temp > 0.0 { temp * gumbel(rng) } else { 0.0 };
                s.p_obs[pos] = confidence_to_p(lp[tok]);
                candidates.push((lp[tok] + noise, pos, tok as u32));
            }
            // Highest confidence first; ties go to the lower position.
            candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let want = trajectory[t - 1].saturating_sub(s.revealed_count());
            let mut newly = Vec::with_capacity(want);
            for &(_, pos, tok) in candidates.iter().take(want) {
                s.y_obs[pos] = tok;
                s.p_obs[pos] = 1.0;
                s.revealed[pos] = true;
                newly.push(pos);
            }
            s.t = t;
            traces[i].iterations.push(IterationTrace {
                t,
                newly_revealed: newly,
                revealed_total: s.revealed_count(),
                revised,
                y_obs: s.y_obs.clone(),
            });
        }
    }
    Ok(states
        .into_iter()
        .zip(traces)
        .map(|(s, trace)| DecodeOutput {
            tokens: s.y_obs.clone(),
            trace,
            final_state: s,
        })
        .collect())
}

/// Single-sequence mask-predict from an all-MASK start.
pub fn decode_maskpredict<T: Real>(
    model: &Model<T>,
    caption: &[u32],
    algorithm: Algorithm,
    opts: &DecodeOptions,
    rng: &mut ChaCha8Rng,
) -> Result<DecodeOutput> {
    let state = DecodeState::all_masked(model.config().seq_len_target, model.config().mask_id());
    let mut rngs = [rng.clone()];
    let out = run_maskpredict(model, &[caption], vec![state], algorithm, opts, &mut rngs)?;
    *rng = rngs[0].clone();
    Ok(out.into_iter().next().unwrap())
}

pub fn decode_maskpredict_freeze<T: Real>(
    model: &Model<T>,
    caption: &[u32],
    opts: &DecodeOptions,
    rng: &mut ChaCha8Rng,
) -> Result<DecodeOutput> {
    decode_maskpredict(model, caption, Algorithm::Freeze, opts, rng)
}

pub fn decode_maskpredict_revise<T: Real>(
    model: &Model<T>,
    caption: &[u32],
    opts: &DecodeOptions,
    rng: &mut ChaCha8Rng,
) -> Result<DecodeOutput> {
    decode_maskpredict(model, caption, Algorithm::Revise, opts, rng)
}

/// Token selection for the autoregressive rollout.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampling {
    Greedy,
    Temperature(f64),
}

/// Left-to-right decoding with one causal decoder pass per position; each pass
/// recomputes the whole prefix.
pub fn decode_autoregressive<T: Real>(
    model: &Model<T>,
    caption: &[u32],
    sampling: Sampling,
    rng: &mut ChaCha8Rng,
) -> Result<DecodeOutput> {
    if let Sampling::Temperature(temp) = sampling {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(temp > 0.0) {
            return Err(Error::Config(format!("sampling temperature {temp} must be positive")));
        }
    }
    let n = model.config().seq_len_target;
    let memory = padded_memory(model, &[caption])?;
    let mut trace = DecodeTrace {
        encoder_passes: 1,
        ..Default::default()
    };
    let mut prefix = Vec::with_capacity(n);
    for t in 1..=n {
        let logits = model.decode_causal(&memory, &prefix)?;
        trace.decoder_passes += 1;
        let row: Vec<f64> = match sampling {
            Sampling::Greedy => logits.data().iter().map(|x| x.f64()).collect(),
            Sampling::Temperature(temp) => logits.data().iter().map(|x| x.f64() / temp).collect(),
        };
        let lp = log_softmax(&row);
        let tok = match sampling {
            Sampling::Greedy => argmax(&lp),
            Sampling::Temperature(_) => sample_categorical(&lp, rng),
        };
        prefix.push(tok as u32);
        trace.iterations.push(IterationTrace {
            t,
            newly_revealed: vec![t - 1],
            revealed_total: t,
            revised: 0,
            y_obs: prefix
                .iter()
                .copied()
                .chain(std::iter::repeat(model.config().mask_id()))
                .take(n)
                .collect(),
        });
    }
    let final_state = DecodeState {
        y_obs: prefix.clone(),
        p_obs: vec![1.0; n],
        revealed: vec![true; n],
        t: n,
    };
    Ok(DecodeOutput {
        tokens: prefix,
        trace,
        final_state,
    })
}

/// A decoding procedure, as used by candidate sampling, evaluation and benchmarks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Decoder {
    MaskPredict { algorithm: Algorithm, opts: DecodeOptions },
    Autoregressive { sampling: Sampling },
}

impl Decoder {
    /// Decodes `count` sequences for `caption`, sequence `k` using RNG stream `k` of `seed`.
    pub fn decode_many<T: Real>(
        &self,
        model: &Model<T>,
        caption: &[u32],
        count: usize,
        seed: u64,
    ) -> Result<Vec<DecodeOutput>> {
        let mut rngs: Vec<ChaCha8Rng> = (0..count as u64)
            .map(|k| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                r.set_stream(k);
                r
            })
            .collect();
        match *self {
            Decoder::MaskPredict { algorithm, opts } => {
                let n = model.config().seq_len_target;
                let states = vec![DecodeState::all_masked(n, model.config().mask_id()); count];
                let caps = vec![caption; count];
                run_maskpredict(model, &caps, states, algorithm, &opts, &mut rngs)
            }
            Decoder::Autoregressive { sampling } => rngs
                .iter_mut()
                .map(|r| decode_autoregressive(model, caption, sampling, r))
                .collect(),
        }
    }
}

/// Candidate scoring rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Scorer {
    /// Sum of log-probabilities of the candidate under one MASK-free decoder pass.
    SelfLikelihood,
    /// Exact generator likelihood; synthetic corpora only.
    Oracle(GridShape),
}

/// Scores candidates for one caption.
pub fn score_candidates<T: Real>(
    model: &Model<T>,
    caption: &[u32],
    candidates: &[Vec<u32>],
    scorer: Scorer,
) -> Result<Vec<f64>> {
    match scorer {
        Scorer::Oracle(shape) => candidates
            .iter()
            .map(|c| synth::log_likelihood(&shape, caption, c))
            .collect(),
        Scorer::SelfLikelihood => {
            let k = candidates.len();
            let n = model.config().seq_len_target;
            let v = model.config().vocab_image;
            let caps = vec![caption; k];
            let memory = padded_memory(model, &caps)?;
            let flat: Vec<u32> = candidates.iter().flatten().copied().collect();
            let logits = model.decode_parallel_many(&memory, &flat, k)?;
            Ok(candidates
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    c.iter()
                        .enumerate()
                        .map(|(pos, &tok)| {
                            let off = (i * n + pos) * v;
                            log_softmax(&logits.data()[off..off + v])[tok as usize]
                        })
                        .sum()
                })
                .collect())
        }
    }
}

/// Index of the highest score; ties go to the earliest candidate.
pub fn select_best(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub candidates: Vec<Vec<u32>>,
    pub scores: Vec<f64>,
    pub selected: usize,
    pub traces: Vec<DecodeTrace>,
}

impl CandidateSet {
    pub fn best(&self) -> &[u32] {
        &self.candidates[self.selected]
    }
}

/// `k` independent decodes with distinct RNG streams, scored and reranked.
pub fn sample_candidates<T: Real>(
    model: &Model<T>,
    caption: &[u32],
    k: usize,
    decoder: &Decoder,
    scorer: Scorer,
    seed: u64,
) -> Result<CandidateSet> {
    if k == 0 {
        return Err(Error::Config("candidate count must be at least 1".into()));
    }
    let outs = decoder.decode_many(model, caption, k, seed)?;
    let (candidates, traces): (Vec<_>, Vec<_>) = outs.into_iter().map(|o| (o.tokens, o.trace)).unzip();
    let scores = score_candidates(model, caption, &candidates, scorer)?;
    let selected = select_best(&scores);
    Ok(CandidateSet {
        candidates,
        scores,
        selected,
        traces,
    })
}
