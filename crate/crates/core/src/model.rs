//! Encoder-decoder transformer over discrete tokens.
//!
//! The encoder reads a caption; the decoder reads a target-length sequence whose
//! entries are image tokens or the MASK sentinel (id `V`) and attends to the
//! encoder memory through cross-attention. Decoder self-attention is fully
//! bidirectional for the non-autoregressive regimes and causal for the
//! autoregressive baseline, which feeds the MASK row as its start token. All
//! regimes therefore share one architecture and parameter count, and nothing in
//! the network depends on an iteration index or on how many positions are masked.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use maskpredict_tensor::{Real, Tape, Tensor, Var};
use rand::{Rng, RngCore, SeedableRng};
use rand_distr::{Distribution, Normal};

use crate::{Error, Result};

/// Caption padding token.
pub const PAD: u32 = 0;

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub width: usize,
    pub heads: usize,
    /// Caption vocabulary size.
    pub vocab_text: usize,
    /// Image-token vocabulary size `V`; the MASK sentinel is `V`.
    pub vocab_image: usize,
    pub seq_len_text: usize,
    /// Target length `n`.
    pub seq_len_target: usize,
    pub dropout: f64,
    pub ffn_mult: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            enc_layers: 4,
            dec_layers: 4,
            width: 128,
            heads: 4,
            vocab_text: 64,
            vocab_image: 512,
            seq_len_text: 16,
            seq_len_target: 64,
            dropout: 0.0,
            ffn_mult: 4,
        }
    }
}

impl ModelConfig {
    pub fn mask_id(&self) -> u32 {
        self.vocab_image as u32
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("width", self.width),
            ("heads", self.heads),
            ("vocab_text", self.vocab_text),
            ("vocab_image", self.vocab_image),
            ("seq_len_text", self.seq_len_text),
            ("seq_len_target", self.seq_len_target),
            ("ffn_mult", self.ffn_mult),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} is not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} must lie in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Which training procedure produced (or will produce) a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Regime {
    FullyNar,
    IterV1,
    IterV2,
    IterV3,
    Autoregressive,
}

impl Regime {
    pub const ALL: [Regime; 5] = [
        Regime::FullyNar,
        Regime::IterV1,
        Regime::IterV2,
        Regime::IterV3,
        Regime::Autoregressive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Regime::FullyNar => "fully_nar",
            Regime::IterV1 => "iter_v1",
            Regime::IterV2 => "iter_v2",
            Regime::IterV3 => "iter_v3",
            Regime::Autoregressive => "ar",
        }
    }

    pub fn is_iterative(self) -> bool {
        matches!(self, Regime::IterV1 | Regime::IterV2 | Regime::IterV3)
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL.into_iter().find(|r| r.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown regime {s:?}; expected fully_nar|iter_v1|iter_v2|iter_v3|ar"
            ))
        })
    }
}

#[derive(Clone, Copy, Debug)]
struct AttnIdx {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Clone, Copy, Debug)]
struct NormIdx {
    g: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct FfnIdx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Copy, Debug)]
struct EncLayer {
    ln1: NormIdx,
    attn: AttnIdx,
    ln2: NormIdx,
    ffn: FfnIdx,
}

#[derive(Clone, Copy, Debug)]
struct DecLayer {
    ln1: NormIdx,
    self_attn: AttnIdx,
    ln2: NormIdx,
    cross: AttnIdx,
    ln3: NormIdx,
    ffn: FfnIdx,
}

#[derive(Clone, Debug)]
struct Layout {
    enc_tok: usize,
    enc_pos: usize,
    enc_layers: Vec<EncLayer>,
    enc_ln: NormIdx,
    dec_tok: usize,
    dec_pos: usize,
    dec_layers: Vec<DecLayer>,
    dec_ln: NormIdx,
    head_w: usize,
    head_b: usize,
}

struct Builder<'a, T, R> {
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    rng: &'a mut R,
}

impl<T: Real, R: Rng> Builder<'_, T, R> {
    fn push(&mut self, name: String, tensor: Tensor<T>) -> usize {
        self.names.push(name);
        self.params.push(tensor);
        self.params.len() - 1
    }

    fn normal(&mut self, name: String, shape: Vec<usize>) -> usize {
        let dist = Normal::new(0.0, INIT_STD).expect("valid std");
        let n = shape.iter().product();
        let data: Vec<T> = (0..n).map(|_| T::of(dist.sample(self.rng))).collect();
        self.push(name, Tensor::new(shape, data).expect("shape matches"))
    }

    fn zeros(&mut self, name: String, shape: Vec<usize>) -> usize {
        self.push(name, Tensor::zeros(shape))
    }

    fn norm(&mut self, prefix: &str, w: usize) -> NormIdx {
        NormIdx {
            g: self.push(format!("{prefix}.g"), Tensor::full(vec![w], T::one())),
            b: self.zeros(format!("{prefix}.b"), vec![w]),
        }
    }

    fn attn(&mut self, prefix: &str, w: usize) -> AttnIdx {
        AttnIdx {
            wq: self.normal(format!("{prefix}.wq"), vec![w, w]),
            bq: self.zeros(format!("{prefix}.bq"), vec![w]),
            wk: self.normal(format!("{prefix}.wk"), vec![w, w]),
            bk: self.zeros(format!("{prefix}.bk"), vec![w]),
            wv: self.normal(format!("{prefix}.wv"), vec![w, w]),
            bv: self.zeros(format!("{prefix}.bv"), vec![w]),
            wo: self.normal(format!("{prefix}.wo"), vec![w, w]),
            bo: self.zeros(format!("{prefix}.bo"), vec![w]),
        }
    }

    fn ffn(&mut self, prefix: &str, w: usize, hidden: usize) -> FfnIdx {
        FfnIdx {
            w1: self.normal(format!("{prefix}.w1"), vec![w, hidden]),
            b1: self.zeros(format!("{prefix}.b1"), vec![hidden]),
            w2: self.normal(format!("{prefix}.w2"), vec![hidden, w]),
            b2: self.zeros(format!("{prefix}.b2"), vec![w]),
        }
    }
}

/// Counts forward passes through the encoder and decoder.
#[derive(Debug, Default)]
pub struct PassCounters {
    encoder: AtomicU64,
    decoder: AtomicU64,
}

impl PassCounters {
    pub fn encoder(&self) -> u64 {
        self.encoder.load(Ordering::Relaxed)
    }

    pub fn decoder(&self) -> u64 {
        self.decoder.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.encoder.store(0, Ordering::Relaxed);
        self.decoder.store(0, Ordering::Relaxed);
    }
}

/// Parameter variables bound onto one tape, in parameter order.
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps externally created variables, one per parameter in [`Model::names`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Transformer parameters plus their fixed layout.
pub struct Model<T> {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    layout: Layout,
    counters: PassCounters,
}

impl<T: Real> Clone for Model<T> {
    fn clone(&self) -> Self {
        Model {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.clone(),
            layout: self.layout.clone(),
            counters: PassCounters::default(),
        }
    }
}

impl<T: Real> fmt::Debug for Model<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("parameters", &self.parameter_count())
            .finish()
    }
}

impl<T: Real> Model<T> {
    /// Random initialization: N(0, 0.02) weights and embeddings, zero biases, unit norms.
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let hidden = w * config.ffn_mult;
        let mut b = Builder {
            names: Vec::new(),
            params: Vec::new(),
            rng,
        };
        let enc_tok = b.normal("enc.tok_emb".into(), vec![config.vocab_text, w]);
        let enc_pos = b.normal("enc.pos_emb".into(), vec![config.seq_len_text, w]);
        let enc_layers = (0..config.enc_layers)
            .map(|l| EncLayer {
                ln1: b.norm(&format!("enc.{l}.ln1"), w),
                attn: b.attn(&format!("enc.{l}.attn"), w),
                ln2: b.norm(&format!("enc.{l}.ln2"), w),
                ffn: b.ffn(&format!("enc.{l}.ffn"), w, hidden),
            })
            .collect();
        let enc_ln = b.norm("enc.ln_f", w);
        let dec_tok = b.normal("dec.tok_emb".into(), vec![config.vocab_image + 1, w]);
        let dec_pos = b.normal("dec.pos_emb".into(), vec![config.seq_len_target, w]);
        let dec_layers = (0..config.dec_layers)
            .map(|l| DecLayer {
                ln1: b.norm(&format!("dec.{l}.ln1"), w),
                self_attn: b.attn(&format!("dec.{l}.self"), w),
                ln2: b.norm(&format!("dec.{l}.ln2"), w),
                cross: b.attn(&format!("dec.{l}.cross"), w),
                ln3: b.norm(&format!("dec.{l}.ln3"), w),
                ffn: b.ffn(&format!("dec.{l}.ffn"), w, hidden),
            })
            .collect();
        let dec_ln = b.norm("dec.ln_f", w);
        let head_w = b.normal("head.w".into(), vec![w, config.vocab_image]);
        let head_b = b.zeros("head.b".into(), vec![config.vocab_image]);
        let layout = Layout {
            enc_tok,
            enc_pos,
            enc_layers,
            enc_ln,
            dec_tok,
            dec_pos,
            dec_layers,
            dec_ln,
            head_w,
            head_b,
        };
        Ok(Model {
            config,
            names: b.names,
            params: b.params,
            layout,
            counters: PassCounters::default(),
        })
    }

    /// Rebuilds a model from named tensors (e.g. a checkpoint). Every expected name
    /// must appear exactly once with the expected shape.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut scratch = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut model = Model::new(config, &mut scratch)?;
        if named.len() != model.params.len() {
            return Err(Error::Config(format!(
                "expected {} parameters, found {}",
                model.params.len(),
                named.len()
            )));
        }
        let mut seen = vec![false; model.params.len()];
        for (name, tensor) in named {
            let idx = model
                .names
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| Error::Config(format!("unexpected parameter {name}")))?;
            if seen[idx] {
                return Err(Error::Config(format!("duplicate parameter {name}")));
            }
            if tensor.shape() != model.params[idx].shape() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    tensor.shape(),
                    model.params[idx].shape()
                )));
            }
            seen[idx] = true;
            model.params[idx] = tensor;
        }
        Ok(model)
    }

    /// Same parameters at another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
            layout: self.layout.clone(),
            counters: PassCounters::default(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn counters(&self) -> &PassCounters {
        &self.counters
    }

    /// Places every parameter on the tape. With `trainable` false (or on a no-grad
    /// tape) the parameters are constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        Bound(self.params.iter().map(|p| tape.leaf(p.clone(), trainable)).collect())
    }

    /// Right-pads (or truncates) a caption to the fixed encoder length.
    pub fn prepare_caption(&self, caption: &[u32]) -> Vec<u32> {
        let l = self.config.seq_len_text;
        let mut out: Vec<u32> = caption.iter().copied().take(l).collect();
        out.resize(l, PAD);
        out
    }

    fn check_caption(&self, caption: &[u32]) -> Result<()> {
        if caption.len() > self.config.seq_len_text {
            return Err(Error::Length {
                got: caption.len(),
                expected: self.config.seq_len_text,
            });
        }
        for (position, &token) in caption.iter().enumerate() {
            if token as usize >= self.config.vocab_text {
                return Err(Error::Token {
                    position,
                    token,
                    limit: self.config.vocab_text,
                });
            }
        }
        Ok(())
    }

    fn check_target(&self, tokens: &[u32]) -> Result<()> {
        for (position, &token) in tokens.iter().enumerate() {
            if token as usize > self.config.vocab_image {
                return Err(Error::Token {
                    position,
                    token,
                    limit: self.config.vocab_image + 1,
                });
            }
        }
        Ok(())
    }

    fn linear(&self, tape: &mut Tape<T>, p: &Bound, x: Var, w: usize, b: usize) -> Result<Var> {
        let y = tape.matmul(x, p.0[w])?;
        Ok(tape.add_row(y, p.0[b])?)
    }

    fn norm(&self, tape: &mut Tape<T>, p: &Bound, x: Var, n: NormIdx) -> Result<Var> {
        Ok(tape.layer_norm(x, p.0[n.g], p.0[n.b])?)
    }

    /// Splits `[batch*len, width]` into `[batch*heads, len, head_dim]`.
    fn split_heads(&self, tape: &mut Tape<T>, x: Var, batch: usize, len: usize) -> Result<Var> {
        let (h, d) = (self.config.heads, self.config.head_dim());
        let x = tape.reshape(x, vec![batch, len, h, d])?;
        let x = tape.permute_0213(x)?;
        Ok(tape.reshape(x, vec![batch * h, len, d])?)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        a: AttnIdx,
        xq: Var,
        xkv: Var,
        batch: usize,
        lq: usize,
        lk: usize,
        causal: bool,
    ) -> Result<Var> {
        let (h, d) = (self.config.heads, self.config.head_dim());
        let q = self.linear(tape, p, xq, a.wq, a.bq)?;
        let k = self.linear(tape, p, xkv, a.wk, a.bk)?;
        let v = self.linear(tape, p, xkv, a.wv, a.bv)?;
        let q = self.split_heads(tape, q, batch, lq)?;
        let k = self.split_heads(tape, k, batch, lk)?;
        let v = self.split_heads(tape, v, batch, lk)?;
        let s = tape.bmm(q, k, true)?;
        let s = tape.scale(s, 1.0 / (d as f64).sqrt())?;
        let attn = tape.softmax(s, causal)?;
        let o = tape.bmm(attn, v, false)?;
        let o = tape.reshape(o, vec![batch, h, lq, d])?;
        let o = tape.permute_0213(o)?;
        let o = tape.reshape(o, vec![batch * lq, h * d])?;
        self.linear(tape, p, o, a.wo, a.bo)
    }

    fn ffn(&self, tape: &mut Tape<T>, p: &Bound, x: Var, f: FfnIdx) -> Result<Var> {
        let hdn = self.linear(tape, p, x, f.w1, f.b1)?;
        let hdn = tape.gelu(hdn)?;
        self.linear(tape, p, hdn, f.w2, f.b2)
    }

    fn drop(&self, tape: &mut Tape<T>, x: Var, rng: &mut Option<&mut dyn RngCore>) -> Result<Var> {
        match rng {
            Some(r) if self.config.dropout > 0.0 => Ok(tape.dropout(x, self.config.dropout, *r)?),
            _ => Ok(x),
        }
    }

    /// Encodes `batch` captions of equal length `len` (flattened). Returns memory
    /// `[batch*len, width]`. Dropout is applied only when `rng` is given.
    pub fn encode_batch(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        captions: &[u32],
        batch: usize,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        if batch == 0 || !captions.len().is_multiple_of(batch) {
            return Err(Error::Length {
                got: captions.len(),
                expected: batch,
            });
        }
        let len = captions.len() / batch;
        for c in captions.chunks(len) {
            self.check_caption(c)?;
        }
        let l = &self.layout;
        let ids: Vec<usize> = captions.iter().map(|&t| t as usize).collect();
        let pos: Vec<usize> = (0..batch).flat_map(|_| 0..len).collect();
        let tok = tape.embedding(p.0[l.enc_tok], &ids)?;
        let pe = tape.embedding(p.0[l.enc_pos], &pos)?;
        let mut x = tape.add(tok, pe)?;
        x = self.drop(tape, x, &mut rng)?;
        for layer in &l.enc_layers {
            let h = self.norm(tape, p, x, layer.ln1)?;
            let a = self.attention(tape, p, layer.attn, h, h, batch, len, len, false)?;
            let a = self.drop(tape, a, &mut rng)?;
            x = tape.add(x, a)?;
            let h = self.norm(tape, p, x, layer.ln2)?;
            let f = self.ffn(tape, p, h, layer.ffn)?;
            let f = self.drop(tape, f, &mut rng)?;
            x = tape.add(x, f)?;
        }
        self.norm(tape, p, x, l.enc_ln)
    }

    /// Decodes `batch` sequences of length `len` (flattened) against `memory`
    /// (`[batch*mem_len, width]`). Returns logits `[batch, len, V]` for every position.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_batch(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        memory: Var,
        mem_len: usize,
        tokens: &[u32],
        batch: usize,
        causal: bool,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        if batch == 0 || !tokens.len().is_multiple_of(batch) {
            return Err(Error::Length {
                got: tokens.len(),
                expected: batch,
            });
        }
        let len = tokens.len() / batch;
        if len > self.config.seq_len_target {
            return Err(Error::Length {
                got: len,
                expected: self.config.seq_len_target,
            });
        }
        self.check_target(tokens)?;
        let l = &self.layout;
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let pos: Vec<usize> = (0..batch).flat_map(|_| 0..len).collect();
        let tok = tape.embedding(p.0[l.dec_tok], &ids)?;
        let pe = tape.embedding(p.0[l.dec_pos], &pos)?;
        let mut x = tape.add(tok, pe)?;
        x = self.drop(tape, x, &mut rng)?;
        for layer in &l.dec_layers {
            let h = self.norm(tape, p, x, layer.ln1)?;
            let a = self.attention(tape, p, layer.self_attn, h, h, batch, len, len, causal)?;
            let a = self.drop(tape, a, &mut rng)?;
            x = tape.add(x, a)?;
            let h = self.norm(tape, p, x, layer.ln2)?;
            let c = self.attention(tape, p, layer.cross, h, memory, batch, len, mem_len, false)?;
            let c = self.drop(tape, c, &mut rng)?;
            x = tape.add(x, c)?;
            let h = self.norm(tape, p, x, layer.ln3)?;
            let f = self.ffn(tape, p, h, layer.ffn)?;
            let f = self.drop(tape, f, &mut rng)?;
            x = tape.add(x, f)?;
        }
        let x = self.norm(tape, p, x, l.dec_ln)?;
        let logits = self.linear(tape, p, x, l.head_w, l.head_b)?;
        Ok(tape.reshape(logits, vec![batch, len, self.config.vocab_image])?)
    }

    /// Eval-mode encoding of one caption, exactly as given (no padding).
    /// Returns memory `[len, width]`.
    pub fn encode(&self, caption: &[u32]) -> Result<Tensor<T>> {
        if caption.is_empty() {
            return Err(Error::Empty("caption"));
        }
        let mut tape = Tape::no_grad();
        let p = self.bind(&mut tape, false);
        let m = self.encode_batch(&mut tape, &p, caption, 1, None)?;
        self.counters.encoder.fetch_add(1, Ordering::Relaxed);
        Ok(tape.value(m).clone())
    }

    /// Eval-mode encoding of `batch` equal-length captions (flattened), e.g. the
    /// output of [`Model::prepare_caption`]. Returns memory `[batch*len, width]`.
    pub fn encode_many(&self, captions: &[u32], batch: usize) -> Result<Tensor<T>> {
        let mut tape = Tape::no_grad();
        let p = self.bind(&mut tape, false);
        let m = self.encode_batch(&mut tape, &p, captions, batch, None)?;
        self.counters.encoder.fetch_add(batch as u64, Ordering::Relaxed);
        Ok(tape.value(m).clone())
    }

    /// Bidirectional decoder passes for `batch` full-length sequences at once;
    /// counts one decoder pass per sequence. Returns logits `[batch, n, V]`.
    pub fn decode_parallel_many(&self, memory: &Tensor<T>, y_obs: &[u32], batch: usize) -> Result<Tensor<T>> {
        let n = self.config.seq_len_target;
        if batch == 0 || y_obs.len() != batch * n {
            return Err(Error::Length {
                got: y_obs.len(),
                expected: batch * n,
            });
        }
        let mem_rows = memory.shape()[0];
        if !mem_rows.is_multiple_of(batch) {
            return Err(Error::Length {
                got: mem_rows,
                expected: batch,
            });
        }
        let mut tape = Tape::no_grad();
        let p = self.bind(&mut tape, false);
        let m = tape.constant(memory.clone());
        let logits = self.decode_batch(&mut tape, &p, m, mem_rows / batch, y_obs, batch, false, None)?;
        self.counters.decoder.fetch_add(batch as u64, Ordering::Relaxed);
        Ok(tape.value(logits).clone())
    }

    /// One bidirectional decoder pass over a full-length sequence that may contain
    /// MASK entries. Returns logits `[n, V]` for all `n` positions.
    pub fn decode_parallel(&self, memory: &Tensor<T>, y_obs: &[u32]) -> Result<Tensor<T>> {
        let n = self.config.seq_len_target;
        if y_obs.len() != n {
            return Err(Error::Length {
                got: y_obs.len(),
                expected: n,
            });
        }
        let mut tape = Tape::no_grad();
        let p = self.bind(&mut tape, false);
        let mem_len = memory.shape()[0];
        let m = tape.constant(memory.clone());
        let logits = self.decode_batch(&mut tape, &p, m, mem_len, y_obs, 1, false, None)?;
        self.counters.decoder.fetch_add(1, Ordering::Relaxed);
        let v = self.config.vocab_image;
        Ok(tape.value(logits).clone().reshaped(vec![n, v])?)
    }

    /// One causal decoder pass over `[start, prefix...]`; returns the logits `[V]`
    /// for position `prefix.len()`.
    pub fn decode_causal(&self, memory: &Tensor<T>, prefix: &[u32]) -> Result<Tensor<T>> {
        let n = self.config.seq_len_target;
        if prefix.len() >= n {
            return Err(Error::Length {
                got: prefix.len(),
                expected: n - 1,
            });
        }
        if let Some(position) = prefix.iter().position(|&t| t as usize >= self.config.vocab_image) {
            return Err(Error::Token {
                position,
                token: prefix[position],
                limit: self.config.vocab_image,
            });
        }
        let mut input = Vec::with_capacity(prefix.len() + 1);
        input.push(self.config.mask_id());
        input.extend_from_slice(prefix);
        let mut tape = Tape::no_grad();
        let p = self.bind(&mut tape, false);
        let mem_len = memory.shape()[0];
        let m = tape.constant(memory.clone());
        let logits = self.decode_batch(&mut tape, &p, m, mem_len, &input, 1, true, None)?;
        self.counters.decoder.fetch_add(1, Ordering::Relaxed);
        let v = self.config.vocab_image;
        let all = tape.value(logits).data();
        let last = prefix.len();
        Tensor::new(vec![v], all[last * v..(last + 1) * v].to_vec()).map_err(Error::from)
    }
}

/// A float32 model together with the regime that trains it and its step count.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub model: Model<f32>,
    pub regime: Regime,
    pub step: u64,
}

impl ModelBundle {
    pub fn new<R: Rng>(config: ModelConfig, regime: Regime, rng: &mut R) -> Result<Self> {
        Ok(ModelBundle {
            model: Model::new(config, rng)?,
            regime,
            step: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        self.model.config()
    }
}
