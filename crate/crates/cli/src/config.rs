//! Flat `key=value` run configuration. Precedence: flags > file > defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use maskpredict::decoding::{Algorithm, TokenChoice};
use maskpredict::model::{ModelConfig, Regime};
use maskpredict::synth::{Family, GridShape, SynthConfig};
use maskpredict::training::OptConfig;
use maskpredict::{Error, Result, Schedule};

/// Every accepted key with its default.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("out", "runs"),
    ("checkpoint", ""),
    ("force", "false"),
    // data
    ("data_dir", ""),
    ("grid_height", "8"),
    ("grid_width", "8"),
    ("vocab", "512"),
    ("vocab_text", "64"),
    ("families", "stripes,checker,blocks,two_region"),
    ("periods", "2,4,8"),
    ("noise_levels", "0,0.05,0.1"),
    ("latent_free", "false"),
    ("n_train", "20000"),
    ("n_val", "1000"),
    ("n_test", "1000"),
    // model
    ("enc_layers", "4"),
    ("dec_layers", "4"),
    ("width", "128"),
    ("heads", "4"),
    ("seq_len_text", "16"),
    ("dropout", "0"),
    ("ffn_mult", "4"),
    // training
    ("regime", "iter_v1"),
    ("train_schedule", "linear"),
    ("batch_size", "32"),
    ("steps", "3000"),
    ("peak_lr", "3e-4"),
    ("warmup_ratio", "0.02"),
    ("beta1", "0.9"),
    ("beta2", "0.96"),
    ("adam_eps", "1e-8"),
    ("weight_decay", "0.045"),
    ("clip_norm", "4.0"),
    ("log_interval", "100"),
    ("checkpoint_interval", "1000"),
    ("val_records", "256"),
    ("sample_pass1", "false"),
    // decoding
    ("algorithm", "auto"),
    ("infer_schedule", "cosine"),
    ("iterations", "16"),
    ("candidates", "1"),
    ("gumbel_temp", "1.0"),
    ("token_choice", "argmax"),
    ("scorer", "self"),
    ("ar_sampling", "greedy"),
    ("ar_temperature", "1.0"),
    ("eval_records", "200"),
    // benchmarks and sweeps
    ("t_values", "4,8,16,32"),
    ("latency_repeats", "5"),
    ("latency_warmup", "2"),
    ("sweep_regimes", "iter_v1,iter_v2,iter_v3"),
    ("sweep_train_schedules", "linear,cosine"),
    ("sweep_infer_schedules", "linear,cosine"),
    ("sweep_steps", "1500"),
];

/// Resolved key → value map (strings), before typing.
#[derive(Clone, Debug, PartialEq)]
pub struct RawConfig {
    pub values: BTreeMap<String, String>,
    /// Keys given explicitly in a file or on the command line.
    pub explicit: Vec<String>,
}

fn is_known(key: &str) -> bool {
    DEFAULTS.iter().any(|(k, _)| *k == key)
}

/// Parses `key=value` lines; blank lines and `#` comments are ignored.
pub fn parse_config_text(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{origin}:{}: expected key=value, got {line:?}", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RawConfig {
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut values: BTreeMap<String, String> =
            DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        let mut explicit = Vec::new();
        let mut apply = |pairs: Vec<(String, String)>, origin: &str| -> Result<()> {
            for (k, v) in pairs {
                if !is_known(&k) {
                    return Err(Error::Config(format!("unknown config key {k:?} ({origin})")));
                }
                explicit.push(k.clone());
                values.insert(k, v);
            }
            Ok(())
        };
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            apply(parse_config_text(&text, &path.display().to_string())?, "config file")?;
        }
        apply(overrides.to_vec(), "command line")?;
        explicit.sort();
        explicit.dedup();
        Ok(RawConfig { values, explicit })
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("known key")
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.iter().any(|k| k == key)
    }

    pub fn render(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

fn parse<T: std::str::FromStr>(raw: &RawConfig, key: &str) -> Result<T> {
    let v = raw.get(key);
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
}

fn list<T: std::str::FromStr>(raw: &RawConfig, key: &str) -> Result<Vec<T>> {
    raw.get(key)
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid entry {s:?} in {key}")))
        })
        .collect()
}

fn parse_with<T>(raw: &RawConfig, key: &str, f: impl Fn(&str) -> Result<T>) -> Result<T> {
    f(raw.get(key)).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{key}: {m}")),
        other => other,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScorerKind {
    SelfLikelihood,
    Oracle,
}

/// Typed, validated run configuration.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub raw: RawConfig,
    pub seed: u64,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub force: bool,
    pub data_dir: PathBuf,
    pub synth: SynthConfig,
    pub n_train: u64,
    pub n_val: u64,
    pub n_test: u64,
    pub model: ModelConfig,
    pub regime: Regime,
    pub train_schedule: Schedule,
    pub batch_size: usize,
    pub steps: u64,
    pub opt: OptConfig,
    pub log_interval: u64,
    pub checkpoint_interval: u64,
    pub val_records: usize,
    pub sample_pass1: bool,
    pub algorithm: Option<Algorithm>,
    pub infer_schedule: Schedule,
    pub iterations: usize,
    pub candidates: usize,
    pub gumbel_temp: f64,
    pub token_choice: TokenChoice,
    pub scorer: ScorerKind,
    pub ar_temperature: Option<f64>,
    pub eval_records: usize,
    pub t_values: Vec<usize>,
    pub latency_repeats: usize,
    pub latency_warmup: usize,
    pub sweep_regimes: Vec<Regime>,
    pub sweep_train_schedules: Vec<Schedule>,
    pub sweep_infer_schedules: Vec<Schedule>,
    pub sweep_steps: u64,
}

fn boolean(s: &str) -> Result<bool> {
    match s {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!("expected a boolean, got {other:?}"))),
    }
}

impl RunConfig {
    pub fn from_raw(raw: RawConfig) -> Result<Self> {
        let shape = GridShape {
            height: parse(&raw, "grid_height")?,
            width: parse(&raw, "grid_width")?,
            vocab: parse(&raw, "vocab")?,
            vocab_text: parse(&raw, "vocab_text")?,
        };
        let families: Vec<Family> = raw
            .get("families")
            .split(',')
            .map(|s| s.trim().parse::<Family>())
            .collect::<Result<_>>()?;
        let synth = SynthConfig {
            shape,
            families,
            periods: list(&raw, "periods")?,
            noise_levels: list(&raw, "noise_levels")?,
            palette_min: 2,
            palette_max: 4,
            latent_free: parse_with(&raw, "latent_free", boolean)?,
        };
        synth.validate()?;
        let model = ModelConfig {
            enc_layers: parse(&raw, "enc_layers")?,
            dec_layers: parse(&raw, "dec_layers")?,
            width: parse(&raw, "width")?,
            heads: parse(&raw, "heads")?,
            vocab_text: shape.vocab_text,
            vocab_image: shape.vocab,
            seq_len_text: parse(&raw, "seq_len_text")?,
            seq_len_target: shape.n(),
            dropout: parse(&raw, "dropout")?,
            ffn_mult: parse(&raw, "ffn_mult")?,
        };
        model.validate()?;
        if synth.max_caption_len() > model.seq_len_text {
            return Err(Error::Config(format!(
                "seq_len_text {} is shorter than the longest caption ({})",
                model.seq_len_text,
                synth.max_caption_len()
            )));
        }
        let steps: u64 = parse(&raw, "steps")?;
        let opt = OptConfig {
            peak_lr: parse(&raw, "peak_lr")?,
            warmup_ratio: parse(&raw, "warmup_ratio")?,
            beta1: parse(&raw, "beta1")?,
            beta2: parse(&raw, "beta2")?,
            eps: parse(&raw, "adam_eps")?,
            weight_decay: parse(&raw, "weight_decay")?,
            clip_norm: parse(&raw, "clip_norm")?,
            total_steps: steps,
        };
        opt.validate()?;
        let algorithm = match raw.get("algorithm") {
            "auto" => None,
            s => Some(s.parse::<Algorithm>()?),
        };
        let token_choice = match raw.get("token_choice") {
            "argmax" => TokenChoice::Argmax,
            "sample" => TokenChoice::Sample,
            other => return Err(Error::Config(format!("token_choice {other:?}; expected argmax|sample"))),
        };
        let scorer = match raw.get("scorer") {
            "self" => ScorerKind::SelfLikelihood,
            "oracle" => ScorerKind::Oracle,
            other => return Err(Error::Config(format!("scorer {other:?}; expected self|oracle"))),
        };
        let ar_temperature = match raw.get("ar_sampling") {
            "greedy" => None,
            "temperature" => Some(parse::<f64>(&raw, "ar_temperature")?),
            other => {
                return Err(Error::Config(format!(
                    "ar_sampling {other:?}; expected greedy|temperature"
                )))
            }
        };
        if let Some(t) = ar_temperature {
            #[allow(clippy::neg_cmp_op_on_partial_ord)]
            if !(t > 0.0) {
                return Err(Error::Config("ar_temperature must be positive".into()));
            }
        }
        let out: PathBuf = raw.get("out").into();
        let data_dir = match raw.get("data_dir") {
            "" => out.join("data"),
            d => d.into(),
        };
        let checkpoint = match raw.get("checkpoint") {
            "" => None,
            p => Some(PathBuf::from(p)),
        };
        let cfg = RunConfig {
            seed: parse(&raw, "seed")?,
            out,
            checkpoint,
            force: parse_with(&raw, "force", boolean)?,
            data_dir,
            synth,
            n_train: parse(&raw, "n_train")?,
            n_val: parse(&raw, "n_val")?,
            n_test: parse(&raw, "n_test")?,
            model,
            regime: raw.get("regime").parse()?,
            train_schedule: raw.get("train_schedule").parse()?,
            batch_size: parse(&raw, "batch_size")?,
            steps,
            opt,
            log_interval: parse(&raw, "log_interval")?,
            checkpoint_interval: parse(&raw, "checkpoint_interval")?,
            val_records: parse(&raw, "val_records")?,
            sample_pass1: parse_with(&raw, "sample_pass1", boolean)?,
            algorithm,
            infer_schedule: raw.get("infer_schedule").parse()?,
            iterations: parse(&raw, "iterations")?,
            candidates: parse(&raw, "candidates")?,
            gumbel_temp: parse(&raw, "gumbel_temp")?,
            token_choice,
            scorer,
            ar_temperature,
            eval_records: parse(&raw, "eval_records")?,
            t_values: list(&raw, "t_values")?,
            latency_repeats: parse(&raw, "latency_repeats")?,
            latency_warmup: parse(&raw, "latency_warmup")?,
            sweep_regimes: list(&raw, "sweep_regimes")?,
            sweep_train_schedules: list(&raw, "sweep_train_schedules")?,
            sweep_infer_schedules: list(&raw, "sweep_infer_schedules")?,
            sweep_steps: parse(&raw, "sweep_steps")?,
            raw,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let n = self.model.seq_len_target;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.iterations == 0 || self.iterations > n {
            return Err(Error::Config(format!("iterations must lie in 1..={n}")));
        }
        if let Some(t) = self.t_values.iter().find(|&&t| t == 0 || t > n) {
            return Err(Error::Config(format!("t_values entry {t} must lie in 1..={n}")));
        }
        if self.candidates == 0 {
            return Err(Error::Config("candidates must be at least 1".into()));
        }
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.gumbel_temp >= 0.0) {
            return Err(Error::Config("gumbel_temp must be non-negative".into()));
        }
        if self.latency_repeats == 0 {
            return Err(Error::Config("latency_repeats must be positive".into()));
        }
        if self.val_records == 0 || self.eval_records == 0 {
            return Err(Error::Config("val_records and eval_records must be positive".into()));
        }
        if self.sweep_regimes.iter().any(|r| !r.is_iterative()) {
            return Err(Error::Config("sweep_regimes may only list iterative regimes".into()));
        }
        Ok(())
    }
}
