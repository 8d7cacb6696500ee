//! Checkpoint files: `EMG1` magic, u32 LE format version, u64 LE header length,
//! a UTF-8 `key=value` header (config, regime, step, RNG state and a parameter
//! manifest), then raw little-endian f32 payload in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use maskpredict_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::{Model, ModelBundle, ModelConfig, Regime};
use crate::training::{OptConfig, OptState, Trainer};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EMG1";
pub const VERSION: u32 = 1;

/// A model plus, optionally, everything needed to resume training exactly.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub bundle: ModelBundle,
    pub seed: u64,
    pub opt: Option<OptState>,
    pub rng: Option<ChaCha8Rng>,
    /// Free-form run settings (the CLI stores its resolved config here).
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer, seed: u64, meta: BTreeMap<String, String>) -> Self {
        Checkpoint {
            bundle: trainer.bundle.clone(),
            seed,
            opt: Some(trainer.opt.clone()),
            rng: Some(trainer.rng.clone()),
            meta,
        }
    }

    pub fn model_only(bundle: ModelBundle, seed: u64) -> Self {
        Checkpoint {
            bundle,
            seed,
            opt: None,
            rng: None,
            meta: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let model = &self.bundle.model;
        let c = model.config();
        let mut h = String::new();
        let mut kv = |k: &str, v: String| {
            h.push_str(k);
            h.push('=');
            h.push_str(&v);
            h.push('\n');
        };
        kv("regime", self.bundle.regime.to_string());
        kv("step", self.bundle.step.to_string());
        kv("seed", self.seed.to_string());
        kv("model.enc_layers", c.enc_layers.to_string());
        kv("model.dec_layers", c.dec_layers.to_string());
        kv("model.width", c.width.to_string());
        kv("model.heads", c.heads.to_string());
        kv("model.vocab_text", c.vocab_text.to_string());
        kv("model.vocab_image", c.vocab_image.to_string());
        kv("model.seq_len_text", c.seq_len_text.to_string());
        kv("model.seq_len_target", c.seq_len_target.to_string());
        kv("model.dropout", format!("{:?}", c.dropout));
        kv("model.ffn_mult", c.ffn_mult.to_string());
        if let Some(rng) = &self.rng {
            kv("rng.seed", hex(&rng.get_seed()));
            kv("rng.stream", rng.get_stream().to_string());
            kv("rng.word_pos", rng.get_word_pos().to_string());
        }
        if let Some(o) = &self.opt {
            let oc = &o.config;
            kv("opt.step", o.step.to_string());
            kv("opt.peak_lr", format!("{:?}", oc.peak_lr));
            kv("opt.warmup_ratio", format!("{:?}", oc.warmup_ratio));
            kv("opt.beta1", format!("{:?}", oc.beta1));
            kv("opt.beta2", format!("{:?}", oc.beta2));
            kv("opt.eps", format!("{:?}", oc.eps));
            kv("opt.weight_decay", format!("{:?}", oc.weight_decay));
            kv("opt.clip_norm", format!("{:?}", oc.clip_norm));
            kv("opt.total_steps", oc.total_steps.to_string());
        }
        for (k, v) in &self.meta {
            kv(&format!("meta.{k}"), v.clone());
        }
        let mut tensors: Vec<(String, &Tensor<f32>)> = model.names().iter().cloned().zip(model.params()).collect();
        if let Some(o) = &self.opt {
            for (name, t) in model.names().iter().zip(&o.m) {
                tensors.push((format!("adam.m.{name}"), t));
            }
            for (name, t) in model.names().iter().zip(&o.v) {
                tensors.push((format!("adam.v.{name}"), t));
            }
        }
        let mut offset = 0usize;
        for (name, t) in &tensors {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            h.push_str(&format!("param {name} {} {offset} {}\n", dims.join("x"), t.numel()));
            offset += t.numel();
        }
        let mut out = Vec::with_capacity(16 + h.len() + offset * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(h.len() as u64).to_le_bytes());
        out.extend_from_slice(h.as_bytes());
        for (_, t) in &tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |message: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint (missing EMG1 magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!(
                "unsupported checkpoint format version {version}; this build reads version {VERSION}"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header_end = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("header length exceeds file size".into()))?;
        let header = std::str::from_utf8(&bytes[16..header_end]).map_err(|_| bad("header is not UTF-8".into()))?;
        let payload = &bytes[header_end..];

        let mut fields = BTreeMap::new();
        let mut manifest = Vec::new();
        for line in header.lines() {
            if let Some(rest) = line.strip_prefix("param ") {
                let parts: Vec<&str> = rest.split(' ').collect();
                if parts.len() != 4 {
                    return Err(bad(format!("bad manifest line {line:?}")));
                }
                let shape = parts[1]
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad(format!("bad shape in {line:?}")))?;
                let offset: usize = parts[2].parse().map_err(|_| bad(format!("bad offset in {line:?}")))?;
                let len: usize = parts[3].parse().map_err(|_| bad(format!("bad length in {line:?}")))?;
                manifest.push((parts[0].to_string(), shape, offset, len));
            } else if let Some((k, v)) = line.split_once('=') {
                fields.insert(k.to_string(), v.to_string());
            } else if !line.is_empty() {
                return Err(bad(format!("bad header line {line:?}")));
            }
        }
        let get = |k: &str| fields.get(k).ok_or_else(|| bad(format!("header lacks {k}")));
        let num = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|_| bad(format!("bad value for {k}"))) };
        let float = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| bad(format!("bad value for {k}"))) };
        let config = ModelConfig {
            enc_layers: num("model.enc_layers")? as usize,
            dec_layers: num("model.dec_layers")? as usize,
            width: num("model.width")? as usize,
            heads: num("model.heads")? as usize,
            vocab_text: num("model.vocab_text")? as usize,
            vocab_image: num("model.vocab_image")? as usize,
            seq_len_text: num("model.seq_len_text")? as usize,
            seq_len_target: num("model.seq_len_target")? as usize,
            dropout: float("model.dropout")?,
            ffn_mult: num("model.ffn_mult")? as usize,
        };
        let regime: Regime = get("regime")?.parse()?;

        let mut tensors: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        for (name, shape, offset, len) in manifest {
            if shape.iter().product::<usize>() != len {
                return Err(bad(format!(
                    "parameter {name}: shape {shape:?} does not hold {len} values"
                )));
            }
            let start = offset * 4;
            let end = (offset + len) * 4;
            if end > payload.len() {
                return Err(bad(format!("parameter {name} extends past the payload")));
            }
            let data: Vec<f32> = payload[start..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            if tensors.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
                return Err(bad(format!("parameter {name} listed twice")));
            }
        }
        let mut model_params = Vec::new();
        let mut rest = BTreeMap::new();
        for (k, t) in tensors {
            if k.starts_with("adam.") {
                rest.insert(k, t);
            } else {
                model_params.push((k, t));
            }
        }
        let model = Model::from_named(config, model_params).map_err(|e| bad(e.to_string()))?;
        let opt = if fields.contains_key("opt.step") {
            let oc = OptConfig {
                peak_lr: float("opt.peak_lr")?,
                warmup_ratio: float("opt.warmup_ratio")?,
                beta1: float("opt.beta1")?,
                beta2: float("opt.beta2")?,
                eps: float("opt.eps")?,
                weight_decay: float("opt.weight_decay")?,
                clip_norm: float("opt.clip_norm")?,
                total_steps: num("opt.total_steps")?,
            };
            let mut take = |prefix: &str| -> Result<Vec<Tensor<f32>>> {
                model
                    .names()
                    .iter()
                    .map(|n| {
                        rest.remove(&format!("{prefix}{n}"))
                            .ok_or_else(|| bad(format!("missing optimizer moment {prefix}{n}")))
                    })
                    .collect()
            };
            let m = take("adam.m.")?;
            let v = take("adam.v.")?;
            Some(OptState {
                config: oc,
                m,
                v,
                step: num("opt.step")?,
            })
        } else {
            None
        };
        if let Some(k) = rest.keys().next() {
            return Err(bad(format!("unexpected tensor {k}")));
        }
        let rng = if fields.contains_key("rng.seed") {
            let seed_bytes = unhex(get("rng.seed")?).ok_or_else(|| bad("bad rng.seed".into()))?;
            let seed: [u8; 32] = seed_bytes
                .try_into()
                .map_err(|_| bad("rng.seed must be 32 bytes".into()))?;
            let mut rng = ChaCha8Rng::from_seed(seed);
            rng.set_stream(num("rng.stream")?);
            let pos: u128 = get("rng.word_pos")?
                .parse()
                .map_err(|_| bad("bad rng.word_pos".into()))?;
            rng.set_word_pos(pos);
            Some(rng)
        } else {
            None
        };
        let meta = fields
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("meta.").map(|k| (k.to_string(), v.clone())))
            .collect();
        Ok(Checkpoint {
            bundle: ModelBundle {
                model,
                regime,
                step: num("step")?,
            },
            seed: num("seed")?,
            opt,
            rng,
            meta,
        })
    }

    /// Atomic write: temp file in the same directory, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let file_name = path
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default();
        let tmp = dir.join(format!(".{file_name}.tmp"));
        let bytes = self.to_bytes();
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()
        };
        write().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<Vec<u8>> {
    if !s.len().is_multiple_of(2) {
        return None;
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).ok())
        .collect()
}
