//! Synthetic caption → token-grid corpus with hidden latent structure.
//!
//! A caption names a pattern family, orientation, period, noise level and
//! palette. The grid additionally depends on a latent phase (or, for blocks, on
//! per-block colour draws) that the caption never reveals, so each caption has
//! several equally likely clean grids ("modes"). Noise then replaces each token
//! independently, with probability ε, by a uniform draw over the whole vocabulary.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::{Error, Result};

pub const FORMAT_TAG: &str = "#maskpredict-corpus v1";

const TOK_FAMILY: u32 = 1;
const TOK_ORIENT: u32 = 5;
const TOK_PERIOD: u32 = 7;
const TOK_NOISE: u32 = 11;
const TOK_COLOR: u32 = 32;
const MAX_COLORS: usize = 32;

/// Periods and noise levels that have caption tokens.
pub const PERIODS: [usize; 4] = [1, 2, 4, 8];
pub const NOISE_LEVELS: [f64; 3] = [0.0, 0.05, 0.1];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    Stripes,
    Checker,
    Blocks,
    TwoRegion,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Stripes, Family::Checker, Family::Blocks, Family::TwoRegion];

    pub fn name(self) -> &'static str {
        match self {
            Family::Stripes => "stripes",
            Family::Checker => "checker",
            Family::Blocks => "blocks",
            Family::TwoRegion => "two_region",
        }
    }

    fn index(self) -> u32 {
        Family::ALL.iter().position(|&f| f == self).unwrap() as u32
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::UnknownFamily(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Orientation {
    Horizontal,
    Vertical,
}

/// Grid geometry and vocabularies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridShape {
    pub height: usize,
    pub width: usize,
    pub vocab: usize,
    pub vocab_text: usize,
}

impl GridShape {
    pub fn n(&self) -> usize {
        self.height * self.width
    }

    /// Number of distinct palette colours available.
    pub fn colors(&self) -> usize {
        self.vocab.min(MAX_COLORS)
    }

    /// Image token of palette colour `c`; colours are spread evenly over the vocabulary.
    pub fn color_token(&self, c: usize) -> u32 {
        (c * (self.vocab / self.colors())) as u32
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("grid extents must be positive".into()));
        }
        if self.vocab < 2 {
            return Err(Error::Config("image vocabulary needs at least 2 tokens".into()));
        }
        if self.vocab_text < TOK_COLOR as usize + self.colors() {
            return Err(Error::Config(format!(
                "text vocabulary {} too small; need at least {}",
                self.vocab_text,
                TOK_COLOR as usize + self.colors()
            )));
        }
        Ok(())
    }
}

/// Public generator parameters: exactly what a caption encodes.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionSpec {
    pub family: Family,
    pub orientation: Orientation,
    pub period: usize,
    /// Palette colour indices (distinct), 2–4 entries.
    pub palette: Vec<usize>,
    pub noise: f64,
}

impl CaptionSpec {
    pub fn to_tokens(&self) -> Vec<u32> {
        let mut out = vec![
            TOK_FAMILY + self.family.index(),
            TOK_ORIENT + matches!(self.orientation, Orientation::Vertical) as u32,
            TOK_PERIOD + PERIODS.iter().position(|&p| p == self.period).expect("valid period") as u32,
            TOK_NOISE + NOISE_LEVELS.iter().position(|&e| e == self.noise).expect("valid noise") as u32,
        ];
        out.extend(self.palette.iter().map(|&c| TOK_COLOR + c as u32));
        out
    }

    pub fn from_tokens(tokens: &[u32]) -> Result<Self> {
        let bad = |what: &str| Error::Config(format!("malformed caption {tokens:?}: {what}"));
        if tokens.len() < 6 {
            return Err(bad("too short"));
        }
        let family = tokens[0]
            .checked_sub(TOK_FAMILY)
            .and_then(|i| Family::ALL.get(i as usize).copied())
            .ok_or_else(|| Error::UnknownFamily(format!("token {}", tokens[0])))?;
        let orientation = match tokens[1] {
            t if t == TOK_ORIENT => Orientation::Horizontal,
            t if t == TOK_ORIENT + 1 => Orientation::Vertical,
            _ => return Err(bad("orientation")),
        };
        let period = tokens[2]
            .checked_sub(TOK_PERIOD)
            .and_then(|i| PERIODS.get(i as usize).copied())
            .ok_or_else(|| bad("period"))?;
        let noise = tokens[3]
            .checked_sub(TOK_NOISE)
            .and_then(|i| NOISE_LEVELS.get(i as usize).copied())
            .ok_or_else(|| bad("noise"))?;
        let palette: Vec<usize> = tokens[4..]
            .iter()
            .filter(|&&t| t != 0)
            .map(|&t| {
                t.checked_sub(TOK_COLOR)
                    .map(|c| c as usize)
                    .ok_or_else(|| bad("colour"))
            })
            .collect::<Result<_>>()?;
        if !(2..=4).contains(&palette.len()) {
            return Err(bad("palette size"));
        }
        Ok(CaptionSpec {
            family,
            orientation,
            period,
            palette,
            noise,
        })
    }

    fn check(&self, shape: &GridShape) -> Result<()> {
        if self.palette.iter().any(|&c| c >= shape.colors()) {
            return Err(Error::Config(format!(
                "palette {:?} exceeds {} colours",
                self.palette,
                shape.colors()
            )));
        }
        if !shape.height.is_multiple_of(self.period) || !shape.width.is_multiple_of(self.period) {
            return Err(Error::Config(format!(
                "period {} does not divide a {}x{} grid",
                self.period, shape.height, shape.width
            )));
        }
        if self.family == Family::Checker && self.period < 2 {
            return Err(Error::Config("checker needs period ≥ 2".into()));
        }
        Ok(())
    }

    /// Number of phase values (modes) for the phase-driven families.
    fn phases(&self) -> usize {
        match self.family {
            Family::Blocks => 1,
            _ => self.period,
        }
    }

    fn blocks(&self, shape: &GridShape) -> usize {
        (shape.height / self.period) * (shape.width / self.period)
    }
}

/// Hidden generator state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Provenance {
    pub phase: usize,
    pub block_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusRecord {
    pub caption: Vec<u32>,
    pub grid: Vec<u32>,
    pub provenance: Provenance,
}

/// Distribution over captions used to generate a corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub shape: GridShape,
    pub families: Vec<Family>,
    pub periods: Vec<usize>,
    pub noise_levels: Vec<f64>,
    pub palette_min: usize,
    pub palette_max: usize,
    /// Fix every latent so the caption alone determines the grid (and drop noise).
    pub latent_free: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            shape: GridShape {
                height: 8,
                width: 8,
                vocab: 512,
                vocab_text: 64,
            },
            families: Family::ALL.to_vec(),
            periods: vec![2, 4, 8],
            noise_levels: NOISE_LEVELS.to_vec(),
            palette_min: 2,
            palette_max: 4,
            latent_free: false,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        if self.families.is_empty() || self.periods.is_empty() || self.noise_levels.is_empty() {
            return Err(Error::Config(
                "families, periods and noise levels must be non-empty".into(),
            ));
        }
        if let Some(p) = self.periods.iter().find(|p| !PERIODS.contains(p)) {
            return Err(Error::Config(format!("period {p} not in {PERIODS:?}")));
        }
        if let Some(e) = self.noise_levels.iter().find(|e| !NOISE_LEVELS.contains(e)) {
            return Err(Error::Config(format!("noise level {e} not in {NOISE_LEVELS:?}")));
        }
        for &p in &self.periods {
            if !self.shape.height.is_multiple_of(p) || !self.shape.width.is_multiple_of(p) {
                return Err(Error::Config(format!("period {p} does not divide the grid")));
            }
        }
        if self.families.contains(&Family::Checker) && self.periods.contains(&1) {
            return Err(Error::Config("checker needs period ≥ 2".into()));
        }
        if self.palette_min < 2 || self.palette_max > 4 || self.palette_min > self.palette_max {
            return Err(Error::Config("palette size range must lie within 2..=4".into()));
        }
        if self.palette_max > self.shape.colors() {
            return Err(Error::Config("palette larger than the colour set".into()));
        }
        Ok(())
    }

    pub fn max_caption_len(&self) -> usize {
        4 + self.palette_max
    }

    pub fn sample_caption<R: Rng + ?Sized>(&self, rng: &mut R) -> CaptionSpec {
        let family = self.families[rng.random_range(0..self.families.len())];
        let orientation = if rng.random::<bool>() {
            Orientation::Vertical
        } else {
            Orientation::Horizontal
        };
        let period = self.periods[rng.random_range(0..self.periods.len())];
        let noise = if self.latent_free {
            0.0
        } else {
            self.noise_levels[rng.random_range(0..self.noise_levels.len())]
        };
        let m = rng.random_range(self.palette_min..=self.palette_max);
        let palette = index::sample(rng, self.shape.colors(), m).into_vec();
        CaptionSpec {
            family,
            orientation,
            period,
            palette,
            noise,
        }
    }

    /// Generates one record from a caller-supplied RNG.
    pub fn generate_record<R: Rng + ?Sized>(&self, rng: &mut R) -> CorpusRecord {
        let spec = self.sample_caption(rng);
        let caption = spec.to_tokens();
        let provenance = if self.latent_free {
            Provenance {
                phase: 0,
                block_seed: caption_hash(&caption),
            }
        } else {
            Provenance {
                phase: rng.random_range(0..spec.phases()),
                block_seed: rng.random(),
            }
        };
        let mut grid = render(&self.shape, &spec, provenance);
        apply_noise(&mut grid, spec.noise, self.shape.vocab, rng);
        CorpusRecord {
            caption,
            grid,
            provenance,
        }
    }

    /// Record `index` of the corpus for `master` seed; independent of every other record.
    pub fn record_at(&self, master: u64, index: u64) -> CorpusRecord {
        let mut rng = ChaCha8Rng::seed_from_u64(record_seed(master, index));
        self.generate_record(&mut rng)
    }

    /// Records `range` of the corpus, generated in parallel.
    pub fn generate_range(&self, master: u64, range: std::ops::Range<u64>) -> Vec<CorpusRecord> {
        range.into_par_iter().map(|i| self.record_at(master, i)).collect()
    }
}

/// SplitMix64 finalizer over (master, index).
pub fn record_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        ^ index
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn caption_hash(caption: &[u32]) -> u64 {
    caption
        .iter()
        .fold(0xcbf2_9ce4_8422_2325, |h, &t| record_seed(h, t as u64))
}

/// Clean grid for a caption and latent state.
pub fn render(shape: &GridShape, spec: &CaptionSpec, latent: Provenance) -> Vec<u32> {
    let (h, w) = (shape.height, shape.width);
    let p = spec.period;
    let m = spec.palette.len();
    let tok = |i: usize| shape.color_token(spec.palette[i]);
    let mut grid = vec![0u32; h * w];
    match spec.family {
        Family::Blocks => {
            let mut rng = ChaCha8Rng::seed_from_u64(latent.block_seed);
            let per_row = w / p;
            let colors: Vec<usize> = (0..spec.blocks(shape)).map(|_| rng.random_range(0..m)).collect();
            for r in 0..h {
                for c in 0..w {
                    grid[r * w + c] = tok(colors[(r / p) * per_row + c / p]);
                }
            }
        }
        _ => {
            for r in 0..h {
                for c in 0..w {
                    // `along` varies with the phase; `across` is the other axis.
                    let (along, across) = match spec.orientation {
                        Orientation::Vertical => (c, r),
                        Orientation::Horizontal => (r, c),
                    };
                    let extent = match spec.orientation {
                        Orientation::Vertical => w,
                        Orientation::Horizontal => h,
                    };
                    let color = match spec.family {
                        Family::Stripes => {
                            let u = (along + latent.phase) % p;
                            u * m / p
                        }
                        Family::Checker => {
                            let cell = p / 2;
                            (across / cell + (along + latent.phase) / cell) % 2
                        }
                        Family::TwoRegion => {
                            let boundary = latent.phase * extent / p;
                            usize::from(along >= boundary)
                        }
                        Family::Blocks => unreachable!(),
                    };
                    grid[r * w + c] = tok(color);
                }
            }
        }
    }
    grid
}

/// Replaces each token with probability `eps` by a uniform draw over `[0, vocab)`.
pub fn apply_noise<R: Rng + ?Sized>(grid: &mut [u32], eps: f64, vocab: usize, rng: &mut R) {
    if eps <= 0.0 {
        return;
    }
    for t in grid.iter_mut() {
        if rng.random::<f64>() < eps {
            *t = rng.random_range(0..vocab) as u32;
        }
    }
}

/// Entropy in nats of one noisy token given its clean value.
pub fn noise_entropy(eps: f64, vocab: usize) -> f64 {
    if eps <= 0.0 {
        return 0.0;
    }
    let v = vocab as f64;
    let p = 1.0 - eps + eps / v;
    let q = eps / v;
    -p * p.ln() - (v - 1.0) * q * q.ln()
}

fn ln_modes(shape: &GridShape, spec: &CaptionSpec) -> f64 {
    match spec.family {
        Family::Blocks => spec.blocks(shape) as f64 * (spec.palette.len() as f64).ln(),
        _ => (spec.period as f64).ln(),
    }
}

/// Conditional entropy of the whole grid given the caption, in nats: the mode
/// entropy plus independent noise on every token.
///
/// Mode identity is treated as recoverable from the noisy grid, which holds up to
/// a negligible term for these grid sizes.
pub fn sequence_entropy(shape: &GridShape, caption: &[u32]) -> Result<f64> {
    let spec = CaptionSpec::from_tokens(caption)?;
    spec.check(shape)?;
    Ok(ln_modes(shape, &spec) + shape.n() as f64 * noise_entropy(spec.noise, shape.vocab))
}

/// Per-position conditional entropy floor `H(Y|X) / n`.
pub fn entropy_floor(shape: &GridShape, caption: &[u32]) -> Result<f64> {
    Ok(sequence_entropy(shape, caption)? / shape.n() as f64)
}

/// Mean per-position entropy of the caption-conditional marginals: the best loss a
/// model that predicts every position independently can reach.
pub fn marginal_floor(shape: &GridShape, caption: &[u32]) -> Result<f64> {
    let spec = CaptionSpec::from_tokens(caption)?;
    spec.check(shape)?;
    let n = shape.n();
    let m = spec.palette.len();
    // counts[i][j]: weight of palette entry j at position i.
    let mut counts = vec![vec![0.0f64; m]; n];
    match spec.family {
        Family::Blocks => {
            for row in counts.iter_mut() {
                row.iter_mut().for_each(|c| *c = 1.0 / m as f64);
            }
        }
        _ => {
            let phases = spec.phases();
            for phase in 0..phases {
                let g = render(shape, &spec, Provenance { phase, block_seed: 0 });
                for (i, &t) in g.iter().enumerate() {
                    let j = spec.palette.iter().position(|&c| shape.color_token(c) == t).unwrap();
                    counts[i][j] += 1.0 / phases as f64;
                }
            }
        }
    }
    let v = shape.vocab as f64;
    let eps = spec.noise;
    let q = eps / v;
    let mut total = 0.0;
    for row in &counts {
        let mut h = 0.0;
        for &pi in row {
            let p = (1.0 - eps) * pi + q;
            if p > 0.0 {
                h -= p * p.ln();
            }
        }
        if q > 0.0 {
            h -= (v - m as f64) * q * q.ln();
        }
        total += h;
    }
    Ok(total / n as f64)
}

/// Enumerates clean modes for the phase-driven families; `None` for blocks,
/// whose modes are only checked structurally.
pub fn modes(shape: &GridShape, caption: &[u32]) -> Result<Option<Vec<Vec<u32>>>> {
    let spec = CaptionSpec::from_tokens(caption)?;
    spec.check(shape)?;
    if spec.family == Family::Blocks {
        return Ok(None);
    }
    Ok(Some(
        (0..spec.phases())
            .map(|phase| render(shape, &spec, Provenance { phase, block_seed: 0 }))
            .collect(),
    ))
}

/// Whether `grid` equals some clean mode of `caption`.
pub fn is_mode(shape: &GridShape, caption: &[u32], grid: &[u32]) -> Result<bool> {
    if grid.len() != shape.n() {
        return Err(Error::Length {
            got: grid.len(),
            expected: shape.n(),
        });
    }
    let spec = CaptionSpec::from_tokens(caption)?;
    spec.check(shape)?;
    if let Some(ms) = modes(shape, caption)? {
        return Ok(ms.iter().any(|m| m.as_slice() == grid));
    }
    let p = spec.period;
    let w = shape.width;
    let palette: Vec<u32> = spec.palette.iter().map(|&c| shape.color_token(c)).collect();
    for br in 0..shape.height / p {
        for bc in 0..w / p {
            let first = grid[br * p * w + bc * p];
            if !palette.contains(&first) {
                return Ok(false);
            }
            for r in br * p..(br + 1) * p {
                for c in bc * p..(bc + 1) * p {
                    if grid[r * w + c] != first {
                        return Ok(false);
                    }
                }
            }
        }
    }
    Ok(true)
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let mx = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + xs.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

/// Exact generator log-likelihood `ln p(grid | caption)`; `-inf` for grids the
/// generator cannot produce.
pub fn log_likelihood(shape: &GridShape, caption: &[u32], grid: &[u32]) -> Result<f64> {
    if grid.len() != shape.n() {
        return Err(Error::Length {
            got: grid.len(),
            expected: shape.n(),
        });
    }
    let spec = CaptionSpec::from_tokens(caption)?;
    spec.check(shape)?;
    let v = shape.vocab as f64;
    let eps = spec.noise;
    let hit = (1.0 - eps + eps / v).ln();
    let miss = if eps > 0.0 { (eps / v).ln() } else { f64::NEG_INFINITY };
    let token_ll = |observed: u32, clean: u32| if observed == clean { hit } else { miss };
    match spec.family {
        Family::Blocks => {
            let (p, w) = (spec.period, shape.width);
            let m = spec.palette.len() as f64;
            let mut total = 0.0;
            for br in 0..shape.height / p {
                for bc in 0..w / p {
                    let per_color: Vec<f64> = spec
                        .palette
                        .iter()
                        .map(|&c| {
                            let t = shape.color_token(c);
                            let mut s = -m.ln();
                            for r in br * p..(br + 1) * p {
                                for cc in bc * p..(bc + 1) * p {
                                    s += token_ll(grid[r * w + cc], t);
                                }
                            }
                            s
                        })
                        .collect();
                    total += log_sum_exp(&per_color);
                }
            }
            Ok(total)
        }
        _ => {
            let ms = modes(shape, caption)?.expect("phase family");
            let lp = -(ms.len() as f64).ln();
            let per_mode: Vec<f64> = ms
                .iter()
                .map(|m| lp + m.iter().zip(grid).map(|(&c, &o)| token_ll(o, c)).sum::<f64>())
                .collect();
            Ok(log_sum_exp(&per_mode))
        }
    }
}

fn join(ids: &[u32]) -> String {
    let mut s = String::with_capacity(ids.len() * 4);
    for (i, t) in ids.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        s.push_str(&t.to_string());
    }
    s
}

/// Corpus file header.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusHeader {
    pub shape: GridShape,
    pub seed: u64,
}

impl CorpusHeader {
    fn line(&self) -> String {
        format!(
            "{FORMAT_TAG} height={} width={} vocab={} vocab_text={} seed={}\n",
            self.shape.height, self.shape.width, self.shape.vocab, self.shape.vocab_text, self.seed
        )
    }
}

/// Writes `records` to `path` (one record per line after the header).
pub fn write_corpus(path: &Path, header: &CorpusHeader, records: &[CorpusRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        out.write_all(header.line().as_bytes())?;
        for r in records {
            writeln!(
                out,
                "caption={} grid={} provenance=phase:{};block_seed:{}",
                join(&r.caption),
                join(&r.grid),
                r.provenance.phase,
                r.provenance.block_seed
            )?;
        }
        out.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

/// Streaming corpus reader; validates every record against the header geometry.
pub struct CorpusReader {
    path: PathBuf,
    reader: BufReader<File>,
    header: CorpusHeader,
    line_no: usize,
    buf: String,
}

impl CorpusReader {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = BufReader::new(file);
        let mut first = String::new();
        reader.read_line(&mut first).map_err(|e| Error::io(path, e))?;
        let header = parse_header(path, &first)?;
        Ok(CorpusReader {
            path: path.to_path_buf(),
            reader,
            header,
            line_no: 1,
            buf: String::new(),
        })
    }

    pub fn header(&self) -> &CorpusHeader {
        &self.header
    }

    fn parse_error(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone(),
            line: self.line_no,
            message: message.into(),
        }
    }

    fn parse_record(&self, line: &str) -> Result<CorpusRecord> {
        let mut caption = None;
        let mut grid = None;
        let mut provenance = None;
        for field in line.split_ascii_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| self.parse_error(format!("field {field:?} lacks '='")))?;
            match key {
                "caption" => caption = Some(self.parse_ids(value)?),
                "grid" => grid = Some(self.parse_ids(value)?),
                "provenance" => provenance = Some(self.parse_provenance(value)?),
                other => return Err(self.parse_error(format!("unknown field {other:?}"))),
            }
        }
        let caption = caption.ok_or_else(|| self.parse_error("missing caption"))?;
        let grid = grid.ok_or_else(|| self.parse_error("missing grid"))?;
        let provenance = provenance.ok_or_else(|| self.parse_error("missing provenance"))?;
        let shape = self.header.shape;
        if grid.len() != shape.n() {
            return Err(self.parse_error(format!("grid has {} tokens, expected {}", grid.len(), shape.n())));
        }
        if let Some(t) = grid.iter().find(|&&t| t as usize >= shape.vocab) {
            return Err(self.parse_error(format!("grid token {t} outside vocabulary {}", shape.vocab)));
        }
        if let Some(t) = caption.iter().find(|&&t| t as usize >= shape.vocab_text) {
            return Err(self.parse_error(format!("caption token {t} outside vocabulary {}", shape.vocab_text)));
        }
        Ok(CorpusRecord {
            caption,
            grid,
            provenance,
        })
    }

    fn parse_ids(&self, value: &str) -> Result<Vec<u32>> {
        if value.is_empty() {
            return Ok(Vec::new());
        }
        value
            .split(',')
            .map(|s| {
                s.parse::<u32>()
                    .map_err(|_| self.parse_error(format!("bad token id {s:?}")))
            })
            .collect()
    }

    fn parse_provenance(&self, value: &str) -> Result<Provenance> {
        let mut p = Provenance::default();
        for kv in value.split(';') {
            let (k, v) = kv
                .split_once(':')
                .ok_or_else(|| self.parse_error(format!("bad provenance entry {kv:?}")))?;
            let bad = || self.parse_error(format!("bad provenance value {kv:?}"));
            match k {
                "phase" => p.phase = v.parse().map_err(|_| bad())?,
                "block_seed" => p.block_seed = v.parse().map_err(|_| bad())?,
                _ => return Err(self.parse_error(format!("unknown provenance key {k:?}"))),
            }
        }
        Ok(p)
    }
}

impl Iterator for CorpusReader {
    type Item = Result<CorpusRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        self.buf.clear();
        match self.reader.read_line(&mut self.buf) {
            Err(e) => Some(Err(Error::io(&self.path, e))),
            Ok(0) => None,
            Ok(_) => {
                self.line_no += 1;
                if !self.buf.ends_with('\n') {
                    return Some(Err(self.parse_error("truncated line (no trailing newline)")));
                }
                let line = self.buf.trim_end().to_string();
                Some(self.parse_record(&line))
            }
        }
    }
}

fn parse_header(path: &Path, line: &str) -> Result<CorpusHeader> {
    let err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message,
    };
    let rest = line
        .strip_prefix(FORMAT_TAG)
        .ok_or_else(|| err(format!("missing header tag {FORMAT_TAG:?}")))?;
    let mut fields = std::collections::HashMap::new();
    for kv in rest.split_ascii_whitespace() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| err(format!("bad header field {kv:?}")))?;
        let v: u64 = v.parse().map_err(|_| err(format!("bad header value {kv:?}")))?;
        fields.insert(k.to_string(), v);
    }
    let get = |k: &str| fields.get(k).copied().ok_or_else(|| err(format!("header lacks {k}")));
    let shape = GridShape {
        height: get("height")? as usize,
        width: get("width")? as usize,
        vocab: get("vocab")? as usize,
        vocab_text: get("vocab_text")? as usize,
    };
    shape.validate().map_err(|e| err(e.to_string()))?;
    Ok(CorpusHeader {
        shape,
        seed: get("seed")?,
    })
}

/// Reads a whole corpus file.
pub fn read_corpus(path: &Path) -> Result<(CorpusHeader, Vec<CorpusRecord>)> {
    let reader = CorpusReader::open(path)?;
    let header = reader.header().clone();
    let records = reader.collect::<Result<Vec<_>>>()?;
    Ok((header, records))
}
