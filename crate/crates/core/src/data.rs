//! Datasets, the dataset file format and the synthetic sequence task.
//!
//! Dataset files start with a short text header followed by one record per
//! utterance. Each record is a text line and a raw block of features:
//!
//! ```text
//! CTCG-DATASET 1
//! alphabet <V> <sym_0> … <sym_V-1>
//! input_dim <D>
//! count <N>
//! utt <id> <T> <L> <label_1> … <label_L>
//! <T·D little-endian f64>
//! ```
//!
//! The feature block is followed by a single `\n`.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::alphabet::AlphabetSpec;
use crate::ctc::TargetSequence;
use crate::error::{Error, Result};
use crate::grid::Matrix;

const HEADER: &str = "CTCG-DATASET 1";

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `T × input_dim`.
    pub features: Matrix,
    pub target: TargetSequence,
}

impl Utterance {
    pub fn num_frames(&self) -> usize {
        self.features.rows()
    }
}

/// Immutable collection of utterances sharing an alphabet and feature width.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    alphabet: AlphabetSpec,
    input_dim: usize,
    utterances: Vec<Utterance>,
}

impl Dataset {
    pub fn new(alphabet: AlphabetSpec, input_dim: usize, utterances: Vec<Utterance>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(utterances.len());
        for u in &utterances {
            if u.id.is_empty() || u.id.chars().any(char::is_whitespace) {
                return Err(Error::InvalidSpec(format!("bad utterance id {:?}", u.id)));
            }
            if !seen.insert(u.id.as_str()) {
                return Err(Error::InvalidSpec(format!("duplicate utterance id {}", u.id)));
            }
            if u.features.cols() != input_dim {
                return Err(Error::DimensionMismatch {
                    expected: input_dim,
                    found: u.features.cols(),
                });
            }
            if u.num_frames() == 0 {
                return Err(Error::InvalidSpec(format!("utterance {} has no frames", u.id)));
            }
            if !u.features.is_finite() {
                return Err(Error::InvalidSpec(format!("utterance {} has non-finite features", u.id)));
            }
            u.target.validate(alphabet.blank_id())?;
            if u.target.min_frames() > u.num_frames() {
                return Err(Error::Infeasible {
                    target_len: u.target.len(),
                    min_frames: u.target.min_frames(),
                    frames: u.num_frames(),
                });
            }
        }
        Ok(Self {
            alphabet,
            input_dim,
            utterances,
        })
    }

    pub fn alphabet(&self) -> &AlphabetSpec {
        &self.alphabet
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Utterance> {
        self.utterances.iter().find(|u| u.id == id)
    }

    pub fn targets(&self) -> Vec<TargetSequence> {
        self.utterances.iter().map(|u| u.target.clone()).collect()
    }

    /// Replaces the alphabet (e.g. to attach an ignore set) keeping symbols.
    pub fn with_alphabet(mut self, alphabet: AlphabetSpec) -> Result<Self> {
        if alphabet.symbols() != self.alphabet.symbols() {
            return Err(Error::AlphabetMismatch(
                "replacement alphabet has different symbols".into(),
            ));
        }
        self.alphabet = alphabet;
        Ok(self)
    }

    /// Splits by hashing utterance ids: an utterance goes to the held-out
    /// part when `fnv1a(id) % 100 < heldout_percent`. Returns
    /// `(train, heldout)`.
    pub fn split_by_hash(&self, heldout_percent: u64) -> (Dataset, Dataset) {
        let (heldout, train): (Vec<_>, Vec<_>) = self
            .utterances
            .iter()
            .cloned()
            .partition(|u| fnv1a(u.id.as_bytes()) % 100 < heldout_percent);
        let make = |utterances| Dataset {
            alphabet: self.alphabet.clone(),
            input_dim: self.input_dim,
            utterances,
        };
        (make(train), make(heldout))
    }

    /// Frame stacking and skipping: every `rate`-th frame is kept and
    /// concatenated with the following `rate - 1` frames (zero-padded at the
    /// end). Fails if a target no longer fits its shortened utterance.
    pub fn stack_and_skip(&self, rate: usize) -> Result<Dataset> {
        if rate == 0 {
            return Err(Error::InvalidSpec("stacking rate must be positive".into()));
        }
        let dim = self.input_dim;
        let utterances = self
            .utterances
            .iter()
            .map(|u| {
                let frames = u.num_frames().div_ceil(rate);
                let mut out = Matrix::zeros(frames, dim * rate);
                for t in 0..frames {
                    for k in 0..rate {
                        if let Some(src) = (t * rate + k < u.num_frames()).then(|| u.features.row(t * rate + k)) {
                            out.row_mut(t)[k * dim..(k + 1) * dim].copy_from_slice(src);
                        }
                    }
                }
                Utterance {
                    id: u.id.clone(),
                    features: out,
                    target: u.target.clone(),
                }
            })
            .collect();
        Dataset::new(self.alphabet.clone(), dim * rate, utterances)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(HEADER.as_bytes());
        out.push(b'\n');
        let mut alphabet_line = format!("alphabet {}", self.alphabet.len());
        for s in self.alphabet.symbols() {
            alphabet_line.push(' ');
            alphabet_line.push_str(s);
        }
        out.extend_from_slice(alphabet_line.as_bytes());
        out.extend_from_slice(format!("\ninput_dim {}\ncount {}\n", self.input_dim, self.len()).as_bytes());
        for u in &self.utterances {
            let mut line = format!("utt {} {} {}", u.id, u.num_frames(), u.target.len());
            for &l in u.target.labels() {
                line.push(' ');
                line.push_str(self.alphabet.name(l));
            }
            line.push('\n');
            out.extend_from_slice(line.as_bytes());
            for v in u.features.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.push(b'\n');
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor {
            bytes,
            pos: 0,
            line: 1,
        };
        let header = cur.line_str()?;
        if header != HEADER {
            return Err(cur.error_at_line_start(format!("missing header {HEADER:?}")));
        }

        let alphabet_line = cur.line_str()?;
        let mut parts = alphabet_line.split(' ');
        cur.keyword(parts.next(), "alphabet")?;
        let v: usize = cur.number(parts.next(), "alphabet size")?;
        let symbols: Vec<&str> = parts.collect();
        if symbols.len() != v {
            return Err(cur.error_at_line_start(format!("alphabet declares {v} symbols, lists {}", symbols.len())));
        }
        let alphabet = AlphabetSpec::new(symbols.iter().copied())
            .map_err(|e| cur.error_at_line_start(e.to_string()))?;

        let line = cur.line_str()?;
        let mut parts = line.split(' ');
        cur.keyword(parts.next(), "input_dim")?;
        let input_dim: usize = cur.number(parts.next(), "input_dim")?;

        let line = cur.line_str()?;
        let mut parts = line.split(' ');
        cur.keyword(parts.next(), "count")?;
        let count: usize = cur.number(parts.next(), "count")?;

        let mut utterances = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let line = cur.line_str()?;
            let mut parts = line.split(' ');
            cur.keyword(parts.next(), "utt")?;
            let id = parts
                .next()
                .filter(|s| !s.is_empty())
                .ok_or_else(|| cur.error_at_line_start("missing utterance id".into()))?
                .to_string();
            let frames: usize = cur.number(parts.next(), "frame count")?;
            let len: usize = cur.number(parts.next(), "target length")?;
            let labels = parts
                .map(|s| {
                    alphabet
                        .lookup(s)
                        .map_err(|_| cur.error_at_line_start(format!("unknown target symbol {s:?} in utterance {id}")))
                })
                .collect::<Result<Vec<_>>>()?;
            if labels.len() != len {
                return Err(cur.error_at_line_start(format!("utterance {id} declares {len} labels, lists {}", labels.len())));
            }
            let block = frames * input_dim * 8;
            let data = cur.take(block)?;
            let values: Vec<f64> = data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            cur.expect_newline()?;
            utterances.push(Utterance {
                id,
                features: Matrix::from_vec(frames, input_dim, values)?,
                target: TargetSequence::new(labels),
            });
        }
        if cur.pos != bytes.len() {
            return Err(cur.error(format!("{} trailing bytes", bytes.len() - cur.pos)));
        }
        Dataset::new(alphabet, input_dim, utterances).map_err(|e| match e {
            Error::Parse { .. } => e,
            other => Error::Parse {
                line: cur.line,
                offset: cur.pos,
                msg: other.to_string(),
            },
        })
    }
}

/// Byte cursor tracking line numbers for parse errors.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    line: usize,
}

impl<'a> Cursor<'a> {
    fn error(&self, msg: String) -> Error {
        Error::Parse {
            line: self.line,
            offset: self.pos,
            msg,
        }
    }

    /// Error pointing at the line just consumed.
    fn error_at_line_start(&self, msg: String) -> Error {
        Error::Parse {
            line: self.line - 1,
            offset: self.last_line_start(),
            msg,
        }
    }

    fn last_line_start(&self) -> usize {
        let end = self.pos.saturating_sub(1);
        self.bytes[..end].iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1)
    }

    fn line_str(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let Some(end) = rest.iter().position(|&b| b == b'\n') else {
            return Err(self.error(if self.pos == 0 && rest.is_empty() {
                "empty file: missing header".into()
            } else {
                "unexpected end of file".into()
            }));
        };
        let s = std::str::from_utf8(&rest[..end]).map_err(|_| self.error("invalid UTF-8".into()))?;
        self.pos += end + 1;
        self.line += 1;
        Ok(s)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(format!("feature block truncated: need {n} bytes")));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn expect_newline(&mut self) -> Result<()> {
        if self.bytes.get(self.pos) != Some(&b'\n') {
            return Err(self.error("expected newline after feature block".into()));
        }
        self.pos += 1;
        self.line += 1;
        Ok(())
    }

    fn keyword(&self, got: Option<&str>, expected: &str) -> Result<()> {
        if got != Some(expected) {
            return Err(self.error_at_line_start(format!("expected {expected:?}, found {got:?}")));
        }
        Ok(())
    }

    fn number(&self, got: Option<&str>, what: &str) -> Result<usize> {
        got.and_then(|s| s.parse().ok())
            .ok_or_else(|| self.error_at_line_start(format!("bad {what}: {got:?}")))
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Parameters of the synthetic labelling task: each symbol has a fixed
/// prototype vector; an utterance is a random symbol sequence where each
/// symbol is held for a random number of frames, plus Gaussian noise.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTaskSpec {
    pub alphabet_size: usize,
    pub input_dim: usize,
    pub min_symbols: usize,
    pub max_symbols: usize,
    pub min_segment: usize,
    pub max_segment: usize,
    pub noise_stddev: f64,
    /// Euclidean norm of every prototype vector.
    pub prototype_scale: f64,
    /// Permit the same symbol in consecutive positions. Requires
    /// `min_segment >= 2` so every target stays feasible.
    pub allow_repeats: bool,
    pub seed: u64,
}

impl SyntheticTaskSpec {
    /// The reference task: 6 symbols, 8-dimensional features, 3–8 symbols
    /// per utterance, 2–6 frames per symbol, noise 0.3, prototype norm 0.4.
    pub fn reference(seed: u64) -> Self {
        Self {
            alphabet_size: 6,
            input_dim: 8,
            min_symbols: 3,
            max_symbols: 8,
            min_segment: 2,
            max_segment: 6,
            noise_stddev: 0.3,
            prototype_scale: REFERENCE_PROTOTYPE_SCALE,
            allow_repeats: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.alphabet_size == 0 || self.input_dim == 0 {
            return fail("alphabet_size and input_dim must be positive");
        }
        if self.min_symbols > self.max_symbols {
            return fail("min_symbols exceeds max_symbols");
        }
        if self.min_segment == 0 || self.min_segment > self.max_segment {
            return fail("segment range must satisfy 1 <= min <= max");
        }
        if !(self.noise_stddev >= 0.0 && self.noise_stddev.is_finite()) {
            return fail("noise_stddev must be finite and non-negative");
        }
        if !(self.prototype_scale >= 0.0 && self.prototype_scale.is_finite()) {
            return fail("prototype_scale must be finite and non-negative");
        }
        if self.max_symbols > 1 && !self.allow_repeats && self.alphabet_size < 2 {
            return fail("a single symbol cannot form multi-symbol targets without repeats");
        }
        if self.allow_repeats && self.min_segment < 2 {
            return fail("repeats need min_segment >= 2");
        }
        Ok(())
    }
}

/// Prototype scale used by [`SyntheticTaskSpec::reference`].
pub const REFERENCE_PROTOTYPE_SCALE: f64 = 0.4;

/// Synthetic task with its prototypes drawn.
#[derive(Clone, Debug)]
pub struct SyntheticTask {
    spec: SyntheticTaskSpec,
    alphabet: AlphabetSpec,
    prototypes: Matrix,
}

impl SyntheticTask {
    pub fn new(spec: SyntheticTaskSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let prototypes = draw_prototypes(&mut rng, spec.alphabet_size, spec.input_dim, spec.prototype_scale);
        Ok(Self {
            alphabet: AlphabetSpec::numbered(spec.alphabet_size),
            spec,
            prototypes,
        })
    }

    pub fn alphabet(&self) -> &AlphabetSpec {
        &self.alphabet
    }

    pub fn prototypes(&self) -> &Matrix {
        &self.prototypes
    }

    /// Draws `count` utterances from an independent random stream. Ids are
    /// `<prefix>-<index>` with five-digit zero padding.
    pub fn generate(&self, count: usize, stream: u64, prefix: &str) -> Result<Dataset> {
        let spec = &self.spec;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream + 1);
        let noise = Normal::new(0.0, spec.noise_stddev).map_err(|e| Error::InvalidSpec(e.to_string()))?;
        let mut utterances = Vec::with_capacity(count);
        for n in 0..count {
            let len = rng.random_range(spec.min_symbols..=spec.max_symbols);
            let mut labels: Vec<usize> = Vec::with_capacity(len);
            for _ in 0..len {
                let s = match labels.last() {
                    Some(&prev) if !spec.allow_repeats => {
                        // uniform over the other symbols
                        let s = rng.random_range(0..spec.alphabet_size - 1);
                        if s >= prev { s + 1 } else { s }
                    }
                    _ => rng.random_range(0..spec.alphabet_size),
                };
                labels.push(s);
            }
            let durations: Vec<usize> = labels
                .iter()
                .map(|_| rng.random_range(spec.min_segment..=spec.max_segment))
                .collect();
            let frames: usize = durations.iter().sum::<usize>().max(1);
            let mut features = Matrix::zeros(frames, spec.input_dim);
            let mut t = 0;
            for (&s, &d) in labels.iter().zip(&durations) {
                for _ in 0..d {
                    features.row_mut(t).copy_from_slice(self.prototypes.row(s));
                    t += 1;
                }
            }
            if spec.noise_stddev > 0.0 {
                for v in features.as_mut_slice() {
                    *v += noise.sample(&mut rng);
                }
            }
            utterances.push(Utterance {
                id: format!("{prefix}-{n:05}"),
                features,
                target: TargetSequence::new(labels),
            });
        }
        Dataset::new(self.alphabet.clone(), spec.input_dim, utterances)
    }
}

/// Random directions scaled to norm `scale`. Directions are mutually
/// orthogonal while `rows <= cols`, so every pair of symbols is equally
/// separable.
fn draw_prototypes(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let mut units: Vec<Vec<f64>> = Vec::with_capacity(rows);
    while units.len() < rows {
        let mut v: Vec<f64> = (0..cols).map(|_| rng.sample(StandardNormal)).collect();
        if units.len() < cols {
            for u in &units {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            units.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    let data = units.concat().into_iter().map(|a| a * scale).collect();
    Matrix::from_vec(rows, cols, data).expect("prototype shape")
}

/// `count` utterances named `utt-00000`, `utt-00001`, ...
pub fn generate_synthetic(spec: &SyntheticTaskSpec, count: usize) -> Result<Dataset> {
    SyntheticTask::new(spec.clone())?.generate(count, 0, "utt")
}

/// Train and held-out sets sharing prototypes but drawn from separate
/// streams (`train-…` and `heldout-…` ids).
pub fn generate_split(spec: &SyntheticTaskSpec, train: usize, heldout: usize) -> Result<(Dataset, Dataset)> {
    let task = SyntheticTask::new(spec.clone())?;
    Ok((task.generate(train, 1, "train")?, task.generate(heldout, 2, "heldout")?))
}
