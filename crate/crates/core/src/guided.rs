//! Guided CTC training: spike masks from a frozen guiding model and the
//! guide loss that pulls a model's spikes onto the guiding model's frames.
//!
//! For each frame the mask holds a one at the guiding model's top symbol,
//! or nothing when blank wins. The linear guide loss is the negated sum of
//! the trained model's posteriors at the masked entries; the logarithmic
//! variant is the frame-level cross-entropy against the same targets.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::binio::*;
use crate::ctc::{ctc_loss, TargetSequence};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::grid::{Matrix, PosteriorGrid};
use crate::seqmodel::SequenceModel;

/// Binary `T × (V+1)` mask stored as the selected symbol per frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpikeMask {
    num_symbols: usize,
    frames: Vec<Option<usize>>,
}

impl SpikeMask {
    /// Mask from per-frame selections. Selecting blank (the last symbol) or
    /// an out-of-range index is rejected.
    pub fn from_selections(num_symbols: usize, frames: Vec<Option<usize>>) -> Result<Self> {
        if let Some(bad) = frames.iter().flatten().find(|&&s| s + 1 >= num_symbols) {
            return Err(Error::ShapeMismatch(format!(
                "mask selects symbol {bad} with {num_symbols} outputs (blank is {})",
                num_symbols - 1
            )));
        }
        Ok(Self {
            num_symbols,
            frames,
        })
    }

    pub fn empty(num_frames: usize, num_symbols: usize) -> Self {
        Self {
            num_symbols,
            frames: vec![None; num_frames],
        }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn num_symbols(&self) -> usize {
        self.num_symbols
    }

    pub fn selected(&self, t: usize) -> Option<usize> {
        self.frames[t]
    }

    pub fn selections(&self) -> &[Option<usize>] {
        &self.frames
    }

    pub fn get(&self, t: usize, s: usize) -> bool {
        self.frames[t] == Some(s)
    }

    pub fn count_ones(&self) -> usize {
        self.frames.iter().flatten().count()
    }

    /// Dense 0/1 matrix.
    pub fn to_matrix(&self) -> Matrix {
        let mut m = Matrix::zeros(self.frames.len(), self.num_symbols);
        for (t, s) in self.frames.iter().enumerate() {
            if let Some(s) = s {
                m.set(t, *s, 1.0);
            }
        }
        m
    }

    /// Maximal runs of consecutive frames selecting the same symbol, as
    /// `(start_frame, length, symbol)`.
    pub fn runs(&self) -> Vec<(usize, usize, usize)> {
        let mut runs: Vec<(usize, usize, usize)> = Vec::new();
        for (t, s) in self.frames.iter().enumerate() {
            let Some(s) = *s else { continue };
            match runs.last_mut() {
                Some((start, len, sym)) if *sym == s && *start + *len == t => *len += 1,
                _ => runs.push((t, 1, s)),
            }
        }
        runs
    }

    fn check_shape(&self, grid: &PosteriorGrid) -> Result<()> {
        if grid.num_frames() != self.num_frames() || grid.num_symbols() != self.num_symbols {
            return Err(Error::ShapeMismatch(format!(
                "mask {}x{} vs grid {}x{}",
                self.num_frames(),
                self.num_symbols,
                grid.num_frames(),
                grid.num_symbols()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GuideVariant {
    /// `-Σ M ⊙ P`.
    #[default]
    Linear,
    /// `-Σ_t log P[t][selected(t)]` over masked frames.
    Logarithmic,
}

impl fmt::Display for GuideVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GuideVariant::Linear => "linear",
            GuideVariant::Logarithmic => "log",
        })
    }
}

impl FromStr for GuideVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(GuideVariant::Linear),
            "log" | "logarithmic" => Ok(GuideVariant::Logarithmic),
            other => Err(Error::InvalidJob(format!("unknown guide variant {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuidedLossConfig {
    pub guide_weight: f64,
    pub variant: GuideVariant,
}

impl Default for GuidedLossConfig {
    fn default() -> Self {
        Self {
            guide_weight: 1.0,
            variant: GuideVariant::Linear,
        }
    }
}

impl GuidedLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.guide_weight.is_finite() || self.guide_weight < 0.0 {
            return Err(Error::InvalidJob(format!(
                "guide_weight must be finite and non-negative, got {}",
                self.guide_weight
            )));
        }
        Ok(())
    }
}

/// One-hot at each frame's top non-blank symbol, or an empty row when blank
/// is at least as probable. Ties among non-blanks go to the lowest index.
pub fn build_mask(guiding: &PosteriorGrid) -> SpikeMask {
    let blank = guiding.blank_id();
    let frames = (0..guiding.num_frames())
        .map(|t| {
            let row = guiding.row(t);
            let best = crate::grid::argmax(&row[..blank]);
            (blank > 0 && row[best] > row[blank]).then_some(best)
        })
        .collect();
    SpikeMask {
        num_symbols: guiding.num_symbols(),
        frames,
    }
}

/// Guide loss and its gradient with respect to the grid entries.
pub fn guide_loss(
    grid: &PosteriorGrid,
    mask: &SpikeMask,
    variant: GuideVariant,
) -> Result<(f64, Matrix)> {
    mask.check_shape(grid)?;
    let mut grad = Matrix::zeros(grid.num_frames(), grid.num_symbols());
    let mut loss = 0.0;
    for (t, s) in mask.frames.iter().enumerate() {
        let Some(s) = *s else { continue };
        let p = grid.get(t, s);
        match variant {
            GuideVariant::Linear => {
                loss -= p;
                grad.set(t, s, -1.0);
            }
            GuideVariant::Logarithmic => {
                loss -= p.ln();
                grad.set(t, s, -1.0 / p);
            }
        }
    }
    Ok((loss, grad))
}

/// `ctc_loss + guide_weight · guide_loss` with matching gradient.
pub fn guided_ctc_loss(
    grid: &PosteriorGrid,
    target: &TargetSequence,
    mask: &SpikeMask,
    cfg: &GuidedLossConfig,
) -> Result<(f64, Matrix)> {
    cfg.validate()?;
    mask.check_shape(grid)?;
    let (ctc, mut grad) = ctc_loss(grid, target)?;
    if cfg.guide_weight == 0.0 {
        return Ok((ctc, grad));
    }
    let (guide, guide_grad) = guide_loss(grid, mask, cfg.variant)?;
    grad.add_scaled(&guide_grad, cfg.guide_weight)?;
    Ok((ctc + cfg.guide_weight * guide, grad))
}

/// Masks keyed by utterance id. Built once, then read-only.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MaskStore {
    masks: BTreeMap<String, SpikeMask>,
}

impl MaskStore {
    pub fn from_entries(entries: impl IntoIterator<Item = (String, SpikeMask)>) -> Self {
        Self {
            masks: entries.into_iter().collect(),
        }
    }

    pub fn get(&self, id: &str) -> Option<&SpikeMask> {
        self.masks.get(id)
    }

    pub fn require(&self, id: &str) -> Result<&SpikeMask> {
        self.get(id).ok_or_else(|| Error::MissingCacheEntry(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &SpikeMask)> {
        self.masks.iter()
    }
}

/// Runs the frozen guiding model over every utterance and caches its mask.
pub fn precompute_masks(guiding: &SequenceModel, dataset: &Dataset) -> Result<MaskStore> {
    let expected = dataset.alphabet().num_outputs();
    if guiding.config().output_dim != expected {
        return Err(Error::AlphabetMismatch(format!(
            "guiding model has {} outputs, dataset alphabet needs {expected}",
            guiding.config().output_dim
        )));
    }
    let entries = dataset
        .utterances()
        .par_iter()
        .map(|u| Ok((u.id.clone(), build_mask(&guiding.posteriors(&u.features)?))))
        .collect::<Result<Vec<_>>>()?;
    Ok(MaskStore::from_entries(entries))
}

const MASK_MAGIC: &[u8; 4] = b"CTGM";
const MASK_VERSION: u32 = 1;

/// Mask cache layout (little-endian):
///
/// ```text
/// "CTGM" u32:version u64:count
/// per entry: u32:id_len id_bytes u32:frames u32:num_symbols u32:runs
///            runs × (u32:start u32:length u32:symbol)
/// ```
pub fn write_mask_cache<W: Write>(w: &mut W, store: &MaskStore) -> std::io::Result<()> {
    w.write_all(MASK_MAGIC)?;
    write_u32(w, MASK_VERSION)?;
    write_u64(w, store.len() as u64)?;
    for (id, mask) in store.iter() {
        write_str(w, id)?;
        write_u32(w, mask.num_frames() as u32)?;
        write_u32(w, mask.num_symbols() as u32)?;
        let runs = mask.runs();
        write_u32(w, runs.len() as u32)?;
        for (start, len, sym) in runs {
            write_u32(w, start as u32)?;
            write_u32(w, len as u32)?;
            write_u32(w, sym as u32)?;
        }
    }
    Ok(())
}

pub fn read_mask_cache<R: Read>(r: &mut R, path: &Path) -> Result<MaskStore> {
    let bad = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    if !expect_magic(r, MASK_MAGIC)? {
        return Err(bad("missing CTGM magic".into()));
    }
    let version = read_u32(r)?;
    if version != MASK_VERSION {
        return Err(bad(format!("unsupported mask cache version {version}")));
    }
    let count = read_u64(r)?;
    let mut masks = BTreeMap::new();
    for _ in 0..count {
        let id = read_str(r)?;
        let frames = read_u32(r)? as usize;
        let num_symbols = read_u32(r)? as usize;
        let runs = read_u32(r)?;
        let mut selections = vec![None; frames];
        for _ in 0..runs {
            let start = read_u32(r)? as usize;
            let len = read_u32(r)? as usize;
            let sym = read_u32(r)? as usize;
            if start + len > frames {
                return Err(bad(format!("run past end of utterance {id}")));
            }
            selections[start..start + len].iter_mut().for_each(|s| *s = Some(sym));
        }
        let mask = SpikeMask::from_selections(num_symbols, selections)
            .map_err(|e| bad(format!("utterance {id}: {e}")))?;
        masks.insert(id, mask);
    }
    Ok(MaskStore { masks })
}

pub fn save_mask_cache(store: &MaskStore, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_mask_cache(&mut w, store)?;
    w.flush()?;
    Ok(())
}

pub fn load_mask_cache(path: &Path) -> Result<MaskStore> {
    read_mask_cache(&mut BufReader::new(File::open(path)?), path)
}

/// CSV with columns `utterance_id,frame,symbol`, one row per mask one.
pub fn write_mask_csv<W: Write>(
    w: &mut W,
    store: &MaskStore,
    alphabet: &crate::alphabet::AlphabetSpec,
) -> std::io::Result<()> {
    writeln!(w, "utterance_id,frame,symbol")?;
    for (id, mask) in store.iter() {
        for (t, s) in mask.selections().iter().enumerate() {
            if let Some(s) = s {
                writeln!(w, "{id},{t},{}", alphabet.name(*s))?;
            }
        }
    }
    Ok(())
}
