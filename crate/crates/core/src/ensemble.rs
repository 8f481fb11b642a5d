//! Posterior fusion across models and frame-wise KL distillation.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::binio::*;
use crate::ctc::{ctc_loss, TargetSequence};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::grid::{Matrix, PosteriorGrid};
use crate::seqmodel::SequenceModel;

const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

/// Convex combination weights for a set of member models.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionSpec {
    pub member_model_ids: Vec<String>,
    pub weights: Vec<f64>,
}

impl FusionSpec {
    pub fn new(member_model_ids: Vec<String>, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != member_model_ids.len() {
            return Err(Error::BadWeights(format!(
                "{} weights for {} members",
                weights.len(),
                member_model_ids.len()
            )));
        }
        validate_weights(&weights)?;
        Ok(Self {
            member_model_ids,
            weights,
        })
    }

    /// Equal weights over the members.
    pub fn uniform(member_model_ids: Vec<String>) -> Result<Self> {
        let n = member_model_ids.len();
        Self::new(member_model_ids, uniform_weights(n))
    }
}

pub fn uniform_weights(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

pub fn validate_weights(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::BadWeights("no members".into()));
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(Error::BadWeights(format!("weight {w} is negative or non-finite")));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
        return Err(Error::BadWeights(format!("weights sum to {sum}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillationConfig {
    pub teacher: FusionSpec,
    /// 1.0 is pure distillation, 0.0 is plain CTC.
    pub kd_weight: f64,
}

impl DistillationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.kd_weight) {
            return Err(Error::OutOfRange {
                what: "kd_weight",
                value: self.kd_weight.to_string(),
                range: "[0, 1]".into(),
            });
        }
        Ok(())
    }
}

/// Entrywise weighted average of posterior grids.
pub fn fuse(grids: &[&PosteriorGrid], weights: &[f64]) -> Result<PosteriorGrid> {
    if grids.len() != weights.len() {
        return Err(Error::BadWeights(format!(
            "{} weights for {} grids",
            weights.len(),
            grids.len()
        )));
    }
    validate_weights(weights)?;
    let first = grids[0];
    let shape = first.as_matrix().shape();
    if let Some(g) = grids.iter().find(|g| g.as_matrix().shape() != shape) {
        return Err(Error::ShapeMismatch(format!(
            "grid {:?} vs {:?}",
            g.as_matrix().shape(),
            shape
        )));
    }
    let mut out = Matrix::zeros(shape.0, shape.1);
    for (g, &w) in grids.iter().zip(weights) {
        if w != 0.0 {
            out.add_scaled(g.as_matrix(), w)?;
        }
    }
    // weights may exceed 1 by up to the tolerance
    for v in out.as_mut_slice() {
        *v = v.min(1.0);
    }
    Ok(PosteriorGrid::from_matrix_unchecked(out))
}

/// `Σ_t KL(teacher_t ‖ student_t)` and its gradient with respect to the
/// student grid, `-teacher / student`. Entries where the teacher is zero
/// contribute nothing.
pub fn kd_frame_loss(teacher: &PosteriorGrid, student: &PosteriorGrid) -> Result<(f64, Matrix)> {
    if teacher.as_matrix().shape() != student.as_matrix().shape() {
        return Err(Error::ShapeMismatch(format!(
            "teacher {:?} vs student {:?}",
            teacher.as_matrix().shape(),
            student.as_matrix().shape()
        )));
    }
    let (frames, symbols) = teacher.as_matrix().shape();
    let mut grad = Matrix::zeros(frames, symbols);
    let mut loss = 0.0;
    for t in 0..frames {
        for s in 0..symbols {
            let p = teacher.get(t, s);
            if p == 0.0 {
                continue;
            }
            let q = student.get(t, s);
            loss += p * (p.ln() - q.ln());
            grad.set(t, s, -p / q);
        }
    }
    Ok((loss, grad))
}

/// `kd_weight · KD + (1 - kd_weight) · CTC`.
pub fn distill_loss(
    student: &PosteriorGrid,
    target: &TargetSequence,
    teacher: &PosteriorGrid,
    kd_weight: f64,
) -> Result<(f64, Matrix)> {
    if !(0.0..=1.0).contains(&kd_weight) {
        return Err(Error::OutOfRange {
            what: "kd_weight",
            value: kd_weight.to_string(),
            range: "[0, 1]".into(),
        });
    }
    if kd_weight == 1.0 {
        return kd_frame_loss(teacher, student);
    }
    if kd_weight == 0.0 {
        return ctc_loss(student, target);
    }
    let (kd, kd_grad) = kd_frame_loss(teacher, student)?;
    let (ctc, mut grad) = ctc_loss(student, target)?;
    grad.scale(1.0 - kd_weight);
    grad.add_scaled(&kd_grad, kd_weight)?;
    Ok((kd_weight * kd + (1.0 - kd_weight) * ctc, grad))
}

/// Fused posteriors of several models on one feature sequence.
pub fn fused_posteriors(models: &[&SequenceModel], weights: &[f64], features: &Matrix) -> Result<PosteriorGrid> {
    let grids = models
        .iter()
        .map(|m| m.posteriors(features))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&PosteriorGrid> = grids.iter().collect();
    fuse(&refs, weights)
}

/// Precomputed teacher posteriors keyed by utterance id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TeacherStore {
    grids: BTreeMap<String, PosteriorGrid>,
}

impl TeacherStore {
    pub fn from_entries(entries: impl IntoIterator<Item = (String, PosteriorGrid)>) -> Self {
        Self {
            grids: entries.into_iter().collect(),
        }
    }

    pub fn get(&self, id: &str) -> Option<&PosteriorGrid> {
        self.grids.get(id)
    }

    pub fn require(&self, id: &str) -> Result<&PosteriorGrid> {
        self.get(id).ok_or_else(|| Error::MissingCacheEntry(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &PosteriorGrid)> {
        self.grids.iter()
    }
}

/// Runs the (frozen) teacher models over a dataset and caches the fused
/// posteriors.
pub fn precompute_teachers(models: &[&SequenceModel], weights: &[f64], dataset: &Dataset) -> Result<TeacherStore> {
    validate_weights(weights)?;
    let expected = dataset.alphabet().num_outputs();
    for m in models {
        if m.config().output_dim != expected {
            return Err(Error::AlphabetMismatch(format!(
                "teacher has {} outputs, dataset alphabet needs {expected}",
                m.config().output_dim
            )));
        }
    }
    let entries = dataset
        .utterances()
        .par_iter()
        .map(|u| Ok((u.id.clone(), fused_posteriors(models, weights, &u.features)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(TeacherStore::from_entries(entries))
}

const TEACHER_MAGIC: &[u8; 4] = b"CTGT";
const TEACHER_VERSION: u32 = 1;

/// Teacher cache layout (little-endian):
///
/// ```text
/// "CTGT" u32:version u64:count
/// per entry: u32:id_len id_bytes u32:frames u32:num_symbols frames·num_symbols × f64
/// ```
pub fn write_teacher_cache<W: Write>(w: &mut W, store: &TeacherStore) -> std::io::Result<()> {
    w.write_all(TEACHER_MAGIC)?;
    write_u32(w, TEACHER_VERSION)?;
    write_u64(w, store.len() as u64)?;
    for (id, grid) in store.iter() {
        write_str(w, id)?;
        write_u32(w, grid.num_frames() as u32)?;
        write_u32(w, grid.num_symbols() as u32)?;
        write_f64s(w, grid.as_matrix().as_slice())?;
    }
    Ok(())
}

pub fn read_teacher_cache<R: Read>(r: &mut R, path: &Path) -> Result<TeacherStore> {
    let bad = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    if !expect_magic(r, TEACHER_MAGIC)? {
        return Err(bad("missing CTGT magic".into()));
    }
    let version = read_u32(r)?;
    if version != TEACHER_VERSION {
        return Err(bad(format!("unsupported teacher cache version {version}")));
    }
    let count = read_u64(r)?;
    let mut grids = BTreeMap::new();
    for _ in 0..count {
        let id = read_str(r)?;
        let frames = read_u32(r)? as usize;
        let symbols = read_u32(r)? as usize;
        let values = read_f64s(r, frames * symbols)?;
        let grid = PosteriorGrid::new(Matrix::from_vec(frames, symbols, values)?)
            .map_err(|e| bad(format!("utterance {id}: {e}")))?;
        grids.insert(id, grid);
    }
    Ok(TeacherStore { grids })
}

pub fn save_teacher_cache(store: &TeacherStore, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_teacher_cache(&mut w, store)?;
    w.flush()?;
    Ok(())
}

pub fn load_teacher_cache(path: &Path) -> Result<TeacherStore> {
    read_teacher_cache(&mut BufReader::new(File::open(path)?), path)
}
