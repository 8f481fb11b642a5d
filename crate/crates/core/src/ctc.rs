//! CTC alignment machinery.
//!
//! A target `y` of length `L` is expanded to every length-`T` frame
//! sequence that collapses back to `y` (merge repeats, then drop blanks).
//! The loss is the negative log of the total probability of that set,
//! computed exactly with a log-space forward-backward pass over the
//! blank-augmented label sequence `φ y1 φ y2 … φ yL φ`.

use crate::error::{Error, Result};
use crate::grid::{argmax, Matrix, PosteriorGrid};

/// Target label sequence; indices into the alphabet, blank excluded.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TargetSequence(Vec<usize>);

impl TargetSequence {
    pub fn new(labels: Vec<usize>) -> Self {
        Self(labels)
    }

    pub fn labels(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Fewest frames any alignment of this target can have: one per label
    /// plus a separating blank between equal neighbours.
    pub fn min_frames(&self) -> usize {
        self.0.len() + self.0.windows(2).filter(|w| w[0] == w[1]).count()
    }

    /// Checks that no label is blank or beyond it.
    pub fn validate(&self, blank_id: usize) -> Result<()> {
        match self.0.iter().find(|&&l| l >= blank_id) {
            Some(&bad) => Err(Error::InvalidTarget(bad)),
            None => Ok(()),
        }
    }

    fn check_feasible(&self, frames: usize) -> Result<()> {
        let min_frames = self.min_frames();
        if frames < min_frames {
            return Err(Error::Infeasible {
                target_len: self.len(),
                min_frames,
                frames,
            });
        }
        Ok(())
    }
}

impl From<Vec<usize>> for TargetSequence {
    fn from(v: Vec<usize>) -> Self {
        Self(v)
    }
}

/// Frame-level path; blank allowed.
pub type Alignment = Vec<usize>;

/// Merges consecutive repeats, then removes blanks.
pub fn collapse(frames: &[usize], blank_id: usize) -> TargetSequence {
    let mut out = Vec::new();
    let mut prev = None;
    for &s in frames {
        if Some(s) != prev && s != blank_id {
            out.push(s);
        }
        prev = Some(s);
    }
    TargetSequence(out)
}

/// Enumerates every length-`frames` alignment that collapses to `target`.
/// Exponential in `frames`; meant for oracles on tiny instances.
pub fn expand_alignments(
    target: &TargetSequence,
    frames: usize,
    blank_id: usize,
) -> Result<Vec<Alignment>> {
    target.validate(blank_id)?;
    target.check_feasible(frames)?;
    let mut out = Vec::new();
    let mut path = Vec::with_capacity(frames);
    extend_paths(target.labels(), frames, blank_id, 0, blank_id, &mut path, &mut out);
    Ok(out)
}

fn extend_paths(
    y: &[usize],
    frames: usize,
    blank: usize,
    consumed: usize,
    last: usize,
    path: &mut Vec<usize>,
    out: &mut Vec<Alignment>,
) {
    if path.len() == frames {
        if consumed == y.len() {
            out.push(path.clone());
        }
        return;
    }
    let remaining = frames - path.len();
    let rest = TargetSequence(y[consumed..].to_vec());
    // a pending label equal to `last` still needs a separating frame
    let needed = rest.min_frames() + usize::from(y.get(consumed) == Some(&last));
    if remaining < needed {
        return;
    }
    let mut step = |sym: usize, consumed: usize, path: &mut Vec<usize>| {
        path.push(sym);
        extend_paths(y, frames, blank, consumed, sym, path, out);
        path.pop();
    };
    step(blank, consumed, path);
    if last != blank {
        step(last, consumed, path);
    }
    if let Some(&next) = y.get(consumed) {
        if next != last {
            step(next, consumed + 1, path);
        }
    }
}

/// `-log Σ_{ŷ ∈ Φ(y)} Π_t grid[t][ŷ_t]` by explicit enumeration.
pub fn ctc_loss_bruteforce(grid: &PosteriorGrid, target: &TargetSequence) -> Result<f64> {
    let alignments = expand_alignments(target, grid.num_frames(), grid.blank_id())?;
    let total: f64 = alignments
        .iter()
        .map(|a| a.iter().enumerate().map(|(t, &s)| grid.get(t, s)).product::<f64>())
        .sum();
    Ok(-total.ln())
}

#[inline]
fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Forward-backward CTC loss and its gradient with respect to the grid
/// entries.
///
/// Returns `(-log p(y|X), dLoss/dGrid)`. If no alignment has non-zero
/// probability the loss is `+inf` and the gradient is all zeros.
pub fn ctc_loss(grid: &PosteriorGrid, target: &TargetSequence) -> Result<(f64, Matrix)> {
    let blank = grid.blank_id();
    target.validate(blank)?;
    let frames = grid.num_frames();
    target.check_feasible(frames)?;

    let y = target.labels();
    let states = 2 * y.len() + 1;
    let label = |s: usize| if s.is_multiple_of(2) { blank } else { y[s / 2] };
    // skip transition s-2 -> s allowed into a label that differs from the
    // previous label
    let can_skip = |s: usize| s % 2 == 1 && s >= 2 && y[s / 2] != y[s / 2 - 1];

    let num_symbols = grid.num_symbols();
    let log_y: Vec<f64> = grid.as_matrix().as_slice().iter().map(|p| p.ln()).collect();
    let ly = |t: usize, s: usize| log_y[t * num_symbols + label(s)];

    let neg_inf = f64::NEG_INFINITY;
    let mut alpha = vec![neg_inf; frames * states];
    alpha[0] = ly(0, 0);
    if states > 1 {
        alpha[1] = ly(0, 1);
    }
    for t in 1..frames {
        let (prev, cur) = alpha.split_at_mut(t * states);
        let prev = &prev[(t - 1) * states..];
        for s in 0..states {
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if can_skip(s) {
                acc = log_add(acc, prev[s - 2]);
            }
            cur[s] = if acc == neg_inf { neg_inf } else { acc + ly(t, s) };
        }
    }

    // beta excludes the emission at its own frame
    let mut beta = vec![neg_inf; frames * states];
    let last = (frames - 1) * states;
    beta[last + states - 1] = 0.0;
    if states > 1 {
        beta[last + states - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * states);
        let cur = &mut cur[t * states..];
        let next = &next[..states];
        for s in 0..states {
            let mut acc = next[s] + ly(t + 1, s);
            if s + 1 < states {
                acc = log_add(acc, next[s + 1] + ly(t + 1, s + 1));
            }
            if s + 2 < states && can_skip(s + 2) {
                acc = log_add(acc, next[s + 2] + ly(t + 1, s + 2));
            }
            cur[s] = acc;
        }
    }

    let mut log_p = alpha[last + states - 1];
    if states > 1 {
        log_p = log_add(log_p, alpha[last + states - 2]);
    }

    let mut grad = Matrix::zeros(frames, num_symbols);
    if log_p == neg_inf {
        return Ok((f64::INFINITY, grad));
    }
    let mut occupancy = vec![neg_inf; num_symbols];
    for t in 0..frames {
        occupancy.iter_mut().for_each(|o| *o = neg_inf);
        for s in 0..states {
            let v = alpha[t * states + s] + beta[t * states + s];
            let k = label(s);
            occupancy[k] = log_add(occupancy[k], v);
        }
        let row = grad.row_mut(t);
        for k in 0..num_symbols {
            if occupancy[k] != neg_inf {
                row[k] = -(occupancy[k] - log_p - log_y[t * num_symbols + k]).exp();
            }
        }
    }
    Ok((-log_p, grad))
}

/// Per-frame argmax (lowest index on ties), then collapse.
pub fn greedy_decode(grid: &PosteriorGrid) -> TargetSequence {
    let path: Vec<usize> = (0..grid.num_frames()).map(|t| grid.argmax(t)).collect();
    collapse(&path, grid.blank_id())
}

/// Same as [`greedy_decode`] on raw scores (logits, log-probabilities).
pub fn greedy_decode_scores(scores: &Matrix, blank_id: usize) -> TargetSequence {
    let path: Vec<usize> = scores.iter_rows().map(argmax).collect();
    collapse(&path, blank_id)
}

/// Levenshtein distance with unit costs.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `100 · Σ edit distance / Σ reference length`.
pub fn sequence_error_rate(
    hypotheses: &[TargetSequence],
    references: &[TargetSequence],
) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let total_ref: usize = references.iter().map(TargetSequence::len).sum();
    if total_ref == 0 {
        return Err(Error::EmptyReferenceSet);
    }
    let errors: usize = hypotheses
        .iter()
        .zip(references)
        .map(|(h, r)| edit_distance(h.labels(), r.labels()))
        .sum();
    Ok(100.0 * errors as f64 / total_ref as f64)
}
