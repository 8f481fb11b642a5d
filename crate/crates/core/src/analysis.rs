//! Spike extraction, coverage ratios between models and posterior dumps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::alphabet::AlphabetSpec;
use crate::data::{Dataset, Utterance};
use crate::error::{Error, Result};
use crate::grid::{Matrix, PosteriorGrid};
use crate::seqmodel::SequenceModel;

/// A non-blank peak: `symbol` is the frame's argmax.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Spike {
    pub frame: usize,
    pub symbol: usize,
}

/// Spikes of one utterance, at most one per frame, in frame order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SpikeSet {
    spikes: Vec<Spike>,
}

impl SpikeSet {
    /// Sorts by frame and rejects two spikes on one frame.
    pub fn new(mut spikes: Vec<Spike>) -> Result<Self> {
        spikes.sort_unstable();
        if let Some(w) = spikes.windows(2).find(|w| w[0].frame == w[1].frame) {
            return Err(Error::InvalidSpikes(format!("two spikes at frame {}", w[0].frame)));
        }
        Ok(Self { spikes })
    }

    pub fn spikes(&self) -> &[Spike] {
        &self.spikes
    }

    pub fn len(&self) -> usize {
        self.spikes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spikes.is_empty()
    }

    pub fn at_frame(&self, frame: usize) -> Option<Spike> {
        self.spikes
            .binary_search_by_key(&frame, |s| s.frame)
            .ok()
            .map(|i| self.spikes[i])
    }
}

/// Frames whose argmax is outside the ignore set and at least `threshold`.
pub fn extract_spikes(grid: &PosteriorGrid, alphabet: &AlphabetSpec, threshold: f64) -> SpikeSet {
    let spikes = (0..grid.num_frames())
        .filter_map(|t| {
            let s = grid.argmax(t);
            (!alphabet.is_ignored(s) && grid.get(t, s) >= threshold).then_some(Spike { frame: t, symbol: s })
        })
        .collect();
    SpikeSet { spikes }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CoverageOptions {
    /// Frames of slack either side; 0 means the same frame.
    pub window: usize,
    /// Require the covering spike to carry the same symbol.
    pub match_symbol: bool,
}

impl Default for CoverageOptions {
    fn default() -> Self {
        Self {
            window: 0,
            match_symbol: true,
        }
    }
}

fn covered(spike: Spike, by: &SpikeSet, opts: CoverageOptions) -> bool {
    let lo = spike.frame.saturating_sub(opts.window);
    let hi = spike.frame + opts.window;
    let start = by.spikes.partition_point(|s| s.frame < lo);
    by.spikes[start..]
        .iter()
        .take_while(|s| s.frame <= hi)
        .any(|s| !opts.match_symbol || s.symbol == spike.symbol)
}

/// Percentage of spikes in `a` covered by a spike in `b`, pooled over
/// utterances paired by position.
pub fn coverage_ratio(a: &[SpikeSet], b: &[SpikeSet], opts: CoverageOptions) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} utterances against {}",
            a.len(),
            b.len()
        )));
    }
    let total: usize = a.iter().map(SpikeSet::len).sum();
    if total == 0 {
        return Err(Error::EmptySpikeSet);
    }
    let hits: usize = a
        .iter()
        .zip(b)
        .map(|(sa, sb)| sa.spikes.iter().filter(|&&s| covered(s, sb, opts)).count())
        .sum();
    Ok(100.0 * hits as f64 / total as f64)
}

/// Spikes of a model on every utterance of a dataset, in dataset order.
pub fn model_spikes(model: &SequenceModel, dataset: &Dataset, threshold: f64) -> Result<Vec<SpikeSet>> {
    dataset
        .utterances()
        .par_iter()
        .map(|u| {
            model
                .posteriors(&u.features)
                .map(|g| extract_spikes(&g, dataset.alphabet(), threshold))
        })
        .collect()
}

/// Coverage of `a`'s spikes by `b`'s spikes on a dataset.
pub fn model_coverage(
    a: &SequenceModel,
    b: &SequenceModel,
    dataset: &Dataset,
    opts: CoverageOptions,
) -> Result<f64> {
    coverage_ratio(&model_spikes(a, dataset, 0.0)?, &model_spikes(b, dataset, 0.0)?, opts)
}

/// One line of a coverage report.
#[derive(Clone, Debug, PartialEq)]
pub struct CoverageRow {
    pub pair_name: String,
    pub split: String,
    pub coverage_percent: f64,
}

pub fn coverage_report_csv(rows: &[CoverageRow]) -> String {
    let mut out = String::from("pair_name,split,coverage_percent\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.pair_name, r.split, r.coverage_percent);
    }
    out
}

/// `frame,symbol_0,…,symbol_V` with 17 significant digits per value.
pub fn posterior_csv(grid: &PosteriorGrid) -> String {
    let mut out = String::from("frame");
    for s in 0..grid.num_symbols() {
        let _ = write!(out, ",symbol_{s}");
    }
    out.push('\n');
    for t in 0..grid.num_frames() {
        let _ = write!(out, "{t}");
        for p in grid.row(t) {
            let _ = write!(out, ",{p:.16e}");
        }
        out.push('\n');
    }
    out
}

/// Parses [`posterior_csv`] output back into a grid.
pub fn parse_posterior_csv(text: &str) -> Result<PosteriorGrid> {
    let parse_err = |line: usize, msg: String| Error::Parse { line, offset: 0, msg };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| parse_err(1, "empty file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"frame") || cols.len() < 2 {
        return Err(parse_err(1, format!("bad header {header:?}")));
    }
    for (s, c) in cols[1..].iter().enumerate() {
        if *c != format!("symbol_{s}") {
            return Err(parse_err(1, format!("expected symbol_{s}, found {c:?}")));
        }
    }
    let width = cols.len() - 1;
    let mut data = Vec::new();
    let mut frames = 0;
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        let mut fields = line.split(',');
        let frame: usize = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| parse_err(n, "bad frame index".into()))?;
        if frame != frames {
            return Err(parse_err(n, format!("expected frame {frames}, found {frame}")));
        }
        let row = fields
            .map(|f| f.parse::<f64>().map_err(|e| parse_err(n, format!("{f:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if row.len() != width {
            return Err(parse_err(n, format!("expected {width} values, found {}", row.len())));
        }
        data.extend(row);
        frames += 1;
    }
    PosteriorGrid::new(Matrix::from_vec(frames, width, data)?)
}

pub fn write_posterior_csv(grid: &PosteriorGrid, path: &Path) -> Result<()> {
    fs::write(path, posterior_csv(grid))?;
    Ok(())
}

pub fn read_posterior_csv(path: &Path) -> Result<PosteriorGrid> {
    parse_posterior_csv(&fs::read_to_string(path)?)
}

/// Writes a model's posteriors on one utterance as CSV.
pub fn dump_posteriors(model: &SequenceModel, utterance: &Utterance, path: &Path) -> Result<PosteriorGrid> {
    let grid = model.posteriors(&utterance.features)?;
    write_posterior_csv(&grid, path)?;
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(rows: &[&[f64]]) -> PosteriorGrid {
        PosteriorGrid::from_rows(rows).unwrap()
    }

    fn set(pairs: &[(usize, usize)]) -> SpikeSet {
        SpikeSet::new(pairs.iter().map(|&(frame, symbol)| Spike { frame, symbol }).collect()).unwrap()
    }

    #[test]
    fn extraction_examples() {
        let ab = AlphabetSpec::new(["a", "b"]).unwrap();
        let g = grid(&[&[0.9, 0.05, 0.05], &[0.1, 0.1, 0.8], &[0.2, 0.5, 0.3]]);
        assert_eq!(extract_spikes(&g, &ab, 0.0), set(&[(0, 0), (2, 1)]));
        assert_eq!(extract_spikes(&g, &ab, 0.95), SpikeSet::default());
        assert_eq!(extract_spikes(&g, &ab, 0.6), set(&[(0, 0)]));
        let silent = ab.clone().with_ignored(&["b"]).unwrap();
        assert_eq!(extract_spikes(&g, &silent, 0.0), set(&[(0, 0)]));
    }

    #[test]
    fn coverage_examples() {
        let a = vec![set(&[(0, 0), (3, 1)])];
        assert_eq!(coverage_ratio(&a, &a, CoverageOptions::default()).unwrap(), 100.0);
        let disjoint = vec![set(&[(1, 0), (4, 1)])];
        assert_eq!(coverage_ratio(&a, &disjoint, CoverageOptions::default()).unwrap(), 0.0);
        let shifted = CoverageOptions {
            window: 1,
            match_symbol: true,
        };
        assert_eq!(coverage_ratio(&a, &disjoint, shifted).unwrap(), 100.0);

        let wrong_symbol = vec![set(&[(0, 1), (3, 1)])];
        assert_eq!(coverage_ratio(&a, &wrong_symbol, CoverageOptions::default()).unwrap(), 50.0);
        let frame_only = CoverageOptions {
            window: 0,
            match_symbol: false,
        };
        assert_eq!(coverage_ratio(&a, &wrong_symbol, frame_only).unwrap(), 100.0);
    }

    #[test]
    fn coverage_errors() {
        let empty = vec![SpikeSet::default()];
        assert!(matches!(
            coverage_ratio(&empty, &empty, CoverageOptions::default()),
            Err(Error::EmptySpikeSet)
        ));
        assert!(matches!(
            coverage_ratio(&[set(&[(0, 0)])], &[], CoverageOptions::default()),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(SpikeSet::new(vec![Spike { frame: 2, symbol: 0 }, Spike { frame: 2, symbol: 1 }]).is_err());
    }

    #[test]
    fn coverage_is_directional() {
        let a = vec![set(&[(0, 0)])];
        let b = vec![set(&[(0, 0), (5, 1)])];
        assert_eq!(coverage_ratio(&a, &b, CoverageOptions::default()).unwrap(), 100.0);
        assert_eq!(coverage_ratio(&b, &a, CoverageOptions::default()).unwrap(), 50.0);
    }

    #[test]
    fn csv_shape_and_round_trip() {
        let g = grid(&[&[0.1, 0.2, 0.7], &[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], &[0.0, 0.0, 1.0]]);
        let text = posterior_csv(&g);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "frame,symbol_0,symbol_1,symbol_2");
        assert_eq!(lines.len(), 4);
        assert!(lines[1..].iter().all(|l| l.split(',').count() == 4));
        assert_eq!(parse_posterior_csv(&text).unwrap(), g);
    }

    #[test]
    fn csv_parse_errors() {
        assert!(matches!(parse_posterior_csv(""), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(
            parse_posterior_csv("frame,symbol_0,symbol_1\n0,0.5\n"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse_posterior_csv("frame,symbol_0,symbol_1\n1,0.5,0.5\n"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(parse_posterior_csv("frame,symbol_0,symbol_1\n0,0.5,0.6\n").is_err());
    }

    fn arb_spikes(frames: usize, symbols: usize) -> impl Strategy<Value = SpikeSet> {
        proptest::collection::vec(proptest::option::of(0..symbols), frames).prop_map(|v| SpikeSet {
            spikes: v
                .into_iter()
                .enumerate()
                .filter_map(|(frame, s)| s.map(|symbol| Spike { frame, symbol }))
                .collect(),
        })
    }

    fn arb_grid() -> impl Strategy<Value = PosteriorGrid> {
        (1usize..8, 2usize..5).prop_flat_map(|(t, v)| {
            proptest::collection::vec(-4.0f64..4.0, t * v)
                .prop_map(move |d| PosteriorGrid::softmax(&Matrix::from_vec(t, v, d).unwrap()))
        })
    }

    proptest! {
        #[test]
        fn self_coverage_is_full(a in arb_spikes(12, 3)) {
            prop_assume!(!a.is_empty());
            let a = vec![a];
            prop_assert_eq!(coverage_ratio(&a, &a, CoverageOptions::default()).unwrap(), 100.0);
        }

        #[test]
        fn coverage_bounded_and_monotone(
            a in arb_spikes(12, 3),
            b in arb_spikes(12, 3),
            extra in arb_spikes(12, 3),
            window in 0usize..3,
            match_symbol in any::<bool>(),
        ) {
            prop_assume!(!a.is_empty());
            let opts = CoverageOptions { window, match_symbol };
            let base = coverage_ratio(std::slice::from_ref(&a), std::slice::from_ref(&b), opts).unwrap();
            prop_assert!((0.0..=100.0).contains(&base));
            // fill frames of b that are empty with spikes from extra
            let mut grown = b.spikes.clone();
            for s in extra.spikes {
                if b.at_frame(s.frame).is_none() {
                    grown.push(s);
                }
            }
            let grown = SpikeSet::new(grown).unwrap();
            prop_assert!(coverage_ratio(&[a], &[grown], opts).unwrap() >= base);
        }

        #[test]
        fn threshold_one_gives_no_spikes(g in arb_grid()) {
            let alphabet = AlphabetSpec::numbered(g.num_symbols() - 1);
            prop_assert!(extract_spikes(&g, &alphabet, 1.0).is_empty());
        }

        #[test]
        fn spikes_avoid_ignored_symbols(g in arb_grid()) {
            let alphabet = AlphabetSpec::numbered(g.num_symbols() - 1);
            let spikes = extract_spikes(&g, &alphabet, 0.0);
            prop_assert!(spikes.spikes().iter().all(|s| !alphabet.is_ignored(s.symbol)));
            prop_assert!(spikes.spikes().windows(2).all(|w| w[0].frame < w[1].frame));
        }

        #[test]
        fn csv_round_trip_is_exact(g in arb_grid()) {
            let back = parse_posterior_csv(&posterior_csv(&g)).unwrap();
            let bits = |x: &PosteriorGrid| x.as_matrix().as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back), bits(&g));
        }
    }
}
