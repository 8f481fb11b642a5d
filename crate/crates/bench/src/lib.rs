//! Shared fixtures for the benchmarks.

use ctcg_core::{Matrix, PosteriorGrid, TargetSequence};

/// Deterministic pseudo-random logits, softmaxed.
pub fn grid(frames: usize, symbols: usize) -> PosteriorGrid {
    let data = (0..frames * symbols)
        .map(|i| ((i as f64 * 12.9898).sin() * 43758.5453).fract() * 4.0)
        .collect();
    PosteriorGrid::softmax(&Matrix::from_vec(frames, symbols, data).expect("shape"))
}

/// Target cycling through the non-blank symbols without repeats.
pub fn target(len: usize, symbols: usize) -> TargetSequence {
    TargetSequence::new((0..len).map(|i| i % (symbols - 1)).collect())
}

pub fn features(frames: usize, dim: usize) -> Matrix {
    let data = (0..frames * dim).map(|i| (i as f64 * 0.37).sin()).collect();
    Matrix::from_vec(frames, dim, data).expect("shape")
}
