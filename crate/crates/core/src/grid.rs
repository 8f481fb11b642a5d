//! Dense row-major matrices and per-frame posterior grids.

use crate::error::{Error, Result};

/// Tolerance on row sums accepted by [`PosteriorGrid::new`].
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// Dense row-major `f64` matrix. Rows are frames throughout the crate.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::ShapeMismatch(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on a zero chunk size
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(self.rows)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self += scale * other`, elementwise.
    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }
}

/// Per-frame probability distributions over the alphabet plus blank.
///
/// Every row sums to one within [`ROW_SUM_TOLERANCE`] and every entry lies
/// in `[0, 1]`. The blank symbol is the last column.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorGrid(Matrix);

impl PosteriorGrid {
    /// Validates and wraps a row-stochastic matrix.
    pub fn new(values: Matrix) -> Result<Self> {
        if values.rows() == 0 {
            return Err(Error::InvalidGrid("grid has no frames".into()));
        }
        if values.cols() < 1 {
            return Err(Error::InvalidGrid("grid has no symbols".into()));
        }
        for (t, row) in values.iter_rows().enumerate() {
            if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::InvalidGrid(format!("frame {t} has entry {v}")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::InvalidGrid(format!("frame {t} sums to {sum}")));
            }
        }
        Ok(Self(values))
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    /// Row-wise softmax of unnormalized scores.
    pub fn softmax(logits: &Matrix) -> Self {
        let mut out = logits.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        Self(out)
    }

    /// Wraps values already known to be row-stochastic.
    pub(crate) fn from_matrix_unchecked(values: Matrix) -> Self {
        Self(values)
    }

    #[inline]
    pub fn num_frames(&self) -> usize {
        self.0.rows()
    }

    #[inline]
    pub fn num_symbols(&self) -> usize {
        self.0.cols()
    }

    #[inline]
    pub fn blank_id(&self) -> usize {
        self.0.cols() - 1
    }

    #[inline]
    pub fn get(&self, t: usize, s: usize) -> f64 {
        self.0.get(t, s)
    }

    #[inline]
    pub fn row(&self, t: usize) -> &[f64] {
        self.0.row(t)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    /// Index of the largest entry in frame `t`; ties go to the lowest index.
    pub fn argmax(&self, t: usize) -> usize {
        argmax(self.row(t))
    }
}

/// Index of the maximum; the first (lowest) index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Chains a gradient with respect to softmax outputs into a gradient with
/// respect to its inputs: `dz_k = p_k (g_k - sum_j p_j g_j)`.
pub fn softmax_backward(grid: &PosteriorGrid, grad_wrt_grid: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(grid.num_frames(), grid.num_symbols());
    for t in 0..grid.num_frames() {
        let p = grid.row(t);
        let g = grad_wrt_grid.row(t);
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for (o, (pk, gk)) in out.row_mut(t).iter_mut().zip(p.iter().zip(g)) {
            *o = pk * (gk - dot);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_rows_that_do_not_sum_to_one() {
        assert!(PosteriorGrid::from_rows(&[[0.5, 0.4]]).is_err());
        assert!(PosteriorGrid::from_rows(&[[1.2, -0.2]]).is_err());
        assert!(PosteriorGrid::from_rows(&[[0.5, 0.5]]).is_ok());
    }

    #[test]
    fn rejects_empty_grid() {
        let empty: [[f64; 2]; 0] = [];
        assert!(PosteriorGrid::from_rows(&empty).is_err());
    }

    #[test]
    fn softmax_rows_are_stochastic() {
        let logits = Matrix::from_rows(&[[1000.0, 0.0, -1000.0], [0.1, 0.2, 0.3]]).unwrap();
        let grid = PosteriorGrid::softmax(&logits);
        for t in 0..2 {
            let s: f64 = grid.row(t).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(PosteriorGrid::new(grid.into_matrix()).is_ok());
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.4, 0.4, 0.2]), 0);
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }
}
