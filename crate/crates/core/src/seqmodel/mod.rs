//! Small LSTM-style recurrent models producing per-frame posteriors.
//!
//! A model stacks `num_layers` recurrent layers. Each layer runs one cell
//! (unidirectional) or two cells over reversed time (bidirectional) whose
//! hidden states are concatenated before the next layer. A linear
//! projection plus softmax maps the top hidden state to `V + 1` outputs.
//!
//! Cell update, with gates in parameter order `i, f, g, o`:
//!
//! ```text
//! z = W [x_t; h_prev] + b
//! i = σ(z_i)  f = σ(z_f)  g = tanh(z_g)  o = σ(z_o)
//! c_t = f ⊙ c_prev + i ⊙ g
//! h_t = o ⊙ tanh(c_t)
//! ```
//!
//! Everything is `f64` and gradients are computed by explicit
//! backpropagation through time.

mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{softmax_backward, Matrix, PosteriorGrid};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    Unidirectional,
    Bidirectional,
}

impl Direction {
    pub fn count(self) -> usize {
        match self {
            Direction::Unidirectional => 1,
            Direction::Bidirectional => 2,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Unidirectional => "uni",
            Direction::Bidirectional => "bi",
        })
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uni" | "unidirectional" => Ok(Direction::Unidirectional),
            "bi" | "bidirectional" => Ok(Direction::Bidirectional),
            other => Err(Error::InvalidConfig(format!("unknown direction {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Units per direction.
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub direction: Direction,
    /// Alphabet size plus one for blank.
    pub output_dim: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.output_dim < 2 {
            return Err(Error::InvalidConfig(
                "output_dim must cover at least one symbol plus blank".into(),
            ));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        Layout::new(self).total
    }

    /// Width of the top recurrent layer's output.
    pub fn top_dim(&self) -> usize {
        self.hidden_dim * self.direction.count()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct CellLayout {
    weights: usize,
    bias: usize,
    in_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Layout {
    /// Indexed by `layer * directions + direction`.
    cells: Vec<CellLayout>,
    out_weights: usize,
    out_bias: usize,
    total: usize,
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Self {
        let h = cfg.hidden_dim;
        let dirs = cfg.direction.count();
        let mut offset = 0;
        let mut cells = Vec::with_capacity(cfg.num_layers * dirs);
        for layer in 0..cfg.num_layers {
            let in_dim = if layer == 0 { cfg.input_dim } else { h * dirs };
            for _ in 0..dirs {
                let weights = offset;
                offset += 4 * h * (in_dim + h);
                let bias = offset;
                offset += 4 * h;
                cells.push(CellLayout {
                    weights,
                    bias,
                    in_dim,
                });
            }
        }
        let out_weights = offset;
        offset += cfg.output_dim * h * dirs;
        let out_bias = offset;
        offset += cfg.output_dim;
        Self {
            cells,
            out_weights,
            out_bias,
            total: offset,
        }
    }
}

/// Recurrent model with a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceModel {
    config: ModelConfig,
    layout: Layout,
    params: Vec<f64>,
}

/// Activations retained by [`SequenceModel::forward`] for backpropagation.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    layers: Vec<LayerTrace>,
    top: Matrix,
    grid: PosteriorGrid,
}

impl ForwardTrace {
    pub fn grid(&self) -> &PosteriorGrid {
        &self.grid
    }

    pub fn num_frames(&self) -> usize {
        self.top.rows()
    }
}

#[derive(Clone, Debug)]
struct LayerTrace {
    input: Matrix,
    cells: Vec<CellTrace>,
}

#[derive(Clone, Debug)]
struct CellTrace {
    /// Activated gates `i, f, g, o`, `T × 4H`.
    gates: Matrix,
    cell: Matrix,
    tanh_cell: Matrix,
    hidden: Matrix,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn time_order(frames: usize, reverse: bool) -> Box<dyn Iterator<Item = usize>> {
    if reverse {
        Box::new((0..frames).rev())
    } else {
        Box::new(0..frames)
    }
}

impl SequenceModel {
    /// Samples every parameter uniformly from `(-ε, ε)` with
    /// `ε = 1/√(input size of the receiving layer)`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let h = config.hidden_dim;
        for cell in &layout.cells {
            let eps = init_epsilon(cell.in_dim);
            let end = cell.bias + 4 * h;
            for p in &mut params[cell.weights..end] {
                *p = rng.random_range(-eps..eps);
            }
        }
        let eps = init_epsilon(config.top_dim());
        for p in &mut params[layout.out_weights..] {
            *p = rng.random_range(-eps..eps);
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::DimensionMismatch {
                expected: layout.total,
                found: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidConfig("non-finite parameter".into()));
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    /// New model for `config` whose recurrent encoder is copied from
    /// `source`; the output projection is freshly initialized from
    /// `config.seed`.
    pub fn warm_start(source: &SequenceModel, config: ModelConfig) -> Result<Self> {
        let mut model = Self::init(config)?;
        let (a, b) = (&source.config, &model.config);
        if a.input_dim != b.input_dim
            || a.hidden_dim != b.hidden_dim
            || a.num_layers != b.num_layers
            || a.direction != b.direction
        {
            return Err(Error::InvalidConfig(
                "warm-start source has an incompatible encoder".into(),
            ));
        }
        let encoder = model.layout.out_weights;
        model.params[..encoder].copy_from_slice(&source.params[..encoder]);
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Runs the model and keeps the activations needed by
    /// [`backward`](Self::backward).
    pub fn forward(&self, features: &Matrix) -> Result<(PosteriorGrid, ForwardTrace)> {
        if features.cols() != self.config.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.input_dim,
                found: features.cols(),
            });
        }
        if features.rows() == 0 {
            return Err(Error::ShapeMismatch("feature sequence has no frames".into()));
        }
        let frames = features.rows();
        let h = self.config.hidden_dim;
        let dirs = self.config.direction.count();

        let mut layers = Vec::with_capacity(self.config.num_layers);
        let mut input = features.clone();
        for layer in 0..self.config.num_layers {
            let mut output = Matrix::zeros(frames, h * dirs);
            let mut cells = Vec::with_capacity(dirs);
            for d in 0..dirs {
                let cell = &self.layout.cells[layer * dirs + d];
                let trace = self.cell_forward(cell, &input, d == 1);
                for t in 0..frames {
                    output.row_mut(t)[d * h..(d + 1) * h].copy_from_slice(trace.hidden.row(t));
                }
                cells.push(trace);
            }
            layers.push(LayerTrace { input, cells });
            input = output;
        }
        let top = input;

        let out_dim = self.config.output_dim;
        let top_dim = top.cols();
        let w = &self.params[self.layout.out_weights..self.layout.out_bias];
        let b = &self.params[self.layout.out_bias..self.layout.out_bias + out_dim];
        let mut logits = Matrix::zeros(frames, out_dim);
        for t in 0..frames {
            let x = top.row(t);
            for (k, z) in logits.row_mut(t).iter_mut().enumerate() {
                *z = b[k] + dot(&w[k * top_dim..(k + 1) * top_dim], x);
            }
        }
        let grid = PosteriorGrid::softmax(&logits);
        Ok((
            grid.clone(),
            ForwardTrace {
                layers,
                top,
                grid,
            },
        ))
    }

    /// Posteriors only.
    pub fn posteriors(&self, features: &Matrix) -> Result<PosteriorGrid> {
        self.forward(features).map(|(grid, _)| grid)
    }

    fn cell_forward(&self, cell: &CellLayout, input: &Matrix, reverse: bool) -> CellTrace {
        let frames = input.rows();
        let h = self.config.hidden_dim;
        let in_dim = cell.in_dim;
        let row_len = in_dim + h;
        let w = &self.params[cell.weights..cell.bias];
        let b = &self.params[cell.bias..cell.bias + 4 * h];

        let mut gates = Matrix::zeros(frames, 4 * h);
        let mut cell_state = Matrix::zeros(frames, h);
        let mut tanh_cell = Matrix::zeros(frames, h);
        let mut hidden = Matrix::zeros(frames, h);
        let zeros = vec![0.0; h];
        let mut prev: Option<usize> = None;
        for t in time_order(frames, reverse) {
            let x = input.row(t);
            let (h_prev, c_prev) = match prev {
                Some(p) => (hidden.row(p).to_vec(), cell_state.row(p).to_vec()),
                None => (zeros.clone(), zeros.clone()),
            };
            let z = gates.row_mut(t);
            for (r, zr) in z.iter_mut().enumerate() {
                let wr = &w[r * row_len..(r + 1) * row_len];
                *zr = b[r] + dot(&wr[..in_dim], x) + dot(&wr[in_dim..], &h_prev);
            }
            for v in &mut z[..2 * h] {
                *v = sigmoid(*v);
            }
            for v in &mut z[2 * h..3 * h] {
                *v = v.tanh();
            }
            for v in &mut z[3 * h..] {
                *v = sigmoid(*v);
            }
            let z = gates.row(t);
            for j in 0..h {
                let c = z[h + j] * c_prev[j] + z[j] * z[2 * h + j];
                let tc = c.tanh();
                cell_state.set(t, j, c);
                tanh_cell.set(t, j, tc);
                hidden.set(t, j, z[3 * h + j] * tc);
            }
            prev = Some(t);
        }
        CellTrace {
            gates,
            cell: cell_state,
            tanh_cell,
            hidden,
        }
    }

    /// Gradient of a scalar loss with respect to every parameter, given the
    /// loss gradient with respect to the posterior grid.
    pub fn backward(&self, trace: &ForwardTrace, grad_wrt_grid: &Matrix) -> Result<Vec<f64>> {
        let expected = (trace.grid.num_frames(), trace.grid.num_symbols());
        if grad_wrt_grid.shape() != expected {
            return Err(Error::TraceMismatch {
                trace_rows: expected.0,
                trace_cols: expected.1,
                grad_rows: grad_wrt_grid.rows(),
                grad_cols: grad_wrt_grid.cols(),
            });
        }
        let dlogits = softmax_backward(&trace.grid, grad_wrt_grid);
        self.backward_logits(trace, &dlogits)
    }

    /// As [`backward`](Self::backward) but starting from the gradient with
    /// respect to the pre-softmax scores.
    pub fn backward_logits(&self, trace: &ForwardTrace, dlogits: &Matrix) -> Result<Vec<f64>> {
        let frames = trace.num_frames();
        if dlogits.shape() != (frames, self.config.output_dim) {
            return Err(Error::TraceMismatch {
                trace_rows: frames,
                trace_cols: self.config.output_dim,
                grad_rows: dlogits.rows(),
                grad_cols: dlogits.cols(),
            });
        }
        let mut grad = vec![0.0; self.params.len()];
        let top_dim = trace.top.cols();
        let out_dim = self.config.output_dim;
        let (wo, bo) = (self.layout.out_weights, self.layout.out_bias);
        let mut d_top = Matrix::zeros(frames, top_dim);
        for t in 0..frames {
            let dz = dlogits.row(t);
            let x = trace.top.row(t);
            for k in 0..out_dim {
                grad[bo + k] += dz[k];
                axpy(dz[k], x, &mut grad[wo + k * top_dim..wo + (k + 1) * top_dim]);
                axpy(dz[k], &self.params[wo + k * top_dim..wo + (k + 1) * top_dim], d_top.row_mut(t));
            }
        }

        let h = self.config.hidden_dim;
        let dirs = self.config.direction.count();
        let mut d_out = d_top;
        for (layer, lt) in trace.layers.iter().enumerate().rev() {
            let mut d_input = Matrix::zeros(frames, lt.input.cols());
            for (d, ct) in lt.cells.iter().enumerate() {
                let cell = &self.layout.cells[layer * dirs + d];
                self.cell_backward(cell, lt, ct, &d_out, d * h, d == 1, &mut d_input, &mut grad);
            }
            d_out = d_input;
        }
        Ok(grad)
    }

    #[allow(clippy::too_many_arguments)]
    fn cell_backward(
        &self,
        cell: &CellLayout,
        lt: &LayerTrace,
        ct: &CellTrace,
        d_out: &Matrix,
        col: usize,
        reverse: bool,
        d_input: &mut Matrix,
        grad: &mut [f64],
    ) {
        let frames = lt.input.rows();
        let h = self.config.hidden_dim;
        let in_dim = cell.in_dim;
        let row_len = in_dim + h;
        let w = &self.params[cell.weights..cell.bias];

        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        let mut dz = vec![0.0; 4 * h];
        let mut xh = vec![0.0; row_len];
        let mut dxh = vec![0.0; row_len];
        let order: Vec<usize> = time_order(frames, reverse).collect();
        for (pos, &t) in order.iter().enumerate().rev() {
            let prev = pos.checked_sub(1).map(|p| order[p]);
            let g = ct.gates.row(t);
            let tc = ct.tanh_cell.row(t);
            let dy = &d_out.row(t)[col..col + h];
            for j in 0..h {
                let (i_g, f_g, c_g, o_g) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
                let c_prev = prev.map_or(0.0, |p| ct.cell.get(p, j));
                let dh = dy[j] + dh_next[j];
                let d_o = dh * tc[j];
                let dc = dh * o_g * (1.0 - tc[j] * tc[j]) + dc_next[j];
                dz[j] = dc * c_g * i_g * (1.0 - i_g);
                dz[h + j] = dc * c_prev * f_g * (1.0 - f_g);
                dz[2 * h + j] = dc * i_g * (1.0 - c_g * c_g);
                dz[3 * h + j] = d_o * o_g * (1.0 - o_g);
                dc_next[j] = dc * f_g;
            }
            xh[..in_dim].copy_from_slice(lt.input.row(t));
            match prev {
                Some(p) => xh[in_dim..].copy_from_slice(ct.hidden.row(p)),
                None => xh[in_dim..].iter_mut().for_each(|v| *v = 0.0),
            }
            dxh.iter_mut().for_each(|v| *v = 0.0);
            let gw = &mut grad[cell.weights..cell.bias + 4 * h];
            let (gw, gb) = gw.split_at_mut(4 * h * row_len);
            for r in 0..4 * h {
                if dz[r] == 0.0 {
                    continue;
                }
                gb[r] += dz[r];
                axpy(dz[r], &xh, &mut gw[r * row_len..(r + 1) * row_len]);
                axpy(dz[r], &w[r * row_len..(r + 1) * row_len], &mut dxh);
            }
            for (a, b) in d_input.row_mut(t).iter_mut().zip(&dxh[..in_dim]) {
                *a += b;
            }
            dh_next.copy_from_slice(&dxh[in_dim..]);
        }
    }
}

/// `1/√fan_in`, the half-width of the uniform initialization interval.
pub fn init_epsilon(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    pub(crate) fn config(direction: Direction, layers: usize, hidden: usize) -> ModelConfig {
        ModelConfig {
            input_dim: 3,
            hidden_dim: hidden,
            num_layers: layers,
            direction,
            output_dim: 4,
            seed: 7,
        }
    }

    fn random_features(frames: usize, dim: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..frames * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        Matrix::from_vec(frames, dim, data).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = config(Direction::Bidirectional, 2, 5);
        let a = SequenceModel::init(cfg.clone()).unwrap();
        let b = SequenceModel::init(cfg.clone()).unwrap();
        assert_eq!(a.params(), b.params());
        let other = SequenceModel::init(ModelConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a.params(), other.params());
    }

    #[test]
    fn zero_dims_are_rejected() {
        let mut cfg = config(Direction::Unidirectional, 1, 0);
        assert!(matches!(SequenceModel::init(cfg.clone()), Err(Error::InvalidConfig(_))));
        cfg.hidden_dim = 3;
        cfg.num_layers = 0;
        assert!(matches!(SequenceModel::init(cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn epsilon_for_240_inputs() {
        assert!((init_epsilon(240) - 0.064_549_722_436_790_28).abs() < 1e-15);
    }

    #[test]
    fn parameters_within_init_interval() {
        let cfg = ModelConfig {
            input_dim: 240,
            hidden_dim: 4,
            num_layers: 2,
            direction: Direction::Unidirectional,
            output_dim: 5,
            seed: 1,
        };
        let m = SequenceModel::init(cfg).unwrap();
        let first_cell = 4 * 4 * (240 + 4) + 16;
        let eps0 = init_epsilon(240);
        assert!(m.params()[..first_cell].iter().all(|p| p.abs() < eps0));
        let eps1 = init_epsilon(4);
        assert!(m.params()[first_cell..].iter().all(|p| p.abs() < eps1));
        assert!(m.params()[first_cell..].iter().any(|p| p.abs() > eps0));
    }

    #[test]
    fn param_count_matches_layout() {
        let cfg = config(Direction::Bidirectional, 2, 5);
        // layer 0: 2 * (4*5*(3+5) + 20), layer 1: 2 * (4*5*(10+5) + 20), out: 4*10 + 4
        assert_eq!(cfg.num_params(), 2 * 180 + 2 * 320 + 44);
    }

    #[test]
    fn forward_rows_are_distributions() {
        for dir in [Direction::Unidirectional, Direction::Bidirectional] {
            let m = SequenceModel::init(config(dir, 2, 6)).unwrap();
            let grid = m.posteriors(&random_features(9, 3, 1)).unwrap();
            for t in 0..9 {
                let s: f64 = grid.row(t).iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let m = SequenceModel::init(config(Direction::Unidirectional, 1, 3)).unwrap();
        assert!(matches!(
            m.forward(&random_features(4, 5, 0)),
            Err(Error::DimensionMismatch { expected: 3, found: 5 })
        ));
    }

    #[test]
    fn unidirectional_is_causal() {
        let m = SequenceModel::init(config(Direction::Unidirectional, 2, 6)).unwrap();
        let x = random_features(8, 3, 2);
        let base = m.posteriors(&x).unwrap();
        for t in 0..8 {
            let mut y = x.clone();
            y.row_mut(t).iter_mut().for_each(|v| *v += 1.5);
            let pert = m.posteriors(&y).unwrap();
            for r in 0..t {
                assert_eq!(base.row(r), pert.row(r), "row {r} changed after perturbing {t}");
            }
            assert_ne!(base.row(t), pert.row(t));
        }
    }

    #[test]
    fn bidirectional_sees_the_future() {
        let m = SequenceModel::init(config(Direction::Bidirectional, 1, 6)).unwrap();
        let x = random_features(8, 3, 3);
        let base = m.posteriors(&x).unwrap();
        let mut y = x.clone();
        y.row_mut(5).iter_mut().for_each(|v| *v += 1.0);
        let pert = m.posteriors(&y).unwrap();
        let max_change = (0..4)
            .map(|s| (base.get(0, s) - pert.get(0, s)).abs())
            .fold(0.0, f64::max);
        assert!(max_change > 1e-9);
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let m = SequenceModel::init(config(Direction::Bidirectional, 2, 4)).unwrap();
        let (_, trace) = m.forward(&random_features(5, 3, 4)).unwrap();
        let g = m.backward(&trace, &Matrix::zeros(5, 4)).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_mismatched_gradient() {
        let m = SequenceModel::init(config(Direction::Unidirectional, 1, 4)).unwrap();
        let (_, trace) = m.forward(&random_features(5, 3, 4)).unwrap();
        assert!(matches!(m.backward(&trace, &Matrix::zeros(4, 4)), Err(Error::TraceMismatch { .. })));
    }

    #[test]
    fn backward_is_deterministic() {
        let m = SequenceModel::init(config(Direction::Bidirectional, 2, 4)).unwrap();
        let (_, trace) = m.forward(&random_features(5, 3, 4)).unwrap();
        let up = random_features(5, 4, 9);
        assert_eq!(m.backward(&trace, &up).unwrap(), m.backward(&trace, &up).unwrap());
    }

    #[test]
    fn warm_start_copies_encoder_only() {
        let src = SequenceModel::init(config(Direction::Unidirectional, 2, 4)).unwrap();
        let mut cfg = config(Direction::Unidirectional, 2, 4);
        cfg.output_dim = 6;
        cfg.seed = 99;
        let m = SequenceModel::warm_start(&src, cfg).unwrap();
        let enc = src.layout.out_weights;
        assert_eq!(&m.params()[..enc], &src.params()[..enc]);
        assert_eq!(m.params().len(), enc + 6 * 4 + 6);
        let bad = config(Direction::Bidirectional, 2, 4);
        assert!(SequenceModel::warm_start(&src, bad).is_err());
    }

    /// Scalar loss `Σ weights ⊙ grid` so every grid entry carries gradient.
    fn weighted_sum_check(dir: Direction, layers: usize, hidden: usize, frames: usize, seed: u64) {
        let mut cfg = config(dir, layers, hidden);
        cfg.seed = seed;
        let mut model = SequenceModel::init(cfg).unwrap();
        let x = random_features(frames, 3, seed + 100);
        let weights = random_features(frames, 4, seed + 200);
        let loss = |m: &SequenceModel| {
            let g = m.posteriors(&x).unwrap();
            g.as_matrix().as_slice().iter().zip(weights.as_slice()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, trace) = model.forward(&x).unwrap();
        let analytic = model.backward(&trace, &weights).unwrap();
        let step = 1e-5;
        let (mut considered, mut good) = (0usize, 0usize);
        for (i, &a) in analytic.iter().enumerate() {
            let orig = model.params[i];
            model.params[i] = orig + step;
            let up = loss(&model);
            model.params[i] = orig - step;
            let down = loss(&model);
            model.params[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            if a.abs().max(numeric.abs()) <= 1e-8 {
                continue;
            }
            considered += 1;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
            if rel < 1e-4 {
                good += 1;
            }
        }
        assert!(considered > 0);
        assert!(
            good as f64 >= 0.99 * considered as f64,
            "{dir:?} L={layers} H={hidden} T={frames}: {good}/{considered}"
        );
    }

    #[test]
    fn gradients_match_finite_differences() {
        weighted_sum_check(Direction::Unidirectional, 1, 5, 4, 1);
        weighted_sum_check(Direction::Unidirectional, 2, 8, 6, 2);
        weighted_sum_check(Direction::Bidirectional, 1, 6, 4, 3);
        weighted_sum_check(Direction::Bidirectional, 2, 4, 6, 4);
        weighted_sum_check(Direction::Bidirectional, 2, 16, 3, 5);
    }
}
