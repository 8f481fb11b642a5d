//! Training loop: Nesterov-momentum SGD with a step-annealed learning rate,
//! SortaGrad batch ordering and per-epoch checkpoints.
//!
//! Utterances in a batch are processed individually (no padding) and their
//! gradients averaged in a fixed order, so runs are bit-reproducible
//! regardless of how many threads do the per-utterance work.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::binio::*;
use crate::ctc::{ctc_loss, greedy_decode, sequence_error_rate, TargetSequence};
use crate::data::{Dataset, Utterance};
use crate::ensemble::{distill_loss, TeacherStore};
use crate::error::{Error, Result};
use crate::grid::Matrix;
use crate::guided::{guided_ctc_loss, GuideVariant, GuidedLossConfig, MaskStore};
use crate::seqmodel::{save_checkpoint, Direction, ModelConfig, SequenceModel};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSchedule {
    pub epochs: usize,
    pub lr_initial: f64,
    pub momentum: f64,
    pub anneal_factor: f64,
    /// First epoch (1-based) whose rate is annealed.
    pub anneal_start_epoch: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainingSchedule {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr_initial: 0.03,
            momentum: 0.9,
            anneal_factor: std::f64::consts::FRAC_1_SQRT_2,
            anneal_start_epoch: 11,
            batch_size: 16,
            seed: 0,
            clip_norm: Some(5.0),
        }
    }
}

impl TrainingSchedule {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidJob(m));
        if !(self.lr_initial > 0.0 && self.lr_initial.is_finite()) {
            return fail(format!("lr_initial must be positive, got {}", self.lr_initial));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.anneal_factor > 0.0 && self.anneal_factor <= 1.0) {
            return fail(format!("anneal_factor must be in (0, 1], got {}", self.anneal_factor));
        }
        if self.anneal_start_epoch == 0 {
            return fail("anneal_start_epoch must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return fail(format!("clip_norm must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

/// Learning rate for a 1-based epoch: constant until
/// `anneal_start_epoch - 1`, then multiplied by `anneal_factor` per epoch.
pub fn learning_rate(schedule: &TrainingSchedule, epoch: usize) -> Result<f64> {
    if epoch == 0 || epoch > schedule.epochs {
        return Err(Error::OutOfRange {
            what: "epoch",
            value: epoch.to_string(),
            range: format!("1..={}", schedule.epochs),
        });
    }
    let annealed = (epoch + 1).saturating_sub(schedule.anneal_start_epoch);
    Ok(schedule.lr_initial * schedule.anneal_factor.powi(annealed as i32))
}

/// Batches of utterance indices for an epoch. Epoch 1 is sorted by frame
/// count (ties by id); later epochs use a seeded shuffle.
pub fn batch_order(dataset: &Dataset, epoch: usize, seed: u64, batch_size: usize) -> Result<Vec<Vec<usize>>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if batch_size == 0 {
        return Err(Error::InvalidJob("batch_size must be positive".into()));
    }
    let utts = dataset.utterances();
    let mut order: Vec<usize> = (0..utts.len()).collect();
    if epoch <= 1 {
        order.sort_by(|&a, &b| {
            (utts[a].num_frames(), &utts[a].id).cmp(&(utts[b].num_frames(), &utts[b].id))
        });
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// One Nesterov update. `grad` must be evaluated at the look-ahead point
/// `params + momentum · velocity` (see [`lookahead`]):
///
/// ```text
/// v' = momentum · v - lr · grad
/// θ' = θ + v'
/// ```
pub fn sgd_nesterov_step(
    params: &mut [f64],
    velocity: &mut [f64],
    grad: &[f64],
    lr: f64,
    momentum: f64,
    batch: usize,
) -> Result<()> {
    if params.len() != velocity.len() || params.len() != grad.len() {
        return Err(Error::ShapeMismatch(format!(
            "params {}, velocity {}, grad {}",
            params.len(),
            velocity.len(),
            grad.len()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { batch });
    }
    for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = momentum * *v - lr * g;
        *p += *v;
    }
    Ok(())
}

/// `params + momentum · velocity`.
pub fn lookahead(params: &[f64], velocity: &[f64], momentum: f64) -> Vec<f64> {
    params.iter().zip(velocity).map(|(p, v)| p + momentum * v).collect()
}

/// Rescales `grad` in place so its L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_global_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}

/// Which objective each utterance contributes.
#[derive(Clone, Copy, Debug)]
pub enum LossMode<'a> {
    Ctc,
    Guided {
        masks: &'a MaskStore,
        config: GuidedLossConfig,
    },
    Distill {
        teachers: &'a TeacherStore,
        kd_weight: f64,
    },
}

impl LossMode<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            LossMode::Ctc => "ctc",
            LossMode::Guided { .. } => "guided",
            LossMode::Distill { .. } => "distill",
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainingJob<'a> {
    pub model: SequenceModel,
    pub loss_mode: LossMode<'a>,
    pub schedule: TrainingSchedule,
    pub checkpoint_dir: Option<PathBuf>,
    /// Resume point: epochs `1..=start_epoch` are treated as done.
    pub start_epoch: usize,
    /// Optimizer velocity to resume from; zeros when `None`.
    pub velocity: Option<Vec<f64>>,
}

impl<'a> TrainingJob<'a> {
    pub fn new(model: SequenceModel, loss_mode: LossMode<'a>, schedule: TrainingSchedule) -> Self {
        Self {
            model,
            loss_mode,
            schedule,
            checkpoint_dir: None,
            start_epoch: 0,
            velocity: None,
        }
    }

    pub fn with_checkpoints(mut self, dir: impl Into<PathBuf>) -> Self {
        self.checkpoint_dir = Some(dir.into());
        self
    }

    /// Continues from a saved optimizer state.
    pub fn resume(mut self, state: OptimizerState) -> Self {
        self.start_epoch = state.epoch;
        self.velocity = Some(state.velocity);
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_train_loss: f64,
    /// `NaN` when no held-out set was given.
    pub heldout_ser: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainingOutcome {
    pub model: SequenceModel,
    pub metrics: Vec<EpochMetrics>,
    pub velocity: Vec<f64>,
}

/// Loss and gradient (w.r.t. the grid) for one utterance under a loss mode.
pub fn utterance_loss(
    mode: &LossMode<'_>,
    grid: &crate::grid::PosteriorGrid,
    utt: &Utterance,
) -> Result<(f64, Matrix)> {
    match mode {
        LossMode::Ctc => ctc_loss(grid, &utt.target),
        LossMode::Guided { masks, config } => {
            guided_ctc_loss(grid, &utt.target, masks.require(&utt.id)?, config)
        }
        LossMode::Distill {
            teachers,
            kd_weight,
        } => distill_loss(grid, &utt.target, teachers.require(&utt.id)?, *kd_weight),
    }
}

/// Mean loss and mean parameter gradient over a batch. Per-utterance work
/// may run in parallel; the reduction is sequential in batch order.
pub fn batch_gradient(
    model: &SequenceModel,
    mode: &LossMode<'_>,
    dataset: &Dataset,
    batch: &[usize],
) -> Result<(f64, Vec<f64>)> {
    let per_utt = batch
        .par_iter()
        .map(|&i| {
            let utt = &dataset.utterances()[i];
            let (grid, trace) = model.forward(&utt.features)?;
            let (loss, grad_grid) = utterance_loss(mode, &grid, utt)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    utterance: utt.id.clone(),
                });
            }
            Ok((loss, model.backward(&trace, &grad_grid)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = batch.len() as f64;
    let mut total = vec![0.0; model.num_params()];
    let mut loss = 0.0;
    for (l, g) in &per_utt {
        loss += l;
        for (t, v) in total.iter_mut().zip(g) {
            *t += v;
        }
    }
    total.iter_mut().for_each(|v| *v /= n);
    Ok((loss / n, total))
}

fn check_job(job: &TrainingJob<'_>, train: &Dataset, heldout: Option<&Dataset>) -> Result<()> {
    job.schedule.validate()?;
    let cfg = job.model.config();
    for d in std::iter::once(train).chain(heldout) {
        if cfg.output_dim != d.alphabet().num_outputs() {
            return Err(Error::AlphabetMismatch(format!(
                "model has {} outputs, dataset alphabet needs {}",
                cfg.output_dim,
                d.alphabet().num_outputs()
            )));
        }
        if cfg.input_dim != d.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: cfg.input_dim,
                found: d.input_dim(),
            });
        }
    }
    if heldout.is_some_and(|h| h.alphabet().symbols() != train.alphabet().symbols()) {
        return Err(Error::AlphabetMismatch("train and held-out alphabets differ".into()));
    }
    match &job.loss_mode {
        LossMode::Ctc => {}
        LossMode::Guided { masks, config } => {
            config.validate()?;
            if let Some(u) = train.utterances().iter().find(|u| masks.get(&u.id).is_none()) {
                return Err(Error::MissingCacheEntry(u.id.clone()));
            }
        }
        LossMode::Distill {
            teachers,
            kd_weight,
        } => {
            if !(0.0..=1.0).contains(kd_weight) {
                return Err(Error::OutOfRange {
                    what: "kd_weight",
                    value: kd_weight.to_string(),
                    range: "[0, 1]".into(),
                });
            }
            if let Some(u) = train.utterances().iter().find(|u| teachers.get(&u.id).is_none()) {
                return Err(Error::MissingCacheEntry(u.id.clone()));
            }
        }
    }
    if let Some(v) = &job.velocity {
        if v.len() != job.model.num_params() {
            return Err(Error::DimensionMismatch {
                expected: job.model.num_params(),
                found: v.len(),
            });
        }
    }
    Ok(())
}

/// Runs the remaining epochs of a job.
pub fn run_training(job: TrainingJob<'_>, train: &Dataset, heldout: Option<&Dataset>) -> Result<TrainingOutcome> {
    check_job(&job, train, heldout)?;
    let TrainingJob {
        mut model,
        loss_mode,
        schedule,
        checkpoint_dir,
        start_epoch,
        velocity,
    } = job;
    if let Some(dir) = &checkpoint_dir {
        fs::create_dir_all(dir)?;
    }
    let mut velocity = velocity.unwrap_or_else(|| vec![0.0; model.num_params()]);
    let mut metrics = Vec::new();
    let mut batch_id = 0;
    for epoch in start_epoch + 1..=schedule.epochs {
        let lr = learning_rate(&schedule, epoch)?;
        let batches = batch_order(train, epoch, schedule.seed, schedule.batch_size)?;
        let mut loss_sum = 0.0;
        for batch in &batches {
            let probe = SequenceModel::from_params(
                model.config().clone(),
                lookahead(model.params(), &velocity, schedule.momentum),
            )?;
            let (loss, mut grad) = batch_gradient(&probe, &loss_mode, train, batch)?;
            loss_sum += loss * batch.len() as f64;
            if let Some(max) = schedule.clip_norm {
                clip_global_norm(&mut grad, max);
            }
            sgd_nesterov_step(model.params_mut(), &mut velocity, &grad, lr, schedule.momentum, batch_id)?;
            batch_id += 1;
        }
        let heldout_ser = match heldout {
            Some(h) => evaluate_ser(&model, h)?,
            None => f64::NAN,
        };
        metrics.push(EpochMetrics {
            epoch,
            mean_train_loss: loss_sum / train.len() as f64,
            heldout_ser,
            lr,
        });
        if let Some(dir) = &checkpoint_dir {
            save_checkpoint(&model, &dir.join(checkpoint_name(epoch)))?;
            save_optimizer_state(
                &OptimizerState {
                    epoch,
                    velocity: velocity.clone(),
                },
                &dir.join(optimizer_state_name(epoch)),
            )?;
        }
    }
    Ok(TrainingOutcome {
        model,
        metrics,
        velocity,
    })
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch-{epoch:03}.ctcg")
}

pub fn optimizer_state_name(epoch: usize) -> String {
    format!("epoch-{epoch:03}.opt")
}

/// Greedy decodes of every utterance, in dataset order.
pub fn decode_dataset(model: &SequenceModel, dataset: &Dataset) -> Result<Vec<TargetSequence>> {
    dataset
        .utterances()
        .par_iter()
        .map(|u| model.posteriors(&u.features).map(|g| greedy_decode(&g)))
        .collect()
}

pub fn evaluate_ser(model: &SequenceModel, dataset: &Dataset) -> Result<f64> {
    sequence_error_rate(&decode_dataset(model, dataset)?, &dataset.targets())
}

/// Velocity snapshot written next to each epoch checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub epoch: usize,
    pub velocity: Vec<f64>,
}

const OPT_MAGIC: &[u8; 4] = b"CTGO";
const OPT_VERSION: u32 = 1;

pub fn save_optimizer_state(state: &OptimizerState, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(OPT_MAGIC)?;
    write_u32(&mut w, OPT_VERSION)?;
    write_u32(&mut w, state.epoch as u32)?;
    write_u64(&mut w, state.velocity.len() as u64)?;
    write_f64s(&mut w, &state.velocity)?;
    w.flush()?;
    Ok(())
}

pub fn load_optimizer_state(path: &Path) -> Result<OptimizerState> {
    let mut r = BufReader::new(File::open(path)?);
    let bad = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    if !expect_magic(&mut r, OPT_MAGIC)? {
        return Err(bad("missing CTGO magic"));
    }
    if read_u32(&mut r)? != OPT_VERSION {
        return Err(bad("unsupported optimizer state version"));
    }
    let epoch = read_u32(&mut r)? as usize;
    let n = read_u64(&mut r)? as usize;
    let velocity = read_f64s(&mut r, n)?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(bad("trailing bytes"));
    }
    Ok(OptimizerState { epoch, velocity })
}

/// Metrics as CSV: `epoch,mean_train_loss,heldout_ser,lr`.
pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,mean_train_loss,heldout_ser,lr\n");
    for m in metrics {
        let _ = writeln!(out, "{},{},{},{}", m.epoch, m.mean_train_loss, m.heldout_ser, m.lr);
    }
    out
}

pub fn write_metrics_csv(metrics: &[EpochMetrics], path: &Path) -> Result<()> {
    fs::write(path, metrics_csv(metrics))?;
    Ok(())
}

/// Everything a training run can be configured with from a `key=value`
/// file: the schedule, the model shape and the loss options.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub schedule: TrainingSchedule,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub direction: Direction,
    pub model_seed: u64,
    pub guide: GuidedLossConfig,
    pub kd_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: TrainingSchedule::default(),
            hidden_dim: 32,
            num_layers: 1,
            direction: Direction::Unidirectional,
            model_seed: 0,
            guide: GuidedLossConfig::default(),
            kd_weight: 1.0,
        }
    }
}

/// Keys accepted by [`TrainConfig::set`].
pub const CONFIG_KEYS: &[&str] = &[
    "epochs",
    "lr_initial",
    "momentum",
    "anneal_factor",
    "anneal_start_epoch",
    "batch_size",
    "seed",
    "clip_norm",
    "hidden_dim",
    "num_layers",
    "direction",
    "model_seed",
    "guide_weight",
    "guide_variant",
    "kd_weight",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidJob(format!("bad value {value:?} for {key}")))
}

impl TrainConfig {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n + 1,
                offset: 0,
                msg: format!("expected key=value, found {line:?}"),
            })?;
            cfg.set(key.trim(), value.trim()).map_err(|e| Error::Parse {
                line: n + 1,
                offset: 0,
                msg: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let s = &mut self.schedule;
        match key {
            "epochs" => s.epochs = parse_value(key, value)?,
            "lr_initial" => s.lr_initial = parse_value(key, value)?,
            "momentum" => s.momentum = parse_value(key, value)?,
            "anneal_factor" => s.anneal_factor = parse_anneal(value)?,
            "anneal_start_epoch" => s.anneal_start_epoch = parse_value(key, value)?,
            "batch_size" => s.batch_size = parse_value(key, value)?,
            "seed" => s.seed = parse_value(key, value)?,
            "clip_norm" => {
                s.clip_norm = match value {
                    "none" | "off" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "hidden_dim" => self.hidden_dim = parse_value(key, value)?,
            "num_layers" => self.num_layers = parse_value(key, value)?,
            "direction" => self.direction = value.parse()?,
            "model_seed" => self.model_seed = parse_value(key, value)?,
            "guide_weight" => self.guide.guide_weight = parse_value(key, value)?,
            "guide_variant" => self.guide.variant = value.parse::<GuideVariant>()?,
            "kd_weight" => self.kd_weight = parse_value(key, value)?,
            other => return Err(Error::InvalidJob(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn model_config(&self, input_dim: usize, output_dim: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            hidden_dim: self.hidden_dim,
            num_layers: self.num_layers,
            direction: self.direction,
            output_dim,
            seed: self.model_seed,
        }
    }
}

/// Accepts a plain number or `sqrt(x)`.
fn parse_anneal(value: &str) -> Result<f64> {
    if let Some(inner) = value.strip_prefix("sqrt(").and_then(|v| v.strip_suffix(')')) {
        return parse_value::<f64>("anneal_factor", inner.trim()).map(f64::sqrt);
    }
    parse_value("anneal_factor", value)
}
