//! Connectionist temporal classification (CTC) training toolkit with guided
//! spike-timing training.
//!
//! The crate bundles everything needed to train small recurrent CTC models
//! from scratch, to guide their spike timings with a frozen pre-trained
//! model, to fuse posteriors across models and to distill a fused teacher
//! into a single student:
//!
//! * [`alphabet`]: symbol inventory, blank and ignore set.
//! * [`seqmodel`]: LSTM-style recurrent models with hand-written BPTT.
//! * [`ctc`]: alignment expansion, forward-backward loss, greedy decoding.
//! * [`guided`]: spike masks and the guide loss.
//! * [`ensemble`]: posterior fusion and frame-wise KL distillation.
//! * [`trainer`]: Nesterov SGD, annealing schedule, SortaGrad ordering.
//! * [`data`]: datasets, file formats and a synthetic task generator.
//! * [`analysis`]: spike extraction, coverage ratios, posterior dumps.

pub mod alphabet;
pub mod analysis;
pub mod binio;
pub mod ctc;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod grid;
pub mod guided;
pub mod seqmodel;
pub mod trainer;

pub use alphabet::AlphabetSpec;
pub use ctc::TargetSequence;
pub use data::{Dataset, SyntheticTaskSpec, Utterance};
pub use error::{Error, Result};
pub use grid::{Matrix, PosteriorGrid};
pub use guided::{GuideVariant, GuidedLossConfig, MaskStore, SpikeMask};
pub use seqmodel::{Direction, ModelConfig, SequenceModel};
pub use trainer::{LossMode, TrainingJob, TrainingSchedule};
