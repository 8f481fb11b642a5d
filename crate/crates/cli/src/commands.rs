use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ctcg_core::analysis::{
    coverage_report_csv, coverage_ratio, dump_posteriors, model_spikes, CoverageOptions, CoverageRow,
};
use ctcg_core::ctc::{greedy_decode, sequence_error_rate};
use ctcg_core::data::{generate_split, SyntheticTaskSpec};
use ctcg_core::ensemble::{
    fused_posteriors, load_teacher_cache, precompute_teachers, save_teacher_cache, uniform_weights, validate_weights,
};
use ctcg_core::guided::{load_mask_cache, precompute_masks, save_mask_cache, write_mask_csv};
use ctcg_core::seqmodel::{load_checkpoint, save_checkpoint};
use ctcg_core::trainer::{
    decode_dataset, evaluate_ser, load_optimizer_state, metrics_csv, run_training, EpochMetrics, TrainConfig,
    TrainingJob,
};
use ctcg_core::{AlphabetSpec, Dataset, Error, LossMode, Result, SequenceModel};

use crate::args::*;

/// Share of utterances held out when no held-out file is given.
const HELDOUT_PERCENT: u64 = 10;

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a.common, Mode::Ctc),
        Command::TrainGuided(a) => {
            let TrainGuidedArgs {
                common,
                guiding_model,
                guide_weight,
                guide_variant,
                mask_cache,
            } = a;
            train(
                common,
                Mode::Guided {
                    guiding_model,
                    guide_weight,
                    guide_variant,
                    mask_cache,
                },
            )
        }
        Command::Distill(a) => {
            let DistillArgs {
                common,
                teachers,
                weights,
                kd_weight,
                teacher_cache,
            } = a;
            train(
                common,
                Mode::Distill {
                    teachers,
                    weights,
                    kd_weight,
                    teacher_cache,
                },
            )
        }
        Command::Decode(a) => decode(a),
        Command::Eval(a) => eval(a),
        Command::FuseEval(a) => fuse_eval(a),
        Command::AnalyzeCoverage(a) => analyze_coverage(a),
        Command::DumpPosteriors(a) => dump(a),
        Command::ExportMasks(a) => export_masks(a),
    }
}

fn load_data(args: &DataArgs) -> Result<Dataset> {
    load_dataset(&args.data, args)
}

fn load_dataset(path: &Path, args: &DataArgs) -> Result<Dataset> {
    let mut dataset = Dataset::load(path)?;
    if let Some(p) = &args.alphabet {
        dataset = dataset.with_alphabet(AlphabetSpec::load(p)?)?;
    }
    if !args.ignore_symbols.is_empty() {
        let alphabet = dataset.alphabet().clone().with_ignored(&args.ignore_symbols)?;
        dataset = dataset.with_alphabet(alphabet)?;
    }
    Ok(dataset)
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let spec = SyntheticTaskSpec {
        alphabet_size: a.alphabet_size,
        input_dim: a.input_dim,
        min_symbols: a.min_symbols,
        max_symbols: a.max_symbols,
        min_segment: a.min_segment,
        max_segment: a.max_segment,
        noise_stddev: a.noise_stddev,
        prototype_scale: a.prototype_scale,
        allow_repeats: a.allow_repeats,
        seed: a.seed,
    };
    let (train, heldout) = generate_split(&spec, a.train_count, a.heldout_count)?;
    fs::create_dir_all(&a.out)?;
    train.save(&a.out.join("train.ds"))?;
    heldout.save(&a.out.join("heldout.ds"))?;
    train.alphabet().save(&a.out.join("alphabet.txt"))?;
    println!("train {} utterances, heldout {} utterances", train.len(), heldout.len());
    Ok(())
}

enum Mode {
    Ctc,
    Guided {
        guiding_model: PathBuf,
        guide_weight: Option<f64>,
        guide_variant: Option<ctcg_core::GuideVariant>,
        mask_cache: Option<PathBuf>,
    },
    Distill {
        teachers: Vec<PathBuf>,
        weights: Vec<f64>,
        kd_weight: Option<f64>,
        teacher_cache: Option<PathBuf>,
    },
}

fn train_config(c: &TrainCommon) -> Result<TrainConfig> {
    let mut cfg = match &c.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    let s = &mut cfg.schedule;
    if let Some(v) = c.seed {
        s.seed = v;
    }
    if let Some(v) = c.epochs {
        s.epochs = v;
    }
    if let Some(v) = c.batch_size {
        s.batch_size = v;
    }
    if let Some(v) = c.lr {
        s.lr_initial = v;
    }
    if let Some(v) = c.model_seed {
        cfg.model_seed = v;
    }
    if let Some(v) = c.hidden_dim {
        cfg.hidden_dim = v;
    }
    if let Some(v) = c.num_layers {
        cfg.num_layers = v;
    }
    if let Some(v) = c.direction {
        cfg.direction = v;
    }
    for kv in &c.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::InvalidJob(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn stem_with(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

fn train(c: TrainCommon, mode: Mode) -> Result<()> {
    let mut cfg = train_config(&c)?;
    let full = load_data(&c.data)?;
    let (train, heldout) = match &c.heldout {
        Some(p) => (full, load_dataset(p, &c.data)?),
        None => full.split_by_hash(HELDOUT_PERCENT),
    };
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let model_config = cfg.model_config(train.input_dim(), train.alphabet().num_outputs());
    let mut resume = None;
    let model = if let Some(stem) = &c.resume_from {
        resume = Some(load_optimizer_state(&stem_with(stem, ".opt"))?);
        load_checkpoint(&stem_with(stem, ".ctcg"))?
    } else if let Some(p) = &c.warm_start {
        SequenceModel::warm_start(&load_checkpoint(p)?, model_config)?
    } else {
        SequenceModel::init(model_config)?
    };

    let masks;
    let teachers;
    let loss_mode = match mode {
        Mode::Ctc => LossMode::Ctc,
        Mode::Guided {
            guiding_model,
            guide_weight,
            guide_variant,
            mask_cache,
        } => {
            if let Some(w) = guide_weight {
                cfg.guide.guide_weight = w;
            }
            if let Some(v) = guide_variant {
                cfg.guide.variant = v;
            }
            masks = match mask_cache.as_deref().filter(|p| p.exists()) {
                Some(p) => load_mask_cache(p)?,
                None => {
                    let store = precompute_masks(&load_checkpoint(&guiding_model)?, &train)?;
                    if let Some(p) = &mask_cache {
                        save_mask_cache(&store, p)?;
                    }
                    store
                }
            };
            LossMode::Guided {
                masks: &masks,
                config: cfg.guide,
            }
        }
        Mode::Distill {
            teachers: paths,
            weights,
            kd_weight,
            teacher_cache,
        } => {
            if let Some(w) = kd_weight {
                cfg.kd_weight = w;
            }
            teachers = match teacher_cache.as_deref().filter(|p| p.exists()) {
                Some(p) => load_teacher_cache(p)?,
                None => {
                    let models = paths.iter().map(|p| load_checkpoint(p)).collect::<Result<Vec<_>>>()?;
                    let weights = fusion_weights(weights, models.len())?;
                    let refs: Vec<&SequenceModel> = models.iter().collect();
                    let store = precompute_teachers(&refs, &weights, &train)?;
                    if let Some(p) = &teacher_cache {
                        save_teacher_cache(&store, p)?;
                    }
                    store
                }
            };
            LossMode::Distill {
                teachers: &teachers,
                kd_weight: cfg.kd_weight,
            }
        }
    };

    fs::create_dir_all(&c.out)?;
    let mut job = TrainingJob::new(model, loss_mode, cfg.schedule.clone());
    if !c.no_checkpoints {
        job = job.with_checkpoints(c.out.join("checkpoints"));
    }
    let start_epoch = resume.as_ref().map_or(0, |s| s.epoch);
    if let Some(state) = resume {
        job = job.resume(state);
    }
    let outcome = run_training(job, &train, Some(&heldout))?;
    save_checkpoint(&outcome.model, &c.out.join("model.ctcg"))?;

    let metrics_path = c.out.join("metrics.csv");
    let mut csv = metrics_csv(&outcome.metrics);
    if start_epoch > 0 {
        csv = merge_metrics(&metrics_path, start_epoch, &csv)?;
    }
    fs::write(&metrics_path, csv)?;
    if let Some(EpochMetrics {
        epoch, heldout_ser, ..
    }) = outcome.metrics.last()
    {
        println!("epoch {epoch} heldout_ser {heldout_ser}");
    }
    Ok(())
}

/// Keeps rows up to `start_epoch` from an earlier metrics file and appends
/// the new rows.
fn merge_metrics(path: &Path, start_epoch: usize, new_csv: &str) -> Result<String> {
    let mut lines: Vec<String> = Vec::new();
    if let Ok(old) = fs::read_to_string(path) {
        for line in old.lines().skip(1) {
            let epoch: usize = line.split(',').next().and_then(|e| e.parse().ok()).unwrap_or(usize::MAX);
            if epoch <= start_epoch {
                lines.push(line.to_string());
            }
        }
    }
    let mut new = new_csv.lines();
    let mut out = format!("{}\n", new.next().unwrap_or_default());
    for line in lines.iter().map(String::as_str).chain(new) {
        out.push_str(line);
        out.push('\n');
    }
    Ok(out)
}

fn fusion_weights(weights: Vec<f64>, members: usize) -> Result<Vec<f64>> {
    if weights.is_empty() {
        return Ok(uniform_weights(members));
    }
    if weights.len() != members {
        return Err(Error::BadWeights(format!("{} weights for {members} models", weights.len())));
    }
    validate_weights(&weights)?;
    Ok(weights)
}

fn decode(a: ModelDataArgs) -> Result<()> {
    let model = load_checkpoint(&a.model)?;
    let data = load_data(&a.data)?;
    let hyps = decode_dataset(&model, &data)?;
    let mut out = BufWriter::new(std::io::stdout().lock());
    for (u, h) in data.utterances().iter().zip(&hyps) {
        writeln!(out, "{}\t{}", u.id, data.alphabet().format_target(h))?;
    }
    out.flush()?;
    Ok(())
}

fn eval(a: ModelDataArgs) -> Result<()> {
    let model = load_checkpoint(&a.model)?;
    let data = load_data(&a.data)?;
    println!("ser {}", evaluate_ser(&model, &data)?);
    Ok(())
}

fn fuse_eval(a: FuseEvalArgs) -> Result<()> {
    let models = a.models.iter().map(|p| load_checkpoint(p)).collect::<Result<Vec<_>>>()?;
    let weights = fusion_weights(a.weights, models.len())?;
    let data = load_data(&a.data)?;
    let refs: Vec<&SequenceModel> = models.iter().collect();
    let hyps = data
        .utterances()
        .iter()
        .map(|u| fused_posteriors(&refs, &weights, &u.features).map(|g| greedy_decode(&g)))
        .collect::<Result<Vec<_>>>()?;
    println!("ser {}", sequence_error_rate(&hyps, &data.targets())?);
    Ok(())
}

fn analyze_coverage(a: CoverageArgs) -> Result<()> {
    let data = load_data(&a.data)?;
    let spikes_a = model_spikes(&load_checkpoint(&a.model_a)?, &data, a.threshold)?;
    let spikes_b = model_spikes(&load_checkpoint(&a.model_b)?, &data, a.threshold)?;
    let opts = CoverageOptions {
        window: a.window,
        match_symbol: !a.frame_only,
    };
    let coverage = coverage_ratio(&spikes_a, &spikes_b, opts)?;
    println!("coverage {coverage}");
    if let Some(path) = &a.report {
        let row = CoverageRow {
            pair_name: a.pair_name,
            split: a.split,
            coverage_percent: coverage,
        };
        let csv = coverage_report_csv(&[row]);
        if path.exists() {
            let mut f = OpenOptions::new().append(true).open(path)?;
            f.write_all(csv.lines().nth(1).unwrap_or_default().as_bytes())?;
            f.write_all(b"\n")?;
        } else {
            fs::write(path, csv)?;
        }
    }
    Ok(())
}

fn dump(a: DumpArgs) -> Result<()> {
    let model = load_checkpoint(&a.model)?;
    let data = load_data(&a.data)?;
    let utt = data
        .get(&a.utterance_id)
        .ok_or_else(|| Error::UnknownUtterance(a.utterance_id.clone()))?;
    let grid = dump_posteriors(&model, utt, &a.out)?;
    println!("wrote {} frames", grid.num_frames());
    Ok(())
}

fn export_masks(a: ExportMasksArgs) -> Result<()> {
    let guiding = load_checkpoint(&a.guiding_model)?;
    let data = load_data(&a.data)?;
    let store = precompute_masks(&guiding, &data)?;
    let mut w = BufWriter::new(File::create(&a.out)?);
    write_mask_csv(&mut w, &store, data.alphabet())?;
    w.flush()?;
    if let Some(p) = &a.cache {
        save_mask_cache(&store, p)?;
    }
    println!("wrote masks for {} utterances", store.len());
    Ok(())
}
