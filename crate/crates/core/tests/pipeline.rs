use ctcg_core::data::{generate_split, SyntheticTaskSpec};
use ctcg_core::ensemble::precompute_teachers;
use ctcg_core::guided::{build_mask, precompute_masks};
use ctcg_core::seqmodel::load_checkpoint;
use ctcg_core::trainer::{
    checkpoint_name, evaluate_ser, load_optimizer_state, metrics_csv, optimizer_state_name, run_training,
    TrainingOutcome,
};
use ctcg_core::*;

fn small_spec() -> SyntheticTaskSpec {
    SyntheticTaskSpec {
        alphabet_size: 3,
        input_dim: 4,
        min_symbols: 1,
        max_symbols: 3,
        min_segment: 2,
        max_segment: 4,
        noise_stddev: 0.2,
        prototype_scale: 1.0,
        allow_repeats: false,
        seed: 5,
    }
}

fn small_model(data: &Dataset, direction: Direction, seed: u64) -> SequenceModel {
    SequenceModel::init(ModelConfig {
        input_dim: data.input_dim(),
        hidden_dim: 8,
        num_layers: 1,
        direction,
        output_dim: data.alphabet().num_outputs(),
        seed,
    })
    .unwrap()
}

fn schedule(epochs: usize) -> TrainingSchedule {
    TrainingSchedule {
        epochs,
        batch_size: 8,
        anneal_start_epoch: 3,
        seed: 9,
        ..Default::default()
    }
}

fn train_ctc(train: &Dataset, heldout: &Dataset, epochs: usize) -> TrainingOutcome {
    let job = TrainingJob::new(small_model(train, Direction::Unidirectional, 1), LossMode::Ctc, schedule(epochs));
    run_training(job, train, Some(heldout)).unwrap()
}

#[test]
fn training_lowers_loss_and_error() {
    let (train, heldout) = generate_split(&small_spec(), 120, 40).unwrap();
    let untrained = evaluate_ser(&small_model(&train, Direction::Unidirectional, 1), &heldout).unwrap();
    let out = train_ctc(&train, &heldout, 6);
    let first = out.metrics.first().unwrap();
    let last = out.metrics.last().unwrap();
    assert!(last.mean_train_loss < first.mean_train_loss);
    assert!(last.heldout_ser < untrained, "{} vs {untrained}", last.heldout_ser);
}

#[test]
fn identical_jobs_give_identical_metrics() {
    let (train, heldout) = generate_split(&small_spec(), 60, 20).unwrap();
    let a = train_ctc(&train, &heldout, 3);
    let b = train_ctc(&train, &heldout, 3);
    assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
    assert_eq!(a.model, b.model);
}

#[test]
fn thread_count_does_not_change_results() {
    let (train, heldout) = generate_split(&small_spec(), 40, 10).unwrap();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| train_ctc(&train, &heldout, 2))
    };
    let one = run(1);
    let three = run(3);
    assert_eq!(one.model, three.model);
    assert_eq!(metrics_csv(&one.metrics), metrics_csv(&three.metrics));
}

#[test]
fn resuming_from_a_checkpoint_is_bit_exact() {
    let (train, heldout) = generate_split(&small_spec(), 50, 10).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let model = small_model(&train, Direction::Unidirectional, 4);
    let full = run_training(
        TrainingJob::new(model.clone(), LossMode::Ctc, schedule(4)).with_checkpoints(dir.path()),
        &train,
        Some(&heldout),
    )
    .unwrap();

    let saved = load_checkpoint(&dir.path().join(checkpoint_name(2))).unwrap();
    let state = load_optimizer_state(&dir.path().join(optimizer_state_name(2))).unwrap();
    assert_eq!(state.epoch, 2);
    let resumed = run_training(
        TrainingJob::new(saved, LossMode::Ctc, schedule(4)).resume(state),
        &train,
        Some(&heldout),
    )
    .unwrap();
    let bits = |m: &SequenceModel| m.params().iter().map(|p| p.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&resumed.model), bits(&full.model));
    assert_eq!(resumed.metrics, full.metrics[2..]);
    assert_eq!(load_checkpoint(&dir.path().join(checkpoint_name(4))).unwrap(), full.model);
}

#[test]
fn precomputed_masks_match_fresh_masks() {
    let (train, _) = generate_split(&small_spec(), 30, 1).unwrap();
    let guiding = small_model(&train, Direction::Unidirectional, 2);
    let store = precompute_masks(&guiding, &train).unwrap();
    assert_eq!(store.len(), train.len());
    for utt in train.utterances() {
        let fresh = build_mask(&guiding.posteriors(&utt.features).unwrap());
        assert_eq!(store.get(&utt.id).unwrap(), &fresh);
    }
}

#[test]
fn precompute_masks_edge_cases() {
    let (train, _) = generate_split(&small_spec(), 5, 1).unwrap();
    let empty = Dataset::new(train.alphabet().clone(), train.input_dim(), vec![]).unwrap();
    let guiding = small_model(&train, Direction::Unidirectional, 2);
    assert!(precompute_masks(&guiding, &empty).unwrap().is_empty());

    let wrong = SequenceModel::init(ModelConfig {
        output_dim: 9,
        ..guiding.config().clone()
    })
    .unwrap();
    assert!(matches!(precompute_masks(&wrong, &train), Err(Error::AlphabetMismatch(_))));
}

#[test]
fn guided_training_pulls_spikes_toward_the_guide() {
    let (train, heldout) = generate_split(&small_spec(), 80, 20).unwrap();
    let guiding = train_ctc(&train, &heldout, 4).model;
    let masks = precompute_masks(&guiding, &train).unwrap();
    let guide_loss = |m: &SequenceModel| -> f64 {
        train
            .utterances()
            .iter()
            .map(|u| {
                let g = m.posteriors(&u.features).unwrap();
                guided::guide_loss(&g, masks.get(&u.id).unwrap(), GuideVariant::Linear).unwrap().0
            })
            .sum()
    };
    let start = small_model(&train, Direction::Bidirectional, 7);
    let before = guide_loss(&start);
    let job = TrainingJob::new(
        start,
        LossMode::Guided {
            masks: &masks,
            config: GuidedLossConfig::default(),
        },
        schedule(3),
    );
    let after = guide_loss(&run_training(job, &train, Some(&heldout)).unwrap().model);
    assert!(after < before, "{after} vs {before}");
}

#[test]
fn distillation_runs_on_fused_teachers() {
    let (train, heldout) = generate_split(&small_spec(), 40, 10).unwrap();
    let a = small_model(&train, Direction::Bidirectional, 1);
    let b = small_model(&train, Direction::Bidirectional, 2);
    let teachers = precompute_teachers(&[&a, &b], &[0.5, 0.5], &train).unwrap();
    let job = TrainingJob::new(
        small_model(&train, Direction::Unidirectional, 3),
        LossMode::Distill {
            teachers: &teachers,
            kd_weight: 1.0,
        },
        schedule(2),
    );
    let out = run_training(job, &train, Some(&heldout)).unwrap();
    assert!(out.metrics.iter().all(|m| m.mean_train_loss.is_finite() && m.mean_train_loss >= 0.0));
}

#[test]
fn mismatched_model_is_rejected_before_training() {
    let (train, heldout) = generate_split(&small_spec(), 5, 2).unwrap();
    let model = SequenceModel::init(ModelConfig {
        input_dim: 3,
        hidden_dim: 2,
        num_layers: 1,
        direction: Direction::Unidirectional,
        output_dim: 4,
        seed: 0,
    })
    .unwrap();
    let err = run_training(TrainingJob::new(model, LossMode::Ctc, schedule(1)), &train, Some(&heldout)).unwrap_err();
    assert!(matches!(err, Error::DimensionMismatch { expected: 3, found: 4 }));
}
