use alloc::vec;
use alloc::vec::Vec;

use super::*;
use crate::datamodel::{IGNORE, OTHER, TC_NEGATIVE};
use crate::losses::cross_entropy;
use crate::synth::{make_splits, SplitSizes, SynthConfig};

fn tiny_data(annotation_fraction: f64) -> DatasetSplit {
    let cfg = SynthConfig { patch_size: 32, blob_scale: (4.0, 8.0), ..SynthConfig::default() };
    let sizes = SplitSizes { train_a: 8, train_b: 8, test: 4, validation: 4, annotation_fraction };
    make_splits(&cfg, &sizes).unwrap()
}

fn tiny_config(mode: TrainMode) -> TrainConfig {
    let mut arch = ArchConfig::default();
    arch.generator.base_filters = 4;
    arch.generator.max_filters = 16;
    arch.generator.num_resnet_blocks = 1;
    arch.discriminator.base_filters = 4;
    arch.discriminator.max_filters = 16;
    arch.discriminator.seg_resnet_blocks = 1;
    arch.discriminator.attention_reduction = 2;
    TrainConfig { mode, iterations: 4, batch_size: 2, checkpoint_every: 2, arch, seed: 3, ..TrainConfig::default() }
}

fn first_batch(data: &DatasetSplit) -> (Vec<Example>, Vec<Example>) {
    let b = conditioned_b(&data.train_b, None).unwrap();
    (data.train_a[..2].to_vec(), vec![b[0].clone(), b[3].clone()])
}

fn record(iteration: u64, mean: Option<f64>) -> CheckpointRecord {
    let f1 = mean.map(|mean| F1Report {
        other: Some(mean),
        tc_negative: Some(mean),
        tc_positive: Some(mean),
        tc: Some(mean),
        mean,
        binary_mean: mean,
    });
    CheckpointRecord { iteration, phase: Phase::Joint, f1 }
}

#[test]
fn select_model_examples() {
    assert_eq!(select_model(&[record(5, Some(0.4))]).unwrap().iteration, 5);
    let seq = [record(1, Some(0.5)), record(2, Some(0.7)), record(3, Some(0.6))];
    assert_eq!(select_model(&seq).unwrap().iteration, 2);
    let tie = [record(1, Some(0.7)), record(2, Some(0.7))];
    assert_eq!(select_model(&tie).unwrap().iteration, 2);
    assert!(matches!(select_model(&[]), Err(Error::NoCheckpoints)));
    assert!(matches!(select_model(&[record(1, None)]), Err(Error::NoCheckpoints)));
    assert_eq!(select_model(&[record(1, Some(0.2)), record(2, None)]).unwrap().iteration, 1);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    let bad = [
        TrainConfig { g_lr: 0.0, ..TrainConfig::default() },
        TrainConfig { d_lr: -1.0, ..TrainConfig::default() },
        TrainConfig { iterations: 0, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { mode: TrainMode::TwoStep, iterations: 1, ..TrainConfig::default() },
        TrainConfig { mode: TrainMode::TwoStep, phase_one_fraction: 1.0, ..TrainConfig::default() },
    ];
    for cfg in bad {
        assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
    }
    let two =
        TrainConfig { mode: TrainMode::TwoStep, iterations: 10, phase_one_fraction: 0.3, ..TrainConfig::default() };
    assert_eq!(two.phase_one_iterations(), 3);
    assert_eq!(TrainConfig::default().phase_one_iterations(), 0);
}

#[test]
fn sampler_visits_every_index_once_per_epoch() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut s = Sampler::new(5);
    for _ in 0..3 {
        let mut epoch = s.draw(5, &mut rng);
        epoch.sort_unstable();
        assert_eq!(epoch, [0, 1, 2, 3, 4]);
    }
}

#[test]
fn domain_a_batches_reserve_annotated_slots() {
    let data = tiny_data(0.25);
    let annotated = |i: usize| data.train_a[i].1.labeled_pixels() > 0;
    assert!((0..data.train_a.len()).any(annotated));
    assert!(!(0..data.train_a.len()).all(annotated));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut s = DomainASampler::new(&data.train_a);
    for _ in 0..20 {
        let batch = s.draw(4, 2, &mut rng);
        assert_eq!(batch.len(), 4);
        assert_eq!(batch.iter().filter(|&&i| annotated(i)).count(), 2);
    }
    let full = tiny_data(1.0);
    let mut s = DomainASampler::new(&full.train_a);
    assert_eq!(s.draw(4, 2, &mut rng).len(), 4);
}

#[test]
fn conditioned_b_has_both_variants() {
    let data = tiny_data(1.0);
    let b = conditioned_b(&data.train_b, None).unwrap();
    assert_eq!(b.len(), 2 * data.train_b.len());
    for (pair, (_, orig)) in b.chunks(2).zip(&data.train_b) {
        for (l, o) in pair[0].1.labels.iter().zip(&orig.labels) {
            assert_eq!(*l, if *o == OTHER { OTHER } else { TC_NEGATIVE });
        }
        for (l, o) in pair[1].1.labels.iter().zip(&orig.labels) {
            assert_eq!(*l, if *o == OTHER { OTHER } else { TC_POSITIVE });
        }
        assert_eq!(pair[0].0, pair[1].0);
    }
}

#[test]
fn train_step_is_deterministic() {
    let data = tiny_data(1.0);
    let (a, b) = first_batch(&data);
    let run = || {
        let mut state = TrainState::<f32>::new(tiny_config(TrainMode::Dasgan)).unwrap();
        let ar: Vec<&Example> = a.iter().collect();
        let br: Vec<&Example> = b.iter().collect();
        let reports: Vec<StepReport> = (0..2).map(|_| state.train_step(&Batch::new(&ar, &br)).unwrap()).collect();
        (reports, state.bundle)
    };
    let (r1, b1) = run();
    let (r2, b2) = run();
    assert_eq!(r1, r2);
    for id in NetworkId::ALL {
        assert_eq!(b1.store(id), b2.store(id));
    }
    assert!(r1.iter().all(|r| r.losses.is_finite() && r.losses.seg > 0.0));
}

#[test]
fn one_step_updates_every_network() {
    let data = tiny_data(1.0);
    let (a, b) = first_batch(&data);
    let mut state = TrainState::<f32>::new(tiny_config(TrainMode::Dasgan)).unwrap();
    let before = state.bundle.clone();
    let ar: Vec<&Example> = a.iter().collect();
    let br: Vec<&Example> = b.iter().collect();
    state.train_step(&Batch::new(&ar, &br)).unwrap();
    assert_eq!(state.iteration, 1);
    for id in NetworkId::ALL {
        let changed =
            before.store(id).params.iter().zip(&state.bundle.store(id).params).any(|(p, q)| p.value != q.value);
        assert!(changed, "{} did not move", id.name());
    }
}

#[test]
fn updates_are_isolated() {
    let data = tiny_data(1.0);
    let (a, b) = first_batch(&data);
    let ar: Vec<&Example> = a.iter().collect();
    let br: Vec<&Example> = b.iter().collect();
    let batch = Batch::new(&ar, &br);
    let start = TrainState::<f32>::new(tiny_config(TrainMode::Dasgan)).unwrap();

    let mut full = start.clone();
    full.train_step(&batch).unwrap();

    // replay only the discriminator half; a cold pool returns the fresh fakes
    let mut half = start.clone();
    for id in NetworkId::ALL {
        half.bundle.store_mut(id).refresh_spectral(1);
    }
    let fresh_a: Vec<Example> = half
        .bundle
        .g_ba
        .translate(&batch.images_b, &batch.masks_b)
        .unwrap()
        .into_iter()
        .zip(&batch.masks_b)
        .map(|(p, m)| (p, (*m).clone()))
        .collect();
    let fresh_b: Vec<Example> = half
        .bundle
        .g_ab
        .translate(&batch.images_a, &batch.masks_a)
        .unwrap()
        .into_iter()
        .zip(&batch.masks_a)
        .map(|(p, m)| (p, (*m).clone()))
        .collect();
    let weights = half.config.weights;
    half.discriminator_update(&batch, &fresh_a, &fresh_b, &weights, 1).unwrap();

    for id in [NetworkId::GAb, NetworkId::GBa] {
        let same = start.bundle.store(id).params == half.bundle.store(id).params;
        assert!(same, "discriminator update moved {}", id.name());
    }
    for id in [NetworkId::DA, NetworkId::DB] {
        assert_eq!(full.bundle.store(id).params, half.bundle.store(id).params, "generator update moved {}", id.name());
    }
}

#[test]
fn zero_segmentation_weight_reduces_to_translation_losses() {
    let mut data = tiny_data(0.0);
    assert!(data.train_a.iter().all(|(_, m)| m.labels.iter().all(|l| *l == IGNORE)));
    data.test.clear();
    let mut cfg = tiny_config(TrainMode::Dasgan);
    cfg.weights.lambda_seg = 0.0;
    struct Check(usize);
    impl Observer<f32> for Check {
        fn on_step(&mut self, _: &TrainState<f32>, r: &StepReport) -> Result<()> {
            let l = r.losses;
            assert_eq!(l.seg, 0.0);
            assert_eq!(r.discriminator.unwrap().seg, 0.0);
            assert!((l.total - (l.gan_ab + l.gan_ba + 10.0 * l.cycle)).abs() < 1e-5);
            self.0 += 1;
            Ok(())
        }
    }
    let mut check = Check(0);
    let state = train_with::<f32, _>(cfg, &data, &mut check).unwrap();
    assert_eq!(check.0, 4);
    assert_eq!(state.checkpoints.len(), 2);
    assert!(state.checkpoints.iter().all(|c| c.f1.is_none()));
}

#[test]
fn two_step_materializes_before_supervised_phase() {
    #[derive(Default)]
    struct Trace(Vec<(Phase, u64)>, Option<usize>);
    impl Observer<f32> for Trace {
        fn on_step(&mut self, _: &TrainState<f32>, r: &StepReport) -> Result<()> {
            self.0.push((r.phase, r.iteration));
            Ok(())
        }
        fn on_synthetic(&mut self, examples: &[Example]) -> Result<()> {
            assert!(examples.iter().all(|(p, m)| p.domain == Domain::A && m.domain == Domain::A));
            self.1 = Some(self.0.len());
            Ok(())
        }
    }
    let data = tiny_data(0.5);
    let mut trace = Trace::default();
    let state = train_with::<f32, _>(tiny_config(TrainMode::TwoStep), &data, &mut trace).unwrap();
    let phases: Vec<Phase> = trace.0.iter().map(|p| p.0).collect();
    assert_eq!(phases, [Phase::Translation, Phase::Translation, Phase::Supervised, Phase::Supervised]);
    assert_eq!(trace.1, Some(2));
    assert_eq!(trace.0.iter().map(|p| p.1).collect::<Vec<_>>(), [1, 2, 3, 4]);
    assert!(state.checkpoints[0].f1.is_none());
    assert!(state.checkpoints[1].f1.is_some());
    assert!(state.segmenter.as_ref().is_some_and(|s| !s.spec.source_head));
}

#[test]
fn synthetic_ids_carry_variant() {
    let data = tiny_data(1.0);
    let state = TrainState::<f32>::new(tiny_config(TrainMode::SegOnlySynth)).unwrap();
    let b = conditioned_b(&data.train_b[..1], None).unwrap();
    let synth = materialize_synthetic(&state.bundle, &b).unwrap();
    assert_eq!(synth[0].0.id, format!("{}-neg", data.train_b[0].0.id));
    assert_eq!(synth[1].0.id, format!("{}-pos", data.train_b[0].0.id));
    assert_eq!(synth[1].1.labels, b[1].1.labels);
}

#[test]
fn missing_data_is_reported() {
    let mut data = tiny_data(0.0);
    assert!(matches!(train::<f32>(tiny_config(TrainMode::SegOnlyReal), &data), Err(Error::InvalidInput(_))));
    data.train_b.clear();
    assert!(matches!(train::<f32>(tiny_config(TrainMode::Dasgan), &data), Err(Error::InvalidInput(_))));
}

fn mean_train_ce(model: &Discriminator<f32>, examples: &[Example]) -> f64 {
    let refs: Vec<&ImagePatch> = examples.iter().map(|e| &e.0).collect();
    let preds = model.predict(&refs).unwrap();
    preds.iter().zip(examples).map(|((_, p), (_, m))| cross_entropy(m, p).unwrap()).sum::<f64>() / examples.len() as f64
}

#[test]
fn supervised_cross_entropy_decreases() {
    let data = tiny_data(1.0);
    let mut cfg = tiny_config(TrainMode::SegOnlyReal);
    cfg.iterations = 500;
    cfg.checkpoint_every = 100;
    let initial = TrainState::<f32>::new(cfg.clone()).unwrap();
    let before = mean_train_ce(initial.segmentation_model(), &data.train_a);

    struct Best(Option<f64>);
    impl Observer<f32> for Best {
        fn on_checkpoint(&mut self, state: &TrainState<f32>, _: &CheckpointRecord) -> Result<()> {
            assert!(state.best_f1 >= self.0, "best F1 decreased");
            self.0 = state.best_f1;
            Ok(())
        }
    }
    let state = train_with::<f32, _>(cfg, &data, &mut Best(None)).unwrap();
    let after = mean_train_ce(state.segmentation_model(), &data.train_a);
    assert!(after < before, "CE {before} -> {after}");
    assert_eq!(state.checkpoints.len(), 5);
    let best = select_model(&state.checkpoints).unwrap();
    assert_eq!(Some(best.iteration), state.best_iteration);
    assert_eq!(best.f1.map(|f| f.mean), state.best_f1);
}
