use std::num::NonZeroUsize;

use seg_forge_core::dataset::{generate_synthetic, split, ClassTag, DatasetSplit, LabeledSample, SyntheticSpec};
use seg_forge_core::metrics::{ConfusionMatrix, MetricsRecord, SplitTag};
use seg_forge_core::train::{evaluate, predict, train, NullSink, TrainConfig, TrainError, TrainSink};
use seg_forge_core::unet::{build, ModelConfig, ModelWeights};

fn small() -> ModelConfig {
    ModelConfig {
        depth: 1,
        base_channels: 4,
        num_classes: 3,
        input_size: 16,
    }
}

fn data(seed: u64) -> DatasetSplit {
    let corpus = generate_synthetic(&SyntheticSpec::per_class(5, 16, seed)).unwrap();
    split(&corpus.samples, 0.8, seed).unwrap()
}

fn quick(epochs: usize, steps: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        steps_per_epoch: steps,
        batch_size: 4,
        chunk_size: 2,
        ..TrainConfig::default()
    }
}

#[derive(Default)]
struct Recorder {
    records: Vec<(usize, SplitTag)>,
    checkpoints: Vec<usize>,
}

impl TrainSink for Recorder {
    fn on_record(&mut self, r: &MetricsRecord) -> Result<(), String> {
        self.records.push((r.epoch, r.split));
        Ok(())
    }
    fn on_checkpoint(&mut self, epoch: usize, _: &ModelWeights<f32>) -> Result<(), String> {
        self.checkpoints.push(epoch);
        Ok(())
    }
}

#[test]
fn single_step_moves_every_parameter() {
    let w0 = build::<f32>(&small(), 1).unwrap();
    let out = train(w0.clone(), &data(1), &quick(1, 1), &mut NullSink).unwrap();
    assert_eq!(out.steps, 1);
    assert_eq!(out.history.len(), 2);
    for (name, p) in w0.params() {
        assert_ne!(out.weights.param(name).unwrap().data(), p.data(), "{name}");
    }
}

#[test]
fn same_seed_same_run() {
    let d = data(2);
    let w = build::<f32>(&small(), 2).unwrap();
    let a = train(w.clone(), &d, &quick(2, 3), &mut NullSink).unwrap();
    let b = train(w.clone(), &d, &quick(2, 3), &mut NullSink).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.weights, b.weights);
    let other = TrainConfig { seed: 43, ..quick(2, 3) };
    let c = train(w, &d, &other, &mut NullSink).unwrap();
    assert_ne!(a.weights, c.weights);
}

#[test]
fn sink_sees_records_and_chunk_checkpoints() {
    let mut sink = Recorder::default();
    let w = build::<f32>(&small(), 3).unwrap();
    train(w, &data(3), &quick(5, 1), &mut sink).unwrap();
    assert_eq!(sink.checkpoints, vec![2, 4, 5]);
    let expected: Vec<_> = (1..=5).flat_map(|e| [(e, SplitTag::Train), (e, SplitTag::Val)]).collect();
    assert_eq!(sink.records, expected);
}

#[test]
fn nan_weight_aborts_at_first_step() {
    let mut w = build::<f32>(&small(), 4).unwrap();
    w.param_mut("head.bias").unwrap().data_mut()[0] = f32::NAN;
    let err = train(w, &data(4), &quick(1, 1), &mut NullSink).unwrap_err();
    assert!(matches!(err, TrainError::NonFinite { step: 0, epoch: 1 }), "{err}");
}

#[test]
fn diverging_run_aborts_instead_of_saving_garbage() {
    let mut sink = Recorder::default();
    let w = build::<f32>(&small(), 4).unwrap();
    let cfg = TrainConfig { lr: 1e30, batch_size: 2, ..quick(3, 3) };
    let err = train(w, &data(4), &cfg, &mut sink).unwrap_err();
    assert!(matches!(err, TrainError::NonFinite { epoch: 1, .. }), "{err}");
    assert!(sink.checkpoints.is_empty());
}

#[test]
fn wrong_sample_size_is_rejected() {
    let w = build::<f32>(&ModelConfig { input_size: 32, ..small() }, 4).unwrap();
    let err = train(w, &data(4), &quick(1, 1), &mut NullSink).unwrap_err();
    assert!(matches!(err, TrainError::SampleSize { size: 32, .. }), "{err}");
}

#[test]
fn evaluation_is_independent_of_batching_and_workers() {
    let w = build::<f32>(&small(), 5).unwrap();
    let samples = generate_synthetic(&SyntheticSpec::per_class(3, 16, 6)).unwrap().samples;
    let n = |k| NonZeroUsize::new(k).unwrap();
    let serial = evaluate(&w, &samples, 1, SplitTag::Val, n(1)).unwrap();
    for threads in [2, 4, 16] {
        assert_eq!(evaluate(&w, &samples, 1, SplitTag::Val, n(threads)).unwrap(), serial);
    }
    let mut cm = ConfusionMatrix::new(3);
    let mut loss = 0.0;
    for s in &samples {
        let (pred, l) = predict(&w, s).unwrap();
        cm.add(&pred, s.mask()).unwrap();
        loss += l;
    }
    let by_hand = MetricsRecord::from_confusion(1, SplitTag::Val, loss / samples.len() as f64, &cm);
    assert_eq!(by_hand.iou, serial.iou);
    assert_eq!(by_hand.pixel_accuracy, serial.pixel_accuracy);
    assert!((by_hand.loss - serial.loss).abs() < 1e-9);
}

#[test]
fn background_only_model_is_perfect_on_normal_samples() {
    let mut w = build::<f32>(&small(), 6).unwrap();
    w.param_mut("head.weight").unwrap().data_mut().fill(0.0);
    w.param_mut("head.bias").unwrap().data_mut().copy_from_slice(&[5.0, 0.0, 0.0]);
    let normal: Vec<LabeledSample> = generate_synthetic(&SyntheticSpec::per_class(4, 16, 7))
        .unwrap()
        .samples
        .into_iter()
        .filter(|s| s.class_tag() == ClassTag::Normal)
        .collect();
    let r = evaluate(&w, &normal, 0, SplitTag::Val, NonZeroUsize::MIN).unwrap();
    assert_eq!(r.pixel_accuracy, 1.0);
    assert_eq!(r.iou[0], 1.0);
    assert!(r.undefined.contains(&"prec_1".to_string()));
    assert!(r.undefined.contains(&"rec_2".to_string()));
}

#[test]
fn empty_evaluation_is_an_error() {
    let w = build::<f32>(&small(), 6).unwrap();
    assert!(evaluate(&w, &[], 0, SplitTag::Val, NonZeroUsize::MIN).is_err());
}
