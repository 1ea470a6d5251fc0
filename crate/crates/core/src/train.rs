//! Mini-batch training with Adam, per-epoch evaluation and chunked
//! checkpoints.

use std::num::NonZeroUsize;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataset::{DatasetSplit, LabeledSample};
use crate::metrics::{ConfusionMatrix, MetricsRecord, SplitTag};
use crate::tensor::{Adam, AdamConfig, Real, Tape, Tensor, TensorError};
use crate::unet::{forward, ModelError, ModelWeights, Mode};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("sample `{id}` is {width}x{height}, model expects {size}x{size}")]
    SampleSize {
        id: String,
        width: usize,
        height: usize,
        size: usize,
    },
    #[error("non-finite loss at optimizer step {step} (epoch {epoch})")]
    NonFinite { step: usize, epoch: usize },
    #[error("sink failed: {0}")]
    Sink(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Checkpoint every `chunk_size` epochs, and after the last one.
    pub chunk_size: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Random horizontal flips with probability 0.5.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            chunk_size: 20,
            steps_per_epoch: 10,
            batch_size: 8,
            lr: 1e-3,
            seed: 42,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("epochs", self.epochs),
            ("chunk_size", self.chunk_size),
            ("steps_per_epoch", self.steps_per_epoch),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(TrainError::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(TrainError::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Receives results as training produces them.
pub trait TrainSink {
    fn on_record(&mut self, _record: &MetricsRecord) -> std::result::Result<(), String> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _epoch: usize, _weights: &ModelWeights<f32>) -> std::result::Result<(), String> {
        Ok(())
    }
}

/// Sink that discards everything.
pub struct NullSink;

impl TrainSink for NullSink {}

#[derive(Debug)]
pub struct TrainOutcome {
    pub weights: ModelWeights<f32>,
    pub history: Vec<MetricsRecord>,
    pub steps: usize,
}

fn check_size(sample: &LabeledSample, size: usize) -> Result<()> {
    let img = sample.image();
    if img.width() != size || img.height() != size {
        return Err(TrainError::SampleSize {
            id: sample.source_id().to_string(),
            width: img.width(),
            height: img.height(),
            size,
        });
    }
    Ok(())
}

/// Stacks samples into a `[N,1,S,S]` tensor and the flattened label vector.
pub fn batch_tensor<T: Real>(samples: &[&LabeledSample]) -> (Tensor<T>, Vec<usize>) {
    let first = samples[0].image();
    let (w, h) = (first.width(), first.height());
    let mut data = Vec::with_capacity(samples.len() * w * h);
    let mut labels = Vec::with_capacity(samples.len() * w * h);
    for s in samples {
        data.extend(s.image().pixels().iter().map(|&p| T::from_f64(p as f64)));
        labels.extend(s.mask().iter().map(|&m| m as usize));
    }
    let t = Tensor::new([samples.len(), 1, h, w], data).expect("samples share dimensions");
    (t, labels)
}

/// Per-pixel argmax over classes; exact ties go to the lowest class index.
pub fn argmax_channels<T: Real>(logits: &Tensor<T>) -> Vec<u8> {
    let [n, c, h, w] = logits.dims4("argmax").expect("logits are rank 4");
    let plane = h * w;
    let d = logits.data();
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        for p in 0..plane {
            let mut best = 0;
            for k in 1..c {
                if d[(b * c + k) * plane + p] > d[(b * c + best) * plane + p] {
                    best = k;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

/// Eval-mode prediction for one sample: the label map and per-pixel mean
/// cross-entropy.
pub fn predict(weights: &ModelWeights<f32>, sample: &LabeledSample) -> Result<(Vec<u8>, f64)> {
    check_size(sample, weights.config().input_size)?;
    let mut tape = Tape::<f32>::new();
    let (x, labels) = batch_tensor(&[sample]);
    let x = tape.constant(x);
    let pass = forward(weights, &mut tape, x, Mode::Eval, false)?;
    let loss = tape.cross_entropy_loss(pass.logits, &labels)?;
    Ok((argmax_channels(tape.value(pass.logits)), tape.value(loss).data()[0] as f64))
}

/// Evaluates every sample in eval mode, fanning out over `threads` workers.
/// Results do not depend on the worker count.
pub fn evaluate(
    weights: &ModelWeights<f32>,
    samples: &[LabeledSample],
    epoch: usize,
    split: SplitTag,
    threads: NonZeroUsize,
) -> Result<MetricsRecord> {
    if samples.is_empty() {
        return Err(TrainError::Config("cannot evaluate an empty sample list".into()));
    }
    let mut slots: Vec<Option<Result<(Vec<u8>, f64)>>> = (0..samples.len()).map(|_| None).collect();
    let per = samples.len().div_ceil(threads.get());
    std::thread::scope(|scope| {
        for (chunk, out) in samples.chunks(per).zip(slots.chunks_mut(per)) {
            scope.spawn(move || {
                for (s, o) in chunk.iter().zip(out) {
                    *o = Some(predict(weights, s));
                }
            });
        }
    });
    let classes = weights.config().num_classes;
    let mut cm = ConfusionMatrix::new(classes);
    let mut loss_sum = 0.0;
    let mut pixels = 0usize;
    for (s, slot) in samples.iter().zip(slots) {
        let (pred, loss) = slot.expect("every slot filled")?;
        cm.add(&pred, s.mask()).map_err(|e| TrainError::Config(e.to_string()))?;
        loss_sum += loss * pred.len() as f64;
        pixels += pred.len();
    }
    Ok(MetricsRecord::from_confusion(epoch, split, loss_sum / pixels as f64, &cm))
}

/// Runs `cfg.epochs` epochs of Adam on the training split.  Metric records
/// use 1-based epoch numbers.
pub fn train(
    mut weights: ModelWeights<f32>,
    data: &DatasetSplit,
    cfg: &TrainConfig,
    sink: &mut dyn TrainSink,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::Config("training split is empty".into()));
    }
    let size = weights.config().input_size;
    for s in data.train.iter().chain(&data.val) {
        check_size(s, size)?;
    }
    let one = NonZeroUsize::MIN;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut history = Vec::new();
    let mut step = 0;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut cursor = 0;
        for _ in 0..cfg.steps_per_epoch {
            let mut batch = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                let s = &data.train[order[cursor % order.len()]];
                cursor += 1;
                batch.push(if cfg.augment && rng.random_bool(0.5) {
                    s.flip_horizontal()
                } else {
                    s.clone()
                });
            }
            let refs: Vec<&LabeledSample> = batch.iter().collect();
            let (x, labels) = batch_tensor::<f32>(&refs);
            let mut tape = Tape::new();
            let x = tape.constant(x);
            let pass = forward(&weights, &mut tape, x, Mode::Train, true)?;
            let loss = tape.cross_entropy_loss(pass.logits, &labels)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(TrainError::NonFinite { step, epoch });
            }
            tape.backward(loss)?;
            weights.collect_grads(&tape, &pass);
            adam.step(weights.params_mut())?;
            weights.commit_moments(pass);
            // Batch normalization can hide diverged weights from the training
            // loss, so check the state the step produced.
            if !weights.all_finite() {
                return Err(TrainError::NonFinite { step, epoch });
            }
            step += 1;
        }
        for (split, samples) in [(SplitTag::Train, &data.train), (SplitTag::Val, &data.val)] {
            if samples.is_empty() {
                continue;
            }
            let record = evaluate(&weights, samples, epoch, split, one)?;
            if !record.loss.is_finite() {
                // Attributed to the last update; every epoch runs at least one.
                return Err(TrainError::NonFinite { step: step - 1, epoch });
            }
            log::info!(
                "epoch {epoch} {split}: loss {:.4} acc {:.4} mIoU {:.4}",
                record.loss,
                record.pixel_accuracy,
                record.iou_mean
            );
            sink.on_record(&record).map_err(TrainError::Sink)?;
            history.push(record);
        }
        if epoch % cfg.chunk_size == 0 || epoch == cfg.epochs {
            sink.on_checkpoint(epoch, &weights).map_err(TrainError::Sink)?;
        }
    }
    Ok(TrainOutcome {
        weights,
        history,
        steps: step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_counts_rejected() {
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        assert!(matches!(cfg.validate(), Err(TrainError::Config(_))));
        let cfg = TrainConfig { lr: 0.0, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn argmax_ties_go_low() {
        let t = Tensor::<f32>::new([1, 3, 1, 2], vec![1.0, 0.0, 1.0, 2.0, 0.5, 2.0]).unwrap();
        assert_eq!(argmax_channels(&t), vec![0, 1]);
    }
}
