//! Brute-force per-pixel counting, independent of the confusion matrix.

use rand::Rng;
use seg_forge_core::metrics::{iou, ConfusionMatrix, MetricsRecord, SplitTag};

use super::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

pub fn count(pred: &[u8], truth: &[u8], class: u8) -> Counts {
    let mut c = Counts { tp: 0, fp: 0, fn_: 0 };
    for i in 0..pred.len() {
        match (pred[i] == class, truth[i] == class) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    c
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn random_mask(r: &mut rand_chacha::ChaCha8Rng, n: usize, classes: u8) -> Vec<u8> {
    (0..n).map(|_| r.random_range(0..classes)).collect()
}

/// Checks every confusion-matrix metric against brute force on one pair.
pub fn check_pair(pred: &[u8], truth: &[u8], classes: u8) -> Result<(), String> {
    let cm = ConfusionMatrix::from_masks(classes as usize, pred, truth).map_err(|e| e.to_string())?;
    let correct = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    if cm.total() != pred.len() as u64 {
        return Err(format!("total {} != {}", cm.total(), pred.len()));
    }
    if cm.pixel_accuracy() != correct as f64 / pred.len() as f64 {
        return Err("pixel accuracy differs".into());
    }
    for c in 0..classes {
        let k = count(pred, truth, c);
        let ci = c as usize;
        let got = (cm.true_positives(ci), cm.false_positives(ci), cm.false_negatives(ci));
        if got != (k.tp, k.fp, k.fn_) {
            return Err(format!("class {c}: counts {got:?} vs brute force {k:?}"));
        }
        let checks = [
            ("iou", cm.iou(ci), ratio(k.tp, k.tp + k.fp + k.fn_)),
            ("precision", cm.precision(ci), ratio(k.tp, k.tp + k.fp)),
            ("recall", cm.recall(ci), ratio(k.tp, k.tp + k.fn_)),
            ("f1", cm.f1(ci), ratio(2 * k.tp, 2 * k.tp + k.fp + k.fn_)),
        ];
        for (name, a, b) in checks {
            if a != b {
                return Err(format!("class {c}: {name} {a:?} vs brute force {b:?}"));
            }
        }
        let direct = iou(pred, truth, c).map_err(|e| e.to_string())?;
        if direct != cm.iou(ci).unwrap_or(1.0) {
            return Err(format!("class {c}: iou() {direct} disagrees with the matrix"));
        }
    }
    let record = MetricsRecord::from_confusion(0, SplitTag::Val, 0.0, &cm);
    for k in 0..record.f1.len() {
        let (p, r) = (record.precision[k], record.recall[k]);
        if p > 0.0 && r > 0.0 && (record.f1[k] - 2.0 * p * r / (p + r)).abs() > 1e-9 {
            return Err(format!("lesion class {}: f1 is not the harmonic mean", k + 1));
        }
    }
    Ok(())
}

/// `pairs` random 8x8 3-class mask pairs; returns the number checked.
pub fn check_random_pairs(pairs: u64) -> Result<u64, String> {
    for seed in 0..pairs {
        let mut r = rng(5000 + seed);
        // Skew some pairs toward background so absent classes occur.
        let classes = if seed % 5 == 0 { 2 } else { 3 };
        let mut pred = random_mask(&mut r, 64, classes);
        let truth = random_mask(&mut r, 64, classes);
        if seed % 7 == 0 {
            pred = truth.clone();
        }
        check_pair(&pred, &truth, 3).map_err(|e| format!("pair {seed}: {e}"))?;
    }
    Ok(pairs)
}

/// Largest deviation between confusion-matrix F1 and `2 IoU / (1 + IoU)`
/// (and the direct Dice count) over binary collapses of random masks.
pub fn dice_identity_deviation(pairs: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..pairs {
        let mut r = rng(6000 + seed);
        let n = 64;
        let density = r.random_range(0.05..0.95);
        let pred: Vec<u8> = (0..n).map(|_| r.random_bool(density) as u8).collect();
        let truth: Vec<u8> = (0..n).map(|_| r.random_bool(density) as u8).collect();
        let cm = ConfusionMatrix::from_masks(2, &pred, &truth).unwrap();
        let (Some(j), Some(f1)) = (cm.iou(1), cm.f1(1)) else {
            continue;
        };
        let dice = 2.0 * j / (1.0 + j);
        let inter = pred.iter().zip(&truth).filter(|(a, b)| **a == 1 && **b == 1).count();
        let sizes = pred.iter().filter(|&&a| a == 1).count() + truth.iter().filter(|&&b| b == 1).count();
        let direct = 2.0 * inter as f64 / sizes as f64;
        worst = worst.max((f1 - dice).abs()).max((f1 - direct).abs());
    }
    worst
}
