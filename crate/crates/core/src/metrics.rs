//! Pixel-level segmentation metrics and the learning-curve CSV.
//!
//! Every metric is derived from one [`ConfusionMatrix`] so that accumulation
//! across samples is plain integer addition.

use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("mask shapes differ: {pred} vs {truth} pixels")]
    Shape { pred: usize, truth: usize },
    #[error("class label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("confusion matrices have {0} and {1} classes")]
    ClassCount(usize, usize),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("metrics csv row {row}: {msg}")]
    Csv { row: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// `C x C` pixel counts; entry `(i, j)` counts pixels of true class `i`
/// predicted as `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_masks(classes: usize, pred: &[u8], truth: &[u8]) -> Result<Self> {
        let mut m = Self::new(classes);
        m.add(pred, truth)?;
        Ok(m)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn add(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(MetricsError::Shape {
                pred: pred.len(),
                truth: truth.len(),
            });
        }
        let c = self.classes;
        if let Some(&label) = pred.iter().chain(truth).find(|&&l| l as usize >= c) {
            return Err(MetricsError::Label {
                label: label as usize,
                classes: c,
            });
        }
        for (&p, &t) in pred.iter().zip(truth) {
            self.counts[t as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.classes != self.classes {
            return Err(MetricsError::ClassCount(self.classes, other.classes));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn true_positives(&self, class: usize) -> u64 {
        self.get(class, class)
    }

    pub fn false_positives(&self, class: usize) -> u64 {
        (0..self.classes).filter(|&t| t != class).map(|t| self.get(t, class)).sum()
    }

    pub fn false_negatives(&self, class: usize) -> u64 {
        (0..self.classes).filter(|&p| p != class).map(|p| self.get(class, p)).sum()
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        (0..self.classes).map(|c| self.get(c, c)).sum::<u64>() as f64 / total as f64
    }

    /// `None` when the class is absent from both prediction and truth.
    pub fn iou(&self, class: usize) -> Option<f64> {
        let tp = self.true_positives(class);
        let union = tp + self.false_positives(class) + self.false_negatives(class);
        (union > 0).then(|| tp as f64 / union as f64)
    }

    /// `None` on a zero denominator.
    pub fn precision(&self, class: usize) -> Option<f64> {
        let tp = self.true_positives(class);
        let d = tp + self.false_positives(class);
        (d > 0).then(|| tp as f64 / d as f64)
    }

    pub fn recall(&self, class: usize) -> Option<f64> {
        let tp = self.true_positives(class);
        let d = tp + self.false_negatives(class);
        (d > 0).then(|| tp as f64 / d as f64)
    }

    /// `2TP / (2TP + FP + FN)`, equal to the harmonic mean of precision and
    /// recall whenever both are nonzero.
    pub fn f1(&self, class: usize) -> Option<f64> {
        let tp = self.true_positives(class);
        let d = 2 * tp + self.false_positives(class) + self.false_negatives(class);
        (d > 0).then(|| 2.0 * tp as f64 / d as f64)
    }

    /// Mean IoU over classes present in prediction or truth.
    pub fn mean_iou(&self) -> f64 {
        mean_present((0..self.classes).map(|c| self.iou(c)))
    }

    /// Mean IoU over present lesion classes (every class but background).
    pub fn lesion_mean_iou(&self) -> f64 {
        mean_present((1..self.classes).map(|c| self.iou(c)))
    }
}

fn mean_present(values: impl Iterator<Item = Option<f64>>) -> f64 {
    let present: Vec<f64> = values.flatten().collect();
    if present.is_empty() {
        1.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

/// IoU of one class between two label masks; 1.0 when both sets are empty.
pub fn iou(pred: &[u8], truth: &[u8], class: u8) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(MetricsError::Shape {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        let (a, b) = (p == class, t == class);
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SplitTag {
    Train,
    Val,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
        })
    }
}

impl FromStr for SplitTag {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(SplitTag::Train),
            "val" => Ok(SplitTag::Val),
            _ => Err(format!("unknown split tag `{s}`")),
        }
    }
}

/// One point of a learning curve.
///
/// `precision`, `recall` and `f1` hold lesion classes `1..C` in order;
/// entries whose denominator was zero are 0.0 and listed in `undefined` as
/// `prec_<c>` / `rec_<c>` / `f1_<c>`.  `undefined` is not persisted in CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: SplitTag,
    pub loss: f64,
    pub pixel_accuracy: f64,
    pub iou: Vec<f64>,
    pub iou_mean: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub undefined: Vec<String>,
}

impl MetricsRecord {
    pub fn from_confusion(epoch: usize, split: SplitTag, loss: f64, cm: &ConfusionMatrix) -> Self {
        let c = cm.classes();
        let mut undefined = Vec::new();
        let mut lesion = |name: &str, f: &dyn Fn(usize) -> Option<f64>| -> Vec<f64> {
            (1..c)
                .map(|k| {
                    f(k).unwrap_or_else(|| {
                        undefined.push(format!("{name}_{k}"));
                        0.0
                    })
                })
                .collect()
        };
        let precision = lesion("prec", &|k| cm.precision(k));
        let recall = lesion("rec", &|k| cm.recall(k));
        let f1 = lesion("f1", &|k| cm.f1(k));
        Self {
            epoch,
            split,
            loss,
            pixel_accuracy: cm.pixel_accuracy(),
            iou: (0..c).map(|k| cm.iou(k).unwrap_or(1.0)).collect(),
            iou_mean: cm.mean_iou(),
            precision,
            recall,
            f1,
            undefined,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.iou.len()
    }

    /// Metric values in CSV column order, after `epoch` and `split`.
    pub fn values(&self) -> Vec<f64> {
        let mut v = vec![self.loss, self.pixel_accuracy, self.iou_mean];
        v.extend(&self.iou);
        for k in 0..self.precision.len() {
            v.extend([self.precision[k], self.recall[k], self.f1[k]]);
        }
        v
    }
}

/// Column names for `classes` classes.
pub fn csv_header(classes: usize) -> Vec<String> {
    let mut h: Vec<String> = ["epoch", "split", "loss", "acc", "iou_mean"].map(String::from).to_vec();
    h.extend((0..classes).map(|c| format!("iou_{c}")));
    for c in 1..classes {
        h.extend([format!("prec_{c}"), format!("rec_{c}"), format!("f1_{c}")]);
    }
    h
}

/// Writes the history; an empty history with `classes` set still gets a header.
pub fn write_metrics<W: Write>(history: &[MetricsRecord], classes: usize, out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(csv_header(classes)).map_err(std::io::Error::other)?;
    for r in history {
        let mut row = vec![r.epoch.to_string(), r.split.to_string()];
        row.extend(r.values().iter().map(f64::to_string));
        w.write_record(&row).map_err(std::io::Error::other)?;
    }
    w.flush()
}

pub fn write_metrics_csv(history: &[MetricsRecord], classes: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io)?;
    write_metrics(history, classes, std::io::BufWriter::new(file)).map_err(io)
}

/// Parses a metrics CSV; the class count is inferred from the header.
pub fn parse_metrics<R: Read>(input: R) -> Result<Vec<MetricsRecord>> {
    let err = |row: usize, msg: String| MetricsError::Csv { row, msg };
    let mut rd = csv::ReaderBuilder::new().has_headers(false).from_reader(input);
    let mut rows = rd.records();
    let header = match rows.next() {
        Some(h) => h.map_err(|e| err(1, e.to_string()))?,
        None => return Err(err(1, "missing header".into())),
    };
    let classes = header.iter().filter(|h| h.starts_with("iou_") && *h != "iou_mean").count();
    if classes < 2 || header.iter().ne(csv_header(classes).iter().map(String::as_str)) {
        return Err(err(1, "unexpected header".into()));
    }
    let mut out = Vec::new();
    for (i, row) in rows.enumerate() {
        let n = i + 2;
        let row = row.map_err(|e| err(n, e.to_string()))?;
        if row.len() != header.len() {
            return Err(err(n, format!("expected {} fields, found {}", header.len(), row.len())));
        }
        let epoch = row[0].parse().map_err(|_| err(n, format!("bad epoch `{}`", &row[0])))?;
        let split = row[1].parse().map_err(|m| err(n, m))?;
        let mut vals = Vec::with_capacity(row.len() - 2);
        for field in row.iter().skip(2) {
            let v: f64 = field.parse().map_err(|_| err(n, format!("bad number `{field}`")))?;
            if !v.is_finite() {
                return Err(err(n, format!("non-finite value `{field}`")));
            }
            vals.push(v);
        }
        let lesion = classes - 1;
        let tail = &vals[3 + classes..];
        out.push(MetricsRecord {
            epoch,
            split,
            loss: vals[0],
            pixel_accuracy: vals[1],
            iou_mean: vals[2],
            iou: vals[3..3 + classes].to_vec(),
            precision: (0..lesion).map(|k| tail[3 * k]).collect(),
            recall: (0..lesion).map(|k| tail[3 * k + 1]).collect(),
            f1: (0..lesion).map(|k| tail[3 * k + 2]).collect(),
            undefined: Vec::new(),
        });
    }
    Ok(out)
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_metrics(std::io::BufReader::new(file))
}
