use std::fs;
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};

use seg_forge_core::config::RunConfig;
use seg_forge_core::dataset::{
    class_stats, export_busi, fingerprint, generate_synthetic, scan_busi, split, DatasetError, DatasetSplit,
    LabeledSample, PIXEL_CLASS_NAMES,
};
use seg_forge_core::gradcam::{gradcam, overlay, GradcamError, Heatmap, ProbeSpec};
use seg_forge_core::image::{clahe, entropy, load_png, rms_contrast, save_png, save_rgb_png, GrayImage, ImageError};
use seg_forge_core::metrics::{write_metrics_csv, MetricsError, MetricsRecord, SplitTag};
use seg_forge_core::train::{self, batch_tensor, evaluate, predict, TrainError, TrainSink};
use seg_forge_core::unet::{build, load_weights, save_weights, CheckpointError, ModelError, ModelWeights};

use crate::Failure;

impl From<ImageError> for Failure {
    fn from(e: ImageError) -> Self {
        match e {
            ImageError::Invalid(_)
            | ImageError::TooSmallForTiles { .. }
            | ImageError::Config(_)
            | ImageError::Dimensions { .. } => Failure::Config(e.to_string()),
            _ => Failure::Io(e.to_string()),
        }
    }
}

impl From<DatasetError> for Failure {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Image(inner) => inner.into(),
            DatasetError::Split(_) | DatasetError::Synthetic(_) => Failure::Config(e.to_string()),
            _ => Failure::Io(e.to_string()),
        }
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        match &e {
            ModelError::Checkpoint(
                CheckpointError::NameSetMismatch { .. }
                | CheckpointError::ShapeMismatch { .. }
                | CheckpointError::ConfigMismatch { .. },
            )
            | ModelError::Config(_)
            | ModelError::InputSize { .. } => Failure::Config(e.to_string()),
            ModelError::Checkpoint(_) => Failure::Io(e.to_string()),
            ModelError::Tensor(_) | ModelError::UnknownLayer(_) => Failure::Numeric(e.to_string()),
        }
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        ModelError::from(e).into()
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(m) => m.into(),
            TrainError::Config(_) | TrainError::SampleSize { .. } => Failure::Config(e.to_string()),
            TrainError::Sink(_) => Failure::Io(e.to_string()),
            TrainError::NonFinite { .. } | TrainError::Tensor(_) => Failure::Numeric(e.to_string()),
        }
    }
}

impl From<MetricsError> for Failure {
    fn from(e: MetricsError) -> Self {
        Failure::Io(e.to_string())
    }
}

impl From<GradcamError> for Failure {
    fn from(e: GradcamError) -> Self {
        match e {
            GradcamError::Model(m) => m.into(),
            GradcamError::Tensor(_) => Failure::Numeric(e.to_string()),
            _ => Failure::Config(e.to_string()),
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Failure::Io(format!("cannot write {}: {e}", path.display())))
}

/// Worker count from SEG_FORGE_THREADS.
pub fn threads() -> Result<NonZeroUsize, Failure> {
    match std::env::var("SEG_FORGE_THREADS") {
        Err(_) => Ok(NonZeroUsize::MIN),
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Failure::Config(format!("SEG_FORGE_THREADS must be a positive integer, got `{v}`"))),
    }
}

pub fn final_checkpoint(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("checkpoints").join("final.ckpt")
}

/// File-name form of a sample id.
fn file_stem(id: &str) -> String {
    id.replace(['/', '\\'], "_")
}

fn class_name(class: usize) -> String {
    PIXEL_CLASS_NAMES
        .get(class)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("class{class}"))
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = fs::read_dir(&d).map_err(|e| Failure::Io(format!("cannot read {}: {e}", d.display())))?;
        for entry in entries {
            let path = entry.map_err(|e| Failure::Io(format!("cannot read {}: {e}", d.display())))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn enhance(cfg: &RunConfig, input: &Path, output: &Path) -> Result<(), Failure> {
    let files = png_files(input)?;
    let mut rows = Vec::new();
    let mut failures = 0;
    for path in &files {
        let rel = path.strip_prefix(input).unwrap_or(path);
        let result = load_png(path).and_then(|img| {
            let out = clahe(&img, &cfg.clahe)?;
            let dest = output.join(rel);
            if let Some(parent) = dest.parent() {
                fs::create_dir_all(parent).map_err(|source| ImageError::Io {
                    path: parent.to_path_buf(),
                    source,
                })?;
            }
            save_png(&out, &dest)?;
            Ok((entropy(&img), entropy(&out), rms_contrast(&img), rms_contrast(&out)))
        });
        match result {
            Ok(r) => rows.push((rel.display().to_string(), r)),
            Err(e) => {
                eprintln!("error: {}: {e}", path.display());
                failures += 1;
            }
        }
    }
    if !rows.is_empty() {
        let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(5);
        println!(
            "{:<width$}  {:>10}  {:>10}  {:>10}  {:>10}",
            "image", "H_before", "H_after", "rms_before", "rms_after"
        );
        let mut sums = [0.0; 4];
        for (name, (h0, h1, r0, r1)) in &rows {
            println!("{name:<width$}  {h0:>10.3}  {h1:>10.3}  {r0:>10.4}  {r1:>10.4}");
            for (s, v) in sums.iter_mut().zip([h0, h1, r0, r1]) {
                *s += v;
            }
        }
        let n = rows.len() as f64;
        println!(
            "{:<width$}  {:>10.3}  {:>10.3}  {:>10.4}  {:>10.4}",
            "mean",
            sums[0] / n,
            sums[1] / n,
            sums[2] / n,
            sums[3] / n
        );
    }
    println!("{} images processed", rows.len());
    if failures > 0 {
        return Err(Failure::Io(format!("{failures} of {} images failed", files.len())));
    }
    Ok(())
}

pub fn synth(cfg: &RunConfig, output: &Path) -> Result<(), Failure> {
    let corpus = generate_synthetic(&cfg.synth)?;
    export_busi(&corpus.samples, output)?;
    println!(
        "wrote {} samples ({} benign, {} malignant, {} normal) to {}",
        corpus.samples.len(),
        cfg.synth.benign,
        cfg.synth.malignant,
        cfg.synth.normal,
        output.display()
    );
    Ok(())
}

fn data_root(cfg: &RunConfig) -> Result<&Path, Failure> {
    cfg.data_root
        .as_deref()
        .ok_or_else(|| Failure::Config("no corpus given; pass --data or set data.root".into()))
}

/// Ingests the corpus at model resolution, applying CLAHE when enabled.
fn load_corpus(cfg: &RunConfig) -> Result<Vec<LabeledSample>, Failure> {
    let scan = scan_busi(data_root(cfg)?, cfg.model.input_size)?;
    for w in &scan.warnings {
        eprintln!("warning: {}: {}", w.path.display(), w.reason);
    }
    if !cfg.clahe_enabled {
        return Ok(scan.samples);
    }
    scan.samples
        .iter()
        .map(|s| Ok(s.with_image(clahe(s.image(), &cfg.clahe)?)?))
        .collect()
}

fn load_split(cfg: &RunConfig) -> Result<(Vec<LabeledSample>, DatasetSplit), Failure> {
    let samples = load_corpus(cfg)?;
    let data = split(&samples, cfg.train_ratio(), cfg.seed)?;
    for w in &data.warnings {
        eprintln!("warning: {w}");
    }
    Ok((samples, data))
}

pub fn stats(cfg: &RunConfig) -> Result<(), Failure> {
    let scan = scan_busi(data_root(cfg)?, cfg.model.input_size)?;
    for w in &scan.warnings {
        eprintln!("warning: {}: {}", w.path.display(), w.reason);
    }
    println!("{:<10} {:>7} {:>13}", "class", "samples", "lesion_ratio");
    for s in class_stats(&scan.samples) {
        println!("{:<10} {:>7} {:>13.4}", s.tag.dir_name(), s.count, s.mean_lesion_ratio);
    }
    println!("{:<10} {:>7}", "total", scan.samples.len());
    if !scan.warnings.is_empty() {
        println!("{} files skipped", scan.warnings.len());
    }
    Ok(())
}

fn summary(r: &MetricsRecord) -> String {
    format!(
        "epoch {:>3} {:<5} loss {:.4}  acc {:.4}  mIoU {:.4}",
        r.epoch, r.split, r.loss, r.pixel_accuracy, r.iou_mean
    )
}

struct CliSink {
    metrics: PathBuf,
    checkpoints: PathBuf,
    classes: usize,
    history: Vec<MetricsRecord>,
}

impl TrainSink for CliSink {
    fn on_record(&mut self, record: &MetricsRecord) -> Result<(), String> {
        println!("{}", summary(record));
        self.history.push(record.clone());
        write_metrics_csv(&self.history, self.classes, &self.metrics).map_err(|e| e.to_string())
    }

    fn on_checkpoint(&mut self, epoch: usize, weights: &ModelWeights<f32>) -> Result<(), String> {
        let path = self.checkpoints.join(format!("epoch_{epoch:04}.ckpt"));
        save_weights(weights, &path).map_err(|e| e.to_string())?;
        println!("checkpoint {}", path.display());
        Ok(())
    }
}

pub fn train(cfg: &RunConfig) -> Result<(), Failure> {
    let (samples, data) = load_split(cfg)?;
    let out = &cfg.output_dir;
    let (ckpt_dir, metrics_dir) = (out.join("checkpoints"), out.join("metrics"));
    create_dir(&ckpt_dir)?;
    create_dir(&metrics_dir)?;
    let manifest = format!(
        "# seg-forge run manifest\n{}# corpus.fingerprint = {}\n# corpus.samples = {} (train {}, val {})\n",
        cfg.to_text(),
        fingerprint(&samples),
        samples.len(),
        data.train.len(),
        data.val.len()
    );
    write_file(&out.join("manifest.txt"), &manifest)?;
    let weights = build(&cfg.model, cfg.seed)?;
    println!(
        "training on {} samples ({} val), {} parameters",
        data.train.len(),
        data.val.len(),
        weights.param_count()
    );
    let mut sink = CliSink {
        metrics: metrics_dir.join("metrics.csv"),
        checkpoints: ckpt_dir,
        classes: cfg.model.num_classes,
        history: Vec::new(),
    };
    write_metrics_csv(&[], sink.classes, &sink.metrics)?;
    let outcome = train::train(weights, &data, &cfg.train, &mut sink)?;
    save_weights(&outcome.weights, final_checkpoint(cfg))?;
    println!("{} optimizer steps; final checkpoint {}", outcome.steps, final_checkpoint(cfg).display());
    Ok(())
}

fn require_checkpoint(path: &Path) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Io(format!("checkpoint {} not found", path.display())))
    }
}

pub fn eval(cfg: &RunConfig, ckpt: &Path, which: &str, threads: NonZeroUsize) -> Result<(), Failure> {
    require_checkpoint(ckpt)?;
    let weights = load_weights(ckpt, &cfg.model)?;
    let (_, data) = load_split(cfg)?;
    let (tag, samples) = match which {
        "train" => (SplitTag::Train, &data.train),
        _ => (SplitTag::Val, &data.val),
    };
    if samples.is_empty() {
        return Err(Failure::Config(format!("the {tag} split is empty")));
    }
    let record = evaluate(&weights, samples, 0, tag, threads)?;
    println!("{}", summary(&record));
    for (c, v) in record.iou.iter().enumerate() {
        println!("  iou_{c} ({}) {v:.4}", class_name(c));
    }
    for k in 0..record.precision.len() {
        println!(
            "  {}: precision {:.4} recall {:.4} f1 {:.4}",
            class_name(k + 1),
            record.precision[k],
            record.recall[k],
            record.f1[k]
        );
    }
    for u in &record.undefined {
        println!("  {u} undefined (zero denominator), reported as 0");
    }
    let dir = cfg.output_dir.join("metrics");
    create_dir(&dir)?;
    let path = dir.join("eval.csv");
    write_metrics_csv(std::slice::from_ref(&record), cfg.model.num_classes, &path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn lesion_box(sample: &LabeledSample) -> Option<(usize, usize, usize, usize)> {
    let w = sample.image().width();
    let mut bbox: Option<(usize, usize, usize, usize)> = None;
    for (i, _) in sample.mask().iter().enumerate().filter(|(_, &m)| m != 0) {
        let (x, y) = (i % w, i / w);
        bbox = Some(match bbox {
            None => (x, y, x, y),
            Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
        });
    }
    bbox
}

struct Explained {
    prediction: Vec<u8>,
    heat: Heatmap,
}

fn explain_one(weights: &ModelWeights<f32>, cfg: &RunConfig, s: &LabeledSample) -> Result<Explained, Failure> {
    let (prediction, _) = predict(weights, s)?;
    let mut probe = ProbeSpec::new(cfg.probe_layer(), cfg.probe.class);
    if cfg.probe.use_mask {
        probe = probe.with_mask(s.mask());
    }
    let (x, _) = batch_tensor::<f32>(&[s]);
    let heat = gradcam(weights, &x, &probe)?;
    Ok(Explained { prediction, heat })
}

pub fn explain(cfg: &RunConfig, ckpt: &Path, ids: &[String], threads: NonZeroUsize) -> Result<(), Failure> {
    require_checkpoint(ckpt)?;
    let weights = load_weights(ckpt, &cfg.model)?;
    let (all, data) = load_split(cfg)?;
    let chosen: Vec<&LabeledSample> = if ids.is_empty() {
        data.val.iter().collect()
    } else {
        ids.iter()
            .map(|id| {
                all.iter()
                    .find(|s| s.source_id() == id)
                    .ok_or_else(|| Failure::Config(format!("no sample with id `{id}`")))
            })
            .collect::<Result<_, _>>()?
    };
    let mut results: Vec<Option<Result<Explained, Failure>>> = (0..chosen.len()).map(|_| None).collect();
    if !chosen.is_empty() {
        let per = chosen.len().div_ceil(threads.get());
        std::thread::scope(|scope| {
            for (chunk, out) in chosen.chunks(per).zip(results.chunks_mut(per)) {
                let weights = &weights;
                scope.spawn(move || {
                    for (s, o) in chunk.iter().zip(out) {
                        *o = Some(explain_one(weights, cfg, s));
                    }
                });
            }
        });
    }
    let (pred_dir, overlay_dir) = (cfg.output_dir.join("predictions"), cfg.output_dir.join("overlays"));
    create_dir(&pred_dir)?;
    create_dir(&overlay_dir)?;
    let class = class_name(cfg.probe.class);
    let scale = (cfg.model.num_classes - 1) as f32;
    println!(
        "probe layer {} class {} ({})",
        cfg.probe_layer(),
        cfg.probe.class,
        class
    );
    println!("{:<28} {:>9} {:>9} {:>9} {:>9}", "sample", "heat_mean", "heat_max", "box_in", "box_out");
    for (s, r) in chosen.iter().zip(results) {
        let r = r.expect("every sample explained")?;
        let stem = file_stem(s.source_id());
        let (w, h) = (s.image().width(), s.image().height());
        let pred = GrayImage::new(w, h, r.prediction.iter().map(|&p| p as f32 / scale).collect())?;
        save_png(&pred, pred_dir.join(format!("{stem}_pred.png")))?;
        save_png(s.image(), pred_dir.join(format!("{stem}_input.png")))?;
        let rgb = overlay(s.image(), &r.heat, cfg.probe.opacity)?;
        save_rgb_png(&rgb, overlay_dir.join(format!("{stem}_cam_{class}.png")))?;
        let (inside, outside) = match lesion_box(s) {
            Some(b) => {
                let (i, o) = r.heat.box_means(b);
                (format!("{i:.4}"), format!("{o:.4}"))
            }
            None => ("-".into(), "-".into()),
        };
        println!(
            "{:<28} {:>9.4} {:>9.4} {:>9} {:>9}",
            s.source_id(),
            r.heat.mean(),
            r.heat.max(),
            inside,
            outside
        );
    }
    println!("{} samples explained", chosen.len());
    Ok(())
}
