//! BUSI-style corpora: directory ingestion, stratified splitting and a
//! synthetic lesion generator for desk-scale experiments.
//!
//! Layout: `root/{benign,malignant,normal}/NAME.png` with one or more
//! `NAME_mask*.png` companions.  Pixel classes are 0 background,
//! 1 benign lesion and 2 malignant lesion.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::image::{self, resize_bilinear, resize_nearest, GrayImage, ImageError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{}: no benign/, malignant/ or normal/ images found", .0.display())]
    EmptyRoot(PathBuf),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("invalid sample {id}: {msg}")]
    Sample { id: String, msg: String },
    #[error("invalid split: {0}")]
    Split(String),
    #[error("invalid synthetic spec: {0}")]
    Synthetic(String),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Image-level class of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ClassTag {
    Normal,
    Benign,
    Malignant,
}

impl ClassTag {
    pub const ALL: [ClassTag; 3] = [ClassTag::Benign, ClassTag::Malignant, ClassTag::Normal];

    pub fn dir_name(self) -> &'static str {
        match self {
            ClassTag::Normal => "normal",
            ClassTag::Benign => "benign",
            ClassTag::Malignant => "malignant",
        }
    }

    /// Pixel class used for lesion pixels of this tag.
    pub fn lesion_class(self) -> u8 {
        match self {
            ClassTag::Normal => 0,
            ClassTag::Benign => 1,
            ClassTag::Malignant => 2,
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.dir_name() == name)
    }
}

impl fmt::Display for ClassTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

/// Pixel class names indexed by class id.
pub const PIXEL_CLASS_NAMES: [&str; 3] = ["background", "benign", "malignant"];

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    image: GrayImage,
    mask: Vec<u8>,
    class_tag: ClassTag,
    source_id: String,
}

impl LabeledSample {
    pub fn new(image: GrayImage, mask: Vec<u8>, class_tag: ClassTag, source_id: impl Into<String>) -> Result<Self> {
        let id = source_id.into();
        let bad = |msg: String| DatasetError::Sample { id: id.clone(), msg };
        if mask.len() != image.width() * image.height() {
            return Err(bad(format!(
                "mask has {} pixels, image is {}x{}",
                mask.len(),
                image.width(),
                image.height()
            )));
        }
        let allowed = class_tag.lesion_class();
        if let Some(&v) = mask.iter().find(|&&v| v != 0 && v != allowed) {
            return Err(bad(format!("{class_tag} sample carries pixel class {v}")));
        }
        Ok(Self {
            image,
            mask,
            class_tag,
            source_id: id,
        })
    }

    pub fn image(&self) -> &GrayImage {
        &self.image
    }

    pub fn mask(&self) -> &[u8] {
        &self.mask
    }

    pub fn class_tag(&self) -> ClassTag {
        self.class_tag
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    /// Same sample with its image replaced (e.g. after enhancement).
    pub fn with_image(&self, image: GrayImage) -> Result<Self> {
        Self::new(image, self.mask.clone(), self.class_tag, self.source_id.clone())
    }

    pub fn flip_horizontal(&self) -> Self {
        let w = self.image.width();
        let mut mask = self.mask.clone();
        for row in mask.chunks_mut(w) {
            row.reverse();
        }
        Self {
            image: self.image.flip_horizontal(),
            mask,
            class_tag: self.class_tag,
            source_id: self.source_id.clone(),
        }
    }

    pub fn lesion_pixels(&self) -> usize {
        self.mask.iter().filter(|&&v| v != 0).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanWarning {
    pub path: PathBuf,
    pub reason: String,
}

impl fmt::Display for ScanWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path.display(), self.reason)
    }
}

#[derive(Debug, Clone, Default)]
pub struct BusiScan {
    pub samples: Vec<LabeledSample>,
    pub warnings: Vec<ScanWarning>,
}

/// Mask companions of `stem` among `names`: `stem_mask.png`, `stem_mask_1.png`, ...
pub fn mask_files_for<'a>(stem: &str, names: &'a [String]) -> Vec<&'a String> {
    let prefix = format!("{stem}_mask");
    names
        .iter()
        .filter(|n| n.starts_with(&prefix) && has_png_ext(n))
        .collect()
}

fn has_png_ext(name: &str) -> bool {
    name.len() > 4 && name[name.len() - 4..].eq_ignore_ascii_case(".png")
}

fn is_mask_name(name: &str) -> bool {
    name.contains("_mask")
}

/// Ingests a BUSI-layout directory, resizing every image to `size`x`size`
/// (masks by nearest neighbour).  Samples are sorted by source id.
pub fn scan_busi(root: impl AsRef<Path>, size: usize) -> Result<BusiScan> {
    let root = root.as_ref();
    let mut scan = BusiScan::default();
    for tag in ClassTag::ALL {
        let dir = root.join(tag.dir_name());
        if !dir.is_dir() {
            continue;
        }
        let mut names: Vec<String> = std::fs::read_dir(&dir)
            .map_err(io_err(&dir))?
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|n| has_png_ext(n))
            .collect();
        names.sort();
        for name in names.iter().filter(|n| !is_mask_name(n)) {
            let stem = &name[..name.len() - 4];
            let path = dir.join(name);
            let warn = |reason: String| ScanWarning {
                path: path.clone(),
                reason,
            };
            let masks = mask_files_for(stem, &names);
            if masks.is_empty() {
                scan.warnings.push(warn("no mask file".into()));
                continue;
            }
            let img = match image::load_png(&path) {
                Ok(img) => img,
                Err(e) => {
                    scan.warnings.push(warn(e.to_string()));
                    continue;
                }
            };
            let mut lesion = vec![false; img.width() * img.height()];
            let mut skip = None;
            for m in masks {
                match image::load_png(dir.join(m)) {
                    Ok(mi) if (mi.width(), mi.height()) != (img.width(), img.height()) => {
                        skip = Some(format!(
                            "mask {m} is {}x{}, image is {}x{}",
                            mi.width(),
                            mi.height(),
                            img.width(),
                            img.height()
                        ));
                        break;
                    }
                    Ok(mi) => {
                        for (l, &v) in lesion.iter_mut().zip(mi.pixels()) {
                            *l |= v > 0.5;
                        }
                    }
                    Err(e) => {
                        skip = Some(format!("mask {m}: {e}"));
                        break;
                    }
                }
            }
            if let Some(reason) = skip {
                scan.warnings.push(warn(reason));
                continue;
            }
            let class = tag.lesion_class();
            let labels: Vec<u8> = lesion.iter().map(|&l| if l { class } else { 0 }).collect();
            let mask = resize_nearest(&labels, img.width(), img.height(), size, size);
            let image = resize_bilinear(&img, size, size);
            scan.samples
                .push(LabeledSample::new(image, mask, tag, format!("{}/{stem}", tag.dir_name()))?);
        }
    }
    if scan.samples.is_empty() && scan.warnings.is_empty() {
        return Err(DatasetError::EmptyRoot(root.to_path_buf()));
    }
    scan.samples.sort_by(|a, b| a.source_id.cmp(&b.source_id));
    for w in &scan.warnings {
        log::warn!("skipped {w}");
    }
    Ok(scan)
}

/// Writes samples in BUSI layout: `<class>/<name>.png` and `<name>_mask.png`.
pub fn export_busi(samples: &[LabeledSample], root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    for tag in ClassTag::ALL {
        let dir = root.join(tag.dir_name());
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    for s in samples {
        let stem = s.source_id.rsplit('/').next().unwrap_or(&s.source_id);
        let dir = root.join(s.class_tag.dir_name());
        image::save_png(&s.image, dir.join(format!("{stem}.png")))?;
        let (w, h) = (s.image.width(), s.image.height());
        let mask = GrayImage::new(w, h, s.mask.iter().map(|&v| if v > 0 { 1.0 } else { 0.0 }).collect())?;
        image::save_png(&mask, dir.join(format!("{stem}_mask.png")))?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<LabeledSample>,
    pub val: Vec<LabeledSample>,
    pub seed: u64,
    pub warnings: Vec<String>,
}

/// Largest-remainder allocation of `target` items over groups of the given
/// sizes, keeping at least one item on each side of every group of two or more.
fn allocate(sizes: &[usize], ratio: f64, target: usize) -> Vec<usize> {
    let mut take: Vec<usize> = sizes.iter().map(|&n| (n as f64 * ratio).floor() as usize).collect();
    let mut frac: Vec<(f64, usize)> = sizes
        .iter()
        .enumerate()
        .map(|(i, &n)| (n as f64 * ratio - take[i] as f64, i))
        .collect();
    frac.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut missing = target.saturating_sub(take.iter().sum());
    for &(_, i) in frac.iter().cycle().take(frac.len() * 2) {
        if missing == 0 {
            break;
        }
        if take[i] < sizes[i] {
            take[i] += 1;
            missing -= 1;
        }
    }
    for (t, &n) in take.iter_mut().zip(sizes) {
        if n >= 2 {
            *t = (*t).clamp(1, n - 1);
        }
    }
    take
}

/// Seeded, class-stratified train/validation split.
pub fn split(samples: &[LabeledSample], ratio: f64, seed: u64) -> Result<DatasetSplit> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DatasetError::Split(format!("ratio must lie in (0, 1), got {ratio}")));
    }
    if samples.len() < 2 {
        return Err(DatasetError::Split(format!("need at least 2 samples, got {}", samples.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sorted: Vec<&LabeledSample> = samples.iter().collect();
    sorted.sort_by(|a, b| a.source_id.cmp(&b.source_id));
    let mut groups: BTreeMap<ClassTag, Vec<&LabeledSample>> = BTreeMap::new();
    for s in &sorted {
        groups.entry(s.class_tag).or_default().push(s);
    }
    let target = ((ratio * samples.len() as f64).round() as usize).clamp(1, samples.len() - 1);
    let mut warnings = Vec::new();
    let (mut train, mut val) = (Vec::new(), Vec::new());
    if samples.len() < groups.len() * 2 {
        let msg = format!(
            "{} samples cannot cover {} classes on both sides; splitting unstratified",
            samples.len(),
            groups.len()
        );
        log::warn!("{msg}");
        warnings.push(msg);
        sorted.shuffle(&mut rng);
        train.extend(sorted[..target].iter().map(|s| (*s).clone()));
        val.extend(sorted[target..].iter().map(|s| (*s).clone()));
    } else {
        let sizes: Vec<usize> = groups.values().map(Vec::len).collect();
        let take = allocate(&sizes, ratio, target);
        for (group, n_train) in groups.values_mut().zip(take) {
            group.shuffle(&mut rng);
            train.extend(group[..n_train].iter().map(|s| (*s).clone()));
            val.extend(group[n_train..].iter().map(|s| (*s).clone()));
        }
    }
    val.sort_by(|a, b| a.source_id.cmp(&b.source_id));
    Ok(DatasetSplit {
        train,
        val,
        seed,
        warnings,
    })
}

/// Parameters of the synthetic lesion corpus.  Lengths are fractions of
/// the image size.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub benign: usize,
    pub malignant: usize,
    pub normal: usize,
    pub size: usize,
    /// Range of ellipse semi-axes (and mean radius of irregular regions).
    pub axis_range: (f64, f64),
    /// Range of lesion-to-background intensity difference.
    pub contrast_range: (f64, f64),
    /// Standard deviation of multiplicative speckle.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            benign: 30,
            malignant: 30,
            normal: 30,
            size: 64,
            axis_range: (0.12, 0.22),
            contrast_range: (0.25, 0.35),
            noise: 0.15,
            seed: 42,
        }
    }
}

impl SyntheticSpec {
    pub fn per_class(count: usize, size: usize, seed: u64) -> Self {
        Self {
            benign: count,
            malignant: count,
            normal: count,
            size,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DatasetError::Synthetic(m.to_string()));
        if self.benign + self.malignant + self.normal == 0 {
            return bad("no samples requested");
        }
        if self.size < 8 {
            return bad("image size must be at least 8");
        }
        let (a0, a1) = self.axis_range;
        if !(a0 > 0.0 && a0 <= a1 && a1 < 0.35) {
            return bad("axis range must satisfy 0 < low <= high < 0.35");
        }
        let (c0, c1) = self.contrast_range;
        if !(c0 >= 0.0 && c0 <= c1 && c1 <= 0.6) {
            return bad("contrast range must satisfy 0 <= low <= high <= 0.6");
        }
        if !(self.noise >= 0.0 && self.noise <= 1.0) {
            return bad("noise must lie in [0, 1]");
        }
        Ok(())
    }
}

struct Background {
    base: f64,
    waves: [(f64, f64, f64, f64); 2],
}

impl Background {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let mut wave = || {
            (
                rng.random_range(0.02..0.05),
                rng.random_range(1.0..3.0),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..std::f64::consts::PI),
            )
        };
        let waves = [wave(), wave()];
        Self {
            base: rng.random_range(0.38..0.48),
            waves,
        }
    }

    fn at(&self, u: f64, v: f64) -> f64 {
        self.base
            + self
                .waves
                .iter()
                .map(|&(amp, freq, phase, dir)| {
                    amp * (std::f64::consts::TAU * freq * (u * dir.cos() + v * dir.sin()) + phase).sin()
                })
                .sum::<f64>()
    }
}

fn smoothstep_inside(signed: f64) -> f64 {
    // signed > 0 inside; ~1.5 px transition
    1.0 / (1.0 + (-signed * 2.5).exp())
}

/// Semi-axes, centre and orientation of a generated benign lesion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipseParams {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
}

/// A generated corpus with the ellipse parameters of each benign sample.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub samples: Vec<LabeledSample>,
    pub ellipses: BTreeMap<String, EllipseParams>,
}

/// Speckled backgrounds with bright smooth ellipses (benign), dark
/// irregular blobs (malignant) or nothing (normal).  Fully seed-determined.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let s = spec.size;
    let sf = s as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut corpus = SyntheticCorpus {
        samples: Vec::new(),
        ellipses: BTreeMap::new(),
    };
    let plan = [
        (ClassTag::Benign, spec.benign),
        (ClassTag::Malignant, spec.malignant),
        (ClassTag::Normal, spec.normal),
    ];
    for (tag, count) in plan {
        for i in 0..count {
            let id = format!("{}/synth_{i:04}", tag.dir_name());
            let bg = Background::sample(&mut rng);
            let contrast = rng.random_range(spec.contrast_range.0..=spec.contrast_range.1);
            let mut lesion_weight = vec![0.0f64; s * s];
            let mut mask = vec![0u8; s * s];
            match tag {
                ClassTag::Normal => {}
                ClassTag::Benign => {
                    let a = rng.random_range(spec.axis_range.0..=spec.axis_range.1) * sf;
                    let b = rng.random_range(spec.axis_range.0..=spec.axis_range.1) * sf;
                    let margin = a.max(b) + 2.0;
                    let cx = rng.random_range(margin..=sf - margin);
                    let cy = rng.random_range(margin..=sf - margin);
                    let theta = rng.random_range(0.0..std::f64::consts::PI);
                    let (st, ct) = theta.sin_cos();
                    for y in 0..s {
                        for x in 0..s {
                            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                            let u = (dx * ct + dy * st) / a;
                            let v = (-dx * st + dy * ct) / b;
                            let r = (u * u + v * v).sqrt();
                            lesion_weight[y * s + x] = smoothstep_inside((1.0 - r) * a.min(b));
                            if u * u + v * v <= 1.0 {
                                mask[y * s + x] = 1;
                            }
                        }
                    }
                    corpus.ellipses.insert(id.clone(), EllipseParams { cx, cy, a, b, theta });
                }
                ClassTag::Malignant => {
                    let radius = rng.random_range(spec.axis_range.0..=spec.axis_range.1) * sf;
                    let harmonics: Vec<(f64, f64)> = (2..=5)
                        .map(|_| (rng.random_range(0.04..0.12), rng.random_range(0.0..std::f64::consts::TAU)))
                        .collect();
                    let r_max = radius * (1.0 + harmonics.iter().map(|h| h.0).sum::<f64>());
                    let margin = r_max + 2.0;
                    let (cx, cy) = if margin * 2.0 < sf {
                        (rng.random_range(margin..=sf - margin), rng.random_range(margin..=sf - margin))
                    } else {
                        (sf / 2.0, sf / 2.0)
                    };
                    let edge = |phi: f64| {
                        radius
                            * (1.0
                                + harmonics
                                    .iter()
                                    .enumerate()
                                    .map(|(k, &(amp, ph))| amp * ((k + 2) as f64 * phi + ph).cos())
                                    .sum::<f64>())
                    };
                    for y in 0..s {
                        for x in 0..s {
                            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                            let d = (dx * dx + dy * dy).sqrt();
                            let rim = edge(dy.atan2(dx));
                            lesion_weight[y * s + x] = smoothstep_inside(rim - d);
                            if d <= rim {
                                mask[y * s + x] = 2;
                            }
                        }
                    }
                }
            }
            let sign = if tag == ClassTag::Malignant { -1.0 } else { 1.0 };
            let img = GrayImage::from_fn(s, s, |x, y| {
                let base = bg.at(x as f64 / sf, y as f64 / sf);
                let clean = base + sign * contrast * lesion_weight[y * s + x];
                let n: f64 = StandardNormal.sample(&mut rng);
                (clean.max(0.02) * (1.0 + spec.noise * n)) as f32
            })
            .quantized();
            corpus.samples.push(LabeledSample::new(img, mask, tag, id)?);
        }
    }
    Ok(corpus)
}

/// Stable digest of a corpus: ids, tags, quantized pixels and masks.
pub fn fingerprint(samples: &[LabeledSample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update(s.source_id.as_bytes());
        h.update([0, s.class_tag.lesion_class()]);
        h.update((s.image.width() as u64).to_le_bytes());
        h.update((s.image.height() as u64).to_le_bytes());
        h.update(s.image.to_u8());
        h.update(&s.mask);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-class sample counts and mean lesion fraction.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    pub tag: ClassTag,
    pub count: usize,
    pub mean_lesion_ratio: f64,
}

pub fn class_stats(samples: &[LabeledSample]) -> Vec<ClassStats> {
    ClassTag::ALL
        .into_iter()
        .map(|tag| {
            let of: Vec<&LabeledSample> = samples.iter().filter(|s| s.class_tag == tag).collect();
            let ratio = if of.is_empty() {
                0.0
            } else {
                of.iter().map(|s| s.lesion_pixels() as f64 / s.mask.len() as f64).sum::<f64>() / of.len() as f64
            };
            ClassStats {
                tag,
                count: of.len(),
                mean_lesion_ratio: ratio,
            }
        })
        .collect()
}
