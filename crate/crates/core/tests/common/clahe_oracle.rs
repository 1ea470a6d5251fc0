//! Global histogram equalization by rank counting, used to check the
//! degenerate single-tile, unclipped CLAHE configuration.

use rand::Rng;
use seg_forge_core::dataset::{generate_synthetic, SyntheticSpec};
use seg_forge_core::image::{clahe, ClaheConfig, GrayImage};

use super::rng;

fn bin(v: f32, bins: usize) -> usize {
    ((v.clamp(0.0, 1.0) as f64 * bins as f64) as usize).min(bins - 1)
}

/// Each pixel maps to the fraction of pixels whose bin is at most its own.
pub fn global_equalize(img: &GrayImage, bins: usize) -> Vec<f32> {
    let mut sorted: Vec<usize> = img.pixels().iter().map(|&v| bin(v, bins)).collect();
    sorted.sort_unstable();
    let n = sorted.len() as f64;
    img.pixels()
        .iter()
        .map(|&v| {
            let b = bin(v, bins);
            let rank = sorted.partition_point(|&s| s <= b);
            (rank as f64 / n) as f32
        })
        .collect()
}

pub fn single_tile_unclipped(bins: usize) -> ClaheConfig {
    ClaheConfig {
        tiles_x: 1,
        tiles_y: 1,
        // A bin can hold at most every pixel, which is `bins` times the uniform level.
        clip_limit: bins as f64,
        bins,
    }
}

pub fn random_images(count: u64) -> Vec<GrayImage> {
    (0..count)
        .map(|seed| {
            let mut r = rng(7000 + seed);
            let (w, h) = (r.random_range(8..48), r.random_range(8..48));
            let skew = r.random_range(0.3..3.0);
            GrayImage::from_fn(w, h, |_, _| r.random_range(0.0f32..1.0).powf(skew))
        })
        .collect()
}

/// Speckled ultrasound-like frames and smooth multi-scale fields.
pub fn natural_images() -> Vec<GrayImage> {
    let corpus = generate_synthetic(&SyntheticSpec::per_class(1, 48, 17)).unwrap();
    let mut out: Vec<GrayImage> = corpus.samples.iter().map(|s| s.image().clone()).collect();
    for seed in 0..2u64 {
        let mut r = rng(7500 + seed);
        let waves: Vec<(f32, f32, f32, f32)> = (0..6)
            .map(|k| {
                let f = 0.05 * (k + 1) as f32;
                (r.random_range(-f..f), r.random_range(-f..f), r.random_range(0.0..std::f32::consts::TAU), 1.0 / (k + 1) as f32)
            })
            .collect();
        out.push(GrayImage::from_fn(40, 32, |x, y| {
            let s: f32 = waves.iter().map(|(fx, fy, p, a)| a * (fx * x as f32 + fy * y as f32 + p).sin()).sum();
            (0.5 + 0.2 * s).clamp(0.0, 1.0)
        }));
    }
    out.truncate(5);
    out
}

/// Largest per-pixel deviation from the oracle, in units of `1 / bins`.
pub fn deviation_in_bins(img: &GrayImage, bins: usize) -> f64 {
    let got = clahe(img, &single_tile_unclipped(bins)).unwrap();
    let want = global_equalize(img, bins);
    got.pixels()
        .iter()
        .zip(&want)
        .map(|(&a, &b)| (a - b).abs() as f64 * bins as f64)
        .fold(0.0, f64::max)
}

/// Whether a constant image passes through CLAHE unchanged for a spread of
/// configurations.
pub fn constant_is_fixed_point() -> Result<(), String> {
    for (value, cfg) in [
        (0.5, ClaheConfig::default()),
        (0.0, ClaheConfig::default()),
        (1.0, ClaheConfig { tiles_x: 3, tiles_y: 5, ..ClaheConfig::default() }),
        (0.2, single_tile_unclipped(256)),
        (0.73, ClaheConfig { clip_limit: 1.0, bins: 64, ..ClaheConfig::default() }),
    ] {
        let img = GrayImage::filled(33, 40, value);
        let out = clahe(&img, &cfg).map_err(|e| e.to_string())?;
        if out != img {
            return Err(format!("constant {value} changed under {cfg:?}"));
        }
    }
    Ok(())
}
