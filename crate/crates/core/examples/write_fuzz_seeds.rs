//! Regenerates the checked-in fuzz corpus seeds.
//!
//! Usage: `cargo run -p seg-forge-core --example write_fuzz_seeds [fuzz/corpus]`

use std::fs;
use std::path::{Path, PathBuf};

use seg_forge_core::config::RunConfig;
use seg_forge_core::dataset::{generate_synthetic, SyntheticSpec};
use seg_forge_core::image::{encode_gray_png, encode_rgb_png, GrayImage, RgbImage};
use seg_forge_core::metrics::{write_metrics, ConfusionMatrix, MetricsRecord, SplitTag};
use seg_forge_core::unet::{build, encode_checkpoint, ModelConfig};

fn put(dir: &Path, name: &str, bytes: &[u8]) {
    fs::create_dir_all(dir).unwrap();
    fs::write(dir.join(name), bytes).unwrap();
}

fn main() {
    let root = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| "fuzz/corpus".into());

    let png = root.join("fuzz_png_decode");
    let ramp = GrayImage::from_fn(8, 4, |x, y| (x + 8 * y) as f32 / 31.0).quantized();
    put(&png, "gray_ramp.png", &encode_gray_png(&ramp).unwrap());
    let sample = &generate_synthetic(&SyntheticSpec::per_class(1, 16, 1)).unwrap().samples[0];
    put(&png, "synthetic_16.png", &encode_gray_png(sample.image()).unwrap());
    let rgb = RgbImage::new(3, 2, (0..18).map(|v| (v * 14) as u8).collect()).unwrap();
    put(&png, "rgb_3x2.png", &encode_rgb_png(&rgb).unwrap());

    let ckpt = root.join("fuzz_checkpoint");
    for (name, depth, base) in [("depth1_base1.ckpt", 1, 1), ("depth2_base2.ckpt", 2, 2)] {
        let cfg = ModelConfig {
            depth,
            base_channels: base,
            num_classes: 3,
            input_size: 8,
        };
        put(&ckpt, name, &encode_checkpoint(&build::<f32>(&cfg, 0).unwrap()));
    }

    let csv = root.join("fuzz_metrics_csv");
    let pred = [0u8, 1, 1, 2, 0, 2, 1, 0];
    let truth = [0u8, 1, 0, 2, 0, 2, 2, 0];
    let cm = ConfusionMatrix::from_masks(3, &pred, &truth).unwrap();
    let history = vec![
        MetricsRecord::from_confusion(1, SplitTag::Train, 0.91, &cm),
        MetricsRecord::from_confusion(1, SplitTag::Val, 1.02, &cm),
    ];
    let mut out = Vec::new();
    write_metrics(&history, 3, &mut out).unwrap();
    put(&csv, "two_rows.csv", &out);
    let mut header_only = Vec::new();
    write_metrics(&[], 3, &mut header_only).unwrap();
    put(&csv, "header_only.csv", &header_only);

    let cfg = root.join("fuzz_run_config");
    put(&cfg, "defaults.conf", RunConfig::default().to_text().as_bytes());
    put(
        &cfg,
        "fixture.conf",
        b"# small model\nseed = 7\nmodel.depth = 2\nmodel.base_channels = 8\nmodel.input_size = 64\ntrain.epochs = 3\nclahe.enabled = false\n",
    );
}
