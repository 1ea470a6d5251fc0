//! Replays the checked-in fuzz seeds; every seed is a valid input.

use std::path::PathBuf;

use seg_forge_core::config::RunConfig;
use seg_forge_core::image::decode_png;
use seg_forge_core::metrics::parse_metrics;
use seg_forge_core::unet::decode_checkpoint;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn png_seeds_decode() {
    for (name, bytes) in seeds("fuzz_png_decode") {
        decode_png(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn checkpoint_seeds_decode_and_load() {
    for (name, bytes) in seeds("fuzz_checkpoint") {
        let ckpt = decode_checkpoint(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
        let cfg = ckpt.config;
        ckpt.into_weights(&cfg).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn metrics_seeds_parse() {
    for (name, bytes) in seeds("fuzz_metrics_csv") {
        parse_metrics(&bytes[..]).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn config_seeds_parse() {
    for (name, bytes) in seeds("fuzz_run_config") {
        let text = String::from_utf8(bytes).unwrap();
        RunConfig::from_text(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}
