#![no_main]

use libfuzzer_sys::fuzz_target;
use seg_forge_core::metrics::{parse_metrics, write_metrics};

fuzz_target!(|data: &[u8]| {
    if let Ok(history) = parse_metrics(data) {
        if let Some(first) = history.first() {
            let mut out = Vec::new();
            write_metrics(&history, first.num_classes(), &mut out).unwrap();
            let back = parse_metrics(&out[..]).unwrap();
            assert_eq!(back.len(), history.len());
        }
    }
});
