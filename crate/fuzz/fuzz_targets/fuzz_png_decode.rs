#![no_main]

use libfuzzer_sys::fuzz_target;
use seg_forge_core::image::{decode_png, encode_gray_png};

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_png(data) {
        assert!(img.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        // Anything we decode must survive an 8-bit re-encode.
        let q = img.quantized();
        let again = decode_png(&encode_gray_png(&q).unwrap()).unwrap();
        assert_eq!(again, q);
    }
});
