#![no_main]

use libfuzzer_sys::fuzz_target;
use seg_forge_core::unet::decode_checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = decode_checkpoint(data) {
        let cfg = ckpt.config;
        let _ = ckpt.into_weights(&cfg);
    }
});
