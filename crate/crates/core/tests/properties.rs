use proptest::prelude::*;

use seg_forge_core::config::RunConfig;
use seg_forge_core::image::{clahe, decode_png, encode_gray_png, ClaheConfig, GrayImage};
use seg_forge_core::metrics::{iou, parse_metrics, ConfusionMatrix};
use seg_forge_core::tensor::{Tape, Tensor};
use seg_forge_core::unet::{build, decode_checkpoint, encode_checkpoint, ModelConfig};

fn mask_pair(max_len: usize) -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
    (1..max_len).prop_flat_map(|n| (prop::collection::vec(0u8..3, n), prop::collection::vec(0u8..3, n)))
}

fn image() -> impl Strategy<Value = GrayImage> {
    (1usize..40, 1usize..40).prop_flat_map(|(w, h)| {
        prop::collection::vec(0.0f32..=1.0, w * h).prop_map(move |px| GrayImage::new(w, h, px).unwrap())
    })
}

fn small_checkpoint() -> Vec<u8> {
    let cfg = ModelConfig {
        depth: 1,
        base_channels: 1,
        num_classes: 3,
        input_size: 4,
    };
    encode_checkpoint(&build::<f32>(&cfg, 0).unwrap())
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded((pred, truth) in mask_pair(200), class in 0u8..3) {
        let a = iou(&pred, &truth, class).unwrap();
        let b = iou(&truth, &pred, class).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert_eq!(iou(&pred, &pred, class).unwrap(), 1.0);
    }

    #[test]
    fn confusion_total_counts_every_pixel((pred, truth) in mask_pair(300)) {
        let cm = ConfusionMatrix::from_masks(3, &pred, &truth).unwrap();
        prop_assert_eq!(cm.total(), pred.len() as u64);
        let row_sum: u64 = (0..3).flat_map(|t| (0..3).map(move |p| (t, p))).map(|(t, p)| cm.get(t, p)).sum();
        prop_assert_eq!(row_sum, cm.total());
        let diag: u64 = (0..3).map(|k| cm.true_positives(k)).sum();
        prop_assert!((cm.pixel_accuracy() - diag as f64 / cm.total() as f64).abs() < 1e-12);
    }

    #[test]
    fn softmax_sums_to_one(
        n in 1usize..3, c in 1usize..5, hw in 1usize..5,
        data in prop::collection::vec(-30.0f64..30.0, 100),
    ) {
        let len = n * c * hw * hw;
        let t = Tensor::from_fn([n, c, hw, hw], |i| data[i % data.len()]);
        let mut tape = Tape::new();
        let x = tape.constant(t);
        let s = tape.softmax_channels(x).unwrap();
        let out = tape.value(s).data();
        prop_assert_eq!(out.len(), len);
        let plane = hw * hw;
        for b in 0..n {
            for p in 0..plane {
                let sum: f64 = (0..c).map(|k| out[(b * c + k) * plane + p]).sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn clahe_output_in_unit_range(
        img in image(),
        tiles_x in 1usize..6, tiles_y in 1usize..6,
        clip_limit in 1.0f64..10.0, bins in 2usize..300,
    ) {
        let cfg = ClaheConfig { tiles_x, tiles_y, clip_limit, bins };
        if tiles_x > img.width() || tiles_y > img.height() {
            prop_assert!(clahe(&img, &cfg).is_err());
            return Ok(());
        }
        let out = clahe(&img, &cfg).unwrap();
        prop_assert_eq!((out.width(), out.height()), (img.width(), img.height()));
        prop_assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn png_round_trip_is_exact_after_quantization(img in image()) {
        let q = img.quantized();
        let back = decode_png(&encode_gray_png(&q).unwrap()).unwrap();
        prop_assert_eq!(back, q);
    }

    #[test]
    fn config_text_round_trips(
        seed in any::<u64>(),
        val_ratio in 0.05f64..0.5,
        tiles in 1usize..16,
        clip in 1.0f64..8.0,
        depth in 1usize..5,
        base in 1usize..32,
        epochs in 1usize..50,
        lr in 1e-5f64..1e-1,
        augment in any::<bool>(),
        opacity in 0.0f64..=1.0,
        use_mask in any::<bool>(),
    ) {
        let mut cfg = RunConfig::default();
        for (k, v) in [
            ("seed", seed.to_string()),
            ("data.val_ratio", val_ratio.to_string()),
            ("clahe.tiles_x", tiles.to_string()),
            ("clahe.clip_limit", clip.to_string()),
            ("model.depth", depth.to_string()),
            ("model.base_channels", base.to_string()),
            ("train.epochs", epochs.to_string()),
            ("train.lr", lr.to_string()),
            ("train.augment", augment.to_string()),
            ("probe.opacity", opacity.to_string()),
            ("probe.use_mask", use_mask.to_string()),
        ] {
            cfg.set(k, &v).unwrap();
        }
        cfg.validate().unwrap();
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn decoders_never_panic_on_noise(bytes in prop::collection::vec(any::<u8>(), 0..600)) {
        let _ = decode_checkpoint(&bytes);
        let _ = parse_metrics(&bytes[..]);
        let _ = decode_png(&bytes);
        let _ = RunConfig::from_text(&String::from_utf8_lossy(&bytes));
    }

    #[test]
    fn corrupted_checkpoints_fail_cleanly(cut in 0usize..2000, pos in 0usize..2000, byte in any::<u8>()) {
        let good = small_checkpoint();
        let cut = cut % good.len();
        prop_assert!(decode_checkpoint(&good[..cut]).is_err());
        let mut bad = good.clone();
        let pos = pos % bad.len();
        bad[pos] = byte;
        let _ = decode_checkpoint(&bad);
    }
}
