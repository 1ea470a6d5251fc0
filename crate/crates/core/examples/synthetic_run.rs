//! Trains the fixture network on the default synthetic corpus and prints
//! the learning curve, then checks where Grad-CAM puts mass on benign
//! validation samples.

use std::time::Instant;

use seg_forge_core::dataset::{generate_synthetic, split, ClassTag, SyntheticSpec};
use seg_forge_core::gradcam::{gradcam, ProbeSpec};
use seg_forge_core::train::{batch_tensor, train, NullSink, TrainConfig};
use seg_forge_core::unet::{build, ModelConfig};

fn main() {
    let corpus = generate_synthetic(&SyntheticSpec::default()).expect("synthetic corpus");
    let data = split(&corpus.samples, 0.8, 42).expect("split");
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let cfg = TrainConfig {
        epochs: args.first().copied().unwrap_or(20),
        steps_per_epoch: args.get(1).copied().unwrap_or(10),
        chunk_size: 1000,
        ..TrainConfig::default()
    };
    let weights = build(&ModelConfig::fixture(), 42).expect("model");
    let start = Instant::now();
    let out = train(weights, &data, &cfg, &mut NullSink).expect("training");
    for r in &out.history {
        println!(
            "{:>3} {:<5} loss {:.4} acc {:.4} mIoU {:.4} iou {:?}",
            r.epoch, r.split, r.loss, r.pixel_accuracy, r.iou_mean, r.iou
        );
    }
    println!("{} steps in {:.1?}", out.steps, start.elapsed());

    let (mut hits, mut total) = (0, 0);
    for s in data.val.iter().filter(|s| s.class_tag() == ClassTag::Benign) {
        let (x, _) = batch_tensor::<f32>(&[s]);
        let heat = gradcam(&out.weights, &x, &ProbeSpec::new("dec0", 1)).expect("gradcam");
        let w = s.image().width();
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for (i, _) in s.mask().iter().enumerate().filter(|(_, &m)| m != 0) {
            let (x, y) = (i % w, i / w);
            (x0, y0, x1, y1) = (x0.min(x), y0.min(y), x1.max(x), y1.max(y));
        }
        let (inside, outside) = heat.box_means((x0, y0, x1, y1));
        println!("{} inside {inside:.3} outside {outside:.3}", s.source_id());
        total += 1;
        hits += (inside > outside) as usize;
    }
    println!("localized {hits}/{total}");
}
