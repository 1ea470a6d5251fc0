use std::f64::consts::PI;
use std::path::Path;

use seg_forge_core::dataset::{
    export_busi, fingerprint, generate_synthetic, scan_busi, split, ClassTag, DatasetError, SyntheticSpec,
};
use seg_forge_core::image::{save_png, GrayImage};

fn blob(w: usize, h: usize, x0: usize, y0: usize, side: usize) -> GrayImage {
    GrayImage::from_fn(w, h, |x, y| {
        if (x0..x0 + side).contains(&x) && (y0..y0 + side).contains(&y) {
            1.0
        } else {
            0.0
        }
    })
}

fn write(dir: &Path, name: &str, img: &GrayImage) {
    std::fs::create_dir_all(dir).unwrap();
    save_png(img, dir.join(name)).unwrap();
}

#[test]
fn benign_mask_area_matches_ellipse_formula() {
    let spec = SyntheticSpec::per_class(25, 96, 11);
    let corpus = generate_synthetic(&spec).unwrap();
    let benign: Vec<_> = corpus.samples.iter().filter(|s| s.class_tag() == ClassTag::Benign).collect();
    assert_eq!(benign.len(), 25);
    for s in benign {
        let e = corpus.ellipses[s.source_id()];
        let area = PI * e.a * e.b;
        // Ramanujan's perimeter approximation bounds the rasterization error.
        let h = ((e.a - e.b) / (e.a + e.b)).powi(2);
        let perimeter = PI * (e.a + e.b) * (1.0 + 3.0 * h / (10.0 + (4.0 - 3.0 * h).sqrt()));
        let count = s.mask().iter().filter(|&&m| m == 1).count() as f64;
        assert!(
            (count - area).abs() <= perimeter,
            "{}: {count} pixels vs area {area:.1} (perimeter {perimeter:.1})",
            s.source_id()
        );
        assert!(s.mask().iter().all(|&m| m < 2));
    }
}

#[test]
fn generator_is_bit_identical_per_seed() {
    let spec = SyntheticSpec::per_class(5, 32, 9);
    let a = generate_synthetic(&spec).unwrap();
    let b = generate_synthetic(&spec).unwrap();
    assert_eq!(a.samples, b.samples);
    assert_eq!(fingerprint(&a.samples), fingerprint(&b.samples));
    let c = generate_synthetic(&SyntheticSpec { seed: 10, ..spec }).unwrap();
    assert_ne!(fingerprint(&a.samples), fingerprint(&c.samples));
}

#[test]
fn no_malignant_requested_means_no_class_two_pixels() {
    let spec = SyntheticSpec {
        malignant: 0,
        ..SyntheticSpec::per_class(6, 32, 1)
    };
    let corpus = generate_synthetic(&spec).unwrap();
    assert!(corpus.samples.iter().all(|s| s.mask().iter().all(|&m| m != 2)));
    assert_eq!(corpus.samples.len(), 12);
}

#[test]
fn export_then_scan_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_synthetic(&SyntheticSpec::per_class(3, 32, 4)).unwrap();
    export_busi(&corpus.samples, dir.path()).unwrap();
    let scan = scan_busi(dir.path(), 32).unwrap();
    assert!(scan.warnings.is_empty());
    assert_eq!(scan.samples, corpus.samples);
    let again = scan_busi(dir.path(), 32).unwrap();
    assert_eq!(again.samples, scan.samples);
}

#[test]
fn two_mask_files_merge_by_union() {
    let dir = tempfile::tempdir().unwrap();
    let benign = dir.path().join("benign");
    write(&benign, "case.png", &GrayImage::filled(16, 16, 0.3));
    write(&benign, "case_mask.png", &blob(16, 16, 1, 1, 4));
    write(&benign, "case_mask_1.png", &blob(16, 16, 10, 8, 5));
    let scan = scan_busi(dir.path(), 16).unwrap();
    assert_eq!(scan.samples.len(), 1);
    let s = &scan.samples[0];
    assert_eq!(s.source_id(), "benign/case");
    assert_eq!(s.mask().iter().filter(|&&m| m == 1).count(), 16 + 25);
}

#[test]
fn normal_image_with_blank_mask_is_background() {
    let dir = tempfile::tempdir().unwrap();
    let normal = dir.path().join("normal");
    write(&normal, "n1.png", &GrayImage::from_fn(12, 12, |x, _| x as f32 / 12.0));
    write(&normal, "n1_mask.png", &GrayImage::filled(12, 12, 0.0));
    let scan = scan_busi(dir.path(), 8).unwrap();
    let s = &scan.samples[0];
    assert_eq!(s.class_tag(), ClassTag::Normal);
    assert_eq!(s.mask(), &[0u8; 64][..]);
    assert_eq!(s.image().width(), 8);
}

#[test]
fn problems_become_warnings() {
    let dir = tempfile::tempdir().unwrap();
    let malignant = dir.path().join("malignant");
    write(&malignant, "lonely.png", &GrayImage::filled(8, 8, 0.5));
    write(&malignant, "odd.png", &GrayImage::filled(8, 8, 0.5));
    write(&malignant, "odd_mask.png", &GrayImage::filled(6, 8, 1.0));
    write(&malignant, "ok.png", &GrayImage::filled(8, 8, 0.5));
    write(&malignant, "ok_mask.png", &blob(8, 8, 2, 2, 3));
    let scan = scan_busi(dir.path(), 8).unwrap();
    assert_eq!(scan.samples.len(), 1);
    assert_eq!(scan.samples[0].mask().iter().filter(|&&m| m == 2).count(), 9);
    let reasons: Vec<String> = scan.warnings.iter().map(|w| w.reason.clone()).collect();
    assert_eq!(reasons.len(), 2, "{reasons:?}");
    assert!(reasons.iter().any(|r| r.contains("no mask")));
    assert!(reasons.iter().any(|r| r.contains("6x8")));
}

#[test]
fn empty_root_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(scan_busi(dir.path(), 8), Err(DatasetError::EmptyRoot(_))));
}

#[test]
fn thirty_samples_split_eight_two_per_class() {
    let corpus = generate_synthetic(&SyntheticSpec::per_class(10, 16, 2)).unwrap();
    let a = split(&corpus.samples, 0.8, 5).unwrap();
    for tag in ClassTag::ALL {
        assert_eq!(a.train.iter().filter(|s| s.class_tag() == tag).count(), 8);
        assert_eq!(a.val.iter().filter(|s| s.class_tag() == tag).count(), 2);
    }
    let b = split(&corpus.samples, 0.8, 5).unwrap();
    assert_eq!(a.train, b.train);
    assert_eq!(a.val, b.val);
    let mut ids: Vec<&str> = a.train.iter().chain(&a.val).map(|s| s.source_id()).collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 30);
}
