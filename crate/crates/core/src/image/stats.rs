use super::GrayImage;

/// Shannon entropy in bits of the 256-bin intensity histogram.
pub fn entropy(img: &GrayImage) -> f64 {
    let mut hist = [0usize; 256];
    for &v in img.pixels() {
        hist[((v as f64 * 256.0) as usize).min(255)] += 1;
    }
    let n = img.pixels().len() as f64;
    -hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            p * p.log2()
        })
        .sum::<f64>()
        + 0.0
}

/// Population standard deviation of the intensities.
pub fn rms_contrast(img: &GrayImage) -> f64 {
    let n = img.pixels().len() as f64;
    let mean = img.pixels().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = img.pixels().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    var.sqrt()
}
