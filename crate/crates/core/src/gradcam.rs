//! Gradient-weighted class activation maps for the segmentation network.

use thiserror::Error;

use crate::image::{resize_plane, GrayImage, RgbImage};
use crate::tensor::{Tape, Tensor, TensorError};
use crate::unet::{forward, ModelError, ModelWeights, Mode};

#[derive(Debug, Error)]
pub enum GradcamError {
    #[error("unknown probe layer `{0}`")]
    UnknownLayer(String),
    #[error("target class {class} out of range for {classes} classes")]
    ClassIndex { class: usize, classes: usize },
    #[error("input must be a single-image tensor [1, 1, H, W], got {0:?}")]
    Input(Vec<usize>),
    #[error("region mask has {found} pixels, input has {expected}")]
    Region { expected: usize, found: usize },
    #[error("image is {image:?}, heatmap is {heat:?}")]
    Dimensions { image: (usize, usize), heat: (usize, usize) },
    #[error("opacity must lie in [0, 1], got {0}")]
    Opacity(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, GradcamError>;

/// Which layer and class to explain.  With `region` set the class score is
/// the mean logit over those pixels, otherwise over the whole image.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSpec {
    pub layer: String,
    pub class: usize,
    pub region: Option<Vec<bool>>,
}

impl ProbeSpec {
    pub fn new(layer: impl Into<String>, class: usize) -> Self {
        Self {
            layer: layer.into(),
            class,
            region: None,
        }
    }

    /// Restricts the score to nonzero mask pixels; an empty mask keeps the
    /// whole-image score.
    pub fn with_mask(mut self, mask: &[u8]) -> Self {
        let region: Vec<bool> = mask.iter().map(|&m| m != 0).collect();
        self.region = region.iter().any(|&b| b).then_some(region);
        self
    }
}

/// Per-pixel relevance in `[0, 1]` at input resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    width: usize,
    height: usize,
    values: Vec<f32>,
}

impl Heatmap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum::<f64>() / self.values.len() as f64
    }

    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(0.0, f32::max)
    }

    /// Mean value inside and outside the inclusive box `(x0, y0, x1, y1)`.
    pub fn box_means(&self, bbox: (usize, usize, usize, usize)) -> (f64, f64) {
        let (x0, y0, x1, y1) = bbox;
        let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                let v = self.get(x, y) as f64;
                if (x0..=x1).contains(&x) && (y0..=y1).contains(&y) {
                    si += v;
                    ni += 1;
                } else {
                    so += v;
                    no += 1;
                }
            }
        }
        (si / ni.max(1) as f64, so / no.max(1) as f64)
    }

    pub fn to_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| self.get(x, y))
    }
}

/// Scales `raw` to `[0, 1]` by min-max; an all-zero map stays zero and a
/// constant nonzero map becomes all ones.
fn normalize(raw: &mut [f32]) {
    let lo = raw.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = raw.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if hi <= 0.0 {
        raw.fill(0.0);
    } else if hi == lo {
        raw.fill(1.0);
    } else {
        for v in raw.iter_mut() {
            *v = ((*v - lo) / (hi - lo)).clamp(0.0, 1.0);
        }
    }
}

/// Computes the Grad-CAM map of `probe` for a `[1,1,H,W]` input.  The
/// weights are only read.
pub fn gradcam(weights: &ModelWeights<f32>, input: &Tensor<f32>, probe: &ProbeSpec) -> Result<Heatmap> {
    let cfg = weights.config();
    if !cfg.layer_names().contains(&probe.layer) {
        return Err(GradcamError::UnknownLayer(probe.layer.clone()));
    }
    if probe.class >= cfg.num_classes {
        return Err(GradcamError::ClassIndex {
            class: probe.class,
            classes: cfg.num_classes,
        });
    }
    let &[1, 1, h, w] = input.shape() else {
        return Err(GradcamError::Input(input.shape().to_vec()));
    };
    if let Some(r) = &probe.region {
        if r.len() != h * w {
            return Err(GradcamError::Region {
                expected: h * w,
                found: r.len(),
            });
        }
    }
    let mut tape = Tape::<f32>::new();
    // A differentiable input makes every activation downstream record a gradient.
    let x = tape.leaf(input.clone().with_requires_grad(true));
    let pass = forward(weights, &mut tape, x, Mode::Eval, false)?;
    let score = tape.mean_channel(pass.logits, probe.class, probe.region.as_deref())?;
    tape.backward(score)?;

    let layer = pass.layers[&probe.layer];
    let [_, c, lh, lw] = tape.value(layer).dims4("gradcam")?;
    let plane = lh * lw;
    let acts = tape.value(layer).data();
    let zeros = vec![0.0; acts.len()];
    let grads = tape.grad(layer).unwrap_or(&zeros);
    let mut raw = vec![0.0f64; plane];
    for k in 0..c {
        let g = &grads[k * plane..][..plane];
        let a = &acts[k * plane..][..plane];
        let wk = g.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
        if wk == 0.0 {
            continue;
        }
        for (r, &av) in raw.iter_mut().zip(a) {
            *r += wk * av as f64;
        }
    }
    let raw: Vec<f32> = raw.into_iter().map(|v| v.max(0.0) as f32).collect();
    let mut values = if (lw, lh) == (w, h) {
        raw
    } else {
        resize_plane(&raw, lw, lh, w, h)
    };
    normalize(&mut values);
    Ok(Heatmap {
        width: w,
        height: h,
        values,
    })
}

/// Five-stop colormap: blue, cyan, green, yellow, red at 0, 1/4, 1/2, 3/4, 1.
pub fn jet(t: f32) -> [f32; 3] {
    const STOPS: [[f32; 3]; 5] = [
        [0.0, 0.0, 1.0],
        [0.0, 1.0, 1.0],
        [0.0, 1.0, 0.0],
        [1.0, 1.0, 0.0],
        [1.0, 0.0, 0.0],
    ];
    let s = t.clamp(0.0, 1.0) * 4.0;
    let i = (s.floor() as usize).min(3);
    let f = s - i as f32;
    let (a, b) = (STOPS[i], STOPS[i + 1]);
    [0, 1, 2].map(|k| a[k] + (b[k] - a[k]) * f)
}

/// Blends the colormapped heatmap over the grayscale image:
/// `(1 - opacity) * gray + opacity * color`, rounded to 8 bits.
pub fn overlay(img: &GrayImage, heat: &Heatmap, opacity: f64) -> Result<RgbImage> {
    if (img.width(), img.height()) != (heat.width, heat.height) {
        return Err(GradcamError::Dimensions {
            image: (img.width(), img.height()),
            heat: (heat.width, heat.height),
        });
    }
    if !(0.0..=1.0).contains(&opacity) {
        return Err(GradcamError::Opacity(opacity));
    }
    let mut data = Vec::with_capacity(img.pixels().len() * 3);
    for (&g, &h) in img.pixels().iter().zip(&heat.values) {
        let color = jet(h);
        for c in color {
            let v = (1.0 - opacity) * g as f64 + opacity * c as f64;
            data.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(RgbImage::new(img.width(), img.height(), data).expect("buffer sized from image"))
}
