//! Grayscale rasters: PNG I/O, resampling, CLAHE and contrast statistics.

mod clahe;
mod stats;

use std::io::{BufWriter, Cursor};
use std::path::{Path, PathBuf};

use thiserror::Error;

pub use clahe::{clahe, ClaheConfig, TileMapping};
pub use stats::{entropy, rms_contrast};

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("{}: file not found", .0.display())]
    NotFound(PathBuf),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed PNG: {0}")]
    Malformed(String),
    #[error("unsupported PNG bit depth: {0}")]
    UnsupportedBitDepth(u8),
    #[error("PNG encoding failed: {0}")]
    Encode(String),
    #[error("invalid image: {0}")]
    Invalid(String),
    #[error("image is {width}x{height} but the tile grid is {tiles_x}x{tiles_y}")]
    TooSmallForTiles {
        width: usize,
        height: usize,
        tiles_x: usize,
        tiles_y: usize,
    },
    #[error("invalid CLAHE configuration: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimensions(String),
}

pub type Result<T> = std::result::Result<T, ImageError>;

/// Single-channel image with intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(ImageError::Invalid(format!("empty extent {width}x{height}")));
        }
        if pixels.len() != width * height {
            return Err(ImageError::Invalid(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ImageError::Invalid(format!("intensity {bad} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Builds an image from `f(x, y)`, clamping into `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        assert!(width > 0 && height > 0, "image extents must be positive");
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let v = f(x, y);
                pixels.push(if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
            }
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self::from_fn(width, height, |_, _| value)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// Mirror image about the vertical axis.
    pub fn flip_horizontal(&self) -> Self {
        let mut pixels = self.pixels.clone();
        for row in pixels.chunks_mut(self.width) {
            row.reverse();
        }
        Self { pixels, ..*self }
    }

    /// Rounds every intensity to the nearest of 256 levels.
    pub fn quantized(&self) -> Self {
        Self {
            pixels: self.pixels.iter().map(|&v| quantize(v) as f32 / 255.0).collect(),
            ..*self
        }
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| quantize(v)).collect()
    }

    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit RGB raster, row-major, three bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(ImageError::Invalid(format!(
                "{} bytes for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

fn luminance(r: u8, g: u8, b: u8) -> f32 {
    ((0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64) / 255.0).clamp(0.0, 1.0) as f32
}

/// Decodes an 8-bit grayscale, RGB or RGBA PNG (palette and sub-byte
/// depths are expanded) to luminance.
pub fn decode_png(bytes: &[u8]) -> Result<GrayImage> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| ImageError::Malformed(e.to_string()))?;
    if reader.info().bit_depth == png::BitDepth::Sixteen {
        return Err(ImageError::UnsupportedBitDepth(16));
    }
    let (color, depth) = reader.output_color_type();
    if depth != png::BitDepth::Eight {
        return Err(ImageError::UnsupportedBitDepth(depth as u8));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| ImageError::Malformed("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| ImageError::Malformed(e.to_string()))?;
    let (w, h) = (frame.width as usize, frame.height as usize);
    let stride = frame.line_size;
    let channels = match color {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            return Err(ImageError::Malformed("palette was not expanded".into()))
        }
    };
    let mut pixels = Vec::with_capacity(w * h);
    for y in 0..h {
        let row = &buf[y * stride..][..w * channels];
        for px in row.chunks_exact(channels) {
            pixels.push(match channels {
                1 | 2 => px[0] as f32 / 255.0,
                _ => luminance(px[0], px[1], px[2]),
            });
        }
    }
    GrayImage::new(w, h, pixels)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            ImageError::NotFound(path.to_path_buf())
        } else {
            ImageError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    })
}

pub fn load_png(path: impl AsRef<Path>) -> Result<GrayImage> {
    decode_png(&read_file(path.as_ref())?)
}

fn encode(width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(BufWriter::new(&mut out), width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| ImageError::Encode(e.to_string()))?;
        writer
            .write_image_data(data)
            .map_err(|e| ImageError::Encode(e.to_string()))?;
        writer.finish().map_err(|e| ImageError::Encode(e.to_string()))?;
    }
    Ok(out)
}

pub fn encode_gray_png(img: &GrayImage) -> Result<Vec<u8>> {
    encode(img.width, img.height, png::ColorType::Grayscale, &img.to_u8())
}

pub fn encode_rgb_png(img: &RgbImage) -> Result<Vec<u8>> {
    encode(img.width, img.height, png::ColorType::Rgb, &img.data)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_png(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_gray_png(img)?)
}

pub fn save_rgb_png(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_rgb_png(img)?)
}

/// Bilinear resampling of a real-valued plane with half-pixel-centred
/// coordinates.  Output values stay within the input's range.
pub fn resize_plane(src: &[f32], width: usize, height: usize, out_w: usize, out_h: usize) -> Vec<f32> {
    assert_eq!(src.len(), width * height);
    let axis = |len_in: usize, len_out: usize| -> Vec<(usize, usize, f32)> {
        let scale = len_in as f64 / len_out as f64;
        (0..len_out)
            .map(|o| {
                let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len_in - 1) as f64);
                let i0 = pos.floor() as usize;
                let i1 = (i0 + 1).min(len_in - 1);
                (i0, i1, (pos - i0 as f64) as f32)
            })
            .collect()
    };
    let xs = axis(width, out_w);
    let ys = axis(height, out_h);
    let mut out = Vec::with_capacity(out_w * out_h);
    for &(y0, y1, ty) in &ys {
        let (r0, r1) = (&src[y0 * width..][..width], &src[y1 * width..][..width]);
        for &(x0, x1, tx) in &xs {
            let top = r0[x0] + (r0[x1] - r0[x0]) * tx;
            let bot = r1[x0] + (r1[x1] - r1[x0]) * tx;
            let v = top + (bot - top) * ty;
            let (lo, hi) = (
                r0[x0].min(r0[x1]).min(r1[x0]).min(r1[x1]),
                r0[x0].max(r0[x1]).max(r1[x0]).max(r1[x1]),
            );
            out.push(v.clamp(lo, hi));
        }
    }
    out
}

/// Nearest-neighbour resampling; never invents values.
pub fn resize_nearest<T: Copy>(src: &[T], width: usize, height: usize, out_w: usize, out_h: usize) -> Vec<T> {
    assert_eq!(src.len(), width * height);
    let pick = |o: usize, len_in: usize, len_out: usize| ((o * 2 + 1) * len_in / (2 * len_out)).min(len_in - 1);
    let xs: Vec<usize> = (0..out_w).map(|x| pick(x, width, out_w)).collect();
    let mut out = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        let row = &src[pick(y, height, out_h) * width..][..width];
        out.extend(xs.iter().map(|&x| row[x]));
    }
    out
}

pub fn resize_bilinear(img: &GrayImage, out_w: usize, out_h: usize) -> GrayImage {
    assert!(out_w > 0 && out_h > 0, "output extents must be positive");
    if (out_w, out_h) == (img.width, img.height) {
        return img.clone();
    }
    GrayImage {
        width: out_w,
        height: out_h,
        pixels: resize_plane(&img.pixels, img.width, img.height, out_w, out_h),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rgb_png(w: u32, h: u32, data: &[u8], color: png::ColorType) -> Vec<u8> {
        let mut out = Vec::new();
        let mut enc = png::Encoder::new(&mut out, w, h);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut wr = enc.write_header().unwrap();
        wr.write_image_data(data).unwrap();
        wr.finish().unwrap();
        out
    }

    #[test]
    fn white_png_decodes_to_ones() {
        let bytes = rgb_png(2, 2, &[255; 4], png::ColorType::Grayscale);
        let img = decode_png(&bytes).unwrap();
        assert_eq!((img.width(), img.height()), (2, 2));
        assert!(img.pixels().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn red_pixel_uses_luminance_weights() {
        let bytes = rgb_png(1, 1, &[255, 0, 0], png::ColorType::Rgb);
        let img = decode_png(&bytes).unwrap();
        assert!((img.pixels()[0] - 0.299).abs() < 1e-6);
        let bytes = rgb_png(1, 1, &[0, 255, 0, 12], png::ColorType::Rgba);
        assert!((decode_png(&bytes).unwrap().pixels()[0] - 0.587).abs() < 1e-6);
    }

    #[test]
    fn sixteen_bit_is_unsupported() {
        let mut out = Vec::new();
        let mut enc = png::Encoder::new(&mut out, 1, 1);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Sixteen);
        let mut wr = enc.write_header().unwrap();
        wr.write_image_data(&[1, 2]).unwrap();
        wr.finish().unwrap();
        assert!(matches!(decode_png(&out), Err(ImageError::UnsupportedBitDepth(16))));
    }

    #[test]
    fn distinct_errors_for_missing_and_malformed() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_png(dir.path().join("nope.png")), Err(ImageError::NotFound(_))));
        let bad = dir.path().join("bad.png");
        std::fs::write(&bad, b"\x89PNG\r\n\x1a\nnot really").unwrap();
        assert!(matches!(load_png(&bad), Err(ImageError::Malformed(_))));
    }

    #[test]
    fn gray_round_trip_within_quantization() {
        let img = GrayImage::from_fn(7, 5, |x, y| ((x * 31 + y * 17) % 97) as f32 / 96.0);
        let back = decode_png(&encode_gray_png(&img).unwrap()).unwrap();
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = GrayImage::from_fn(5, 3, |x, y| (x + y) as f32 / 8.0);
        assert_eq!(resize_bilinear(&img, 5, 3), img);
        let c = GrayImage::filled(7, 9, 0.3);
        let r = resize_bilinear(&c, 13, 4);
        assert!(r.pixels().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn resize_upscale_is_monotone() {
        let img = GrayImage::new(2, 1, vec![0.0, 1.0]).unwrap();
        let r = resize_bilinear(&img, 4, 1);
        assert!(r.pixels().windows(2).all(|w| w[0] <= w[1]), "{:?}", r.pixels());
        assert_eq!(r.pixels(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn nearest_resize_keeps_labels() {
        let src: Vec<u8> = (0..12).map(|i| (i % 3) as u8).collect();
        let out = resize_nearest(&src, 4, 3, 9, 7);
        assert!(out.iter().all(|v| *v <= 2));
        assert_eq!(resize_nearest(&src, 4, 3, 4, 3), src);
    }

    #[test]
    fn rejects_out_of_range_intensity() {
        assert!(GrayImage::new(1, 1, vec![1.5]).is_err());
        assert!(GrayImage::new(1, 1, vec![f32::NAN]).is_err());
    }
}
