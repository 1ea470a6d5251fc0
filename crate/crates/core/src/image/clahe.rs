use super::{GrayImage, ImageError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClaheConfig {
    pub tiles_x: usize,
    pub tiles_y: usize,
    /// Multiple of the uniform bin level above which counts are clipped.
    pub clip_limit: f64,
    pub bins: usize,
}

impl Default for ClaheConfig {
    fn default() -> Self {
        Self {
            tiles_x: 8,
            tiles_y: 8,
            clip_limit: 2.0,
            bins: 256,
        }
    }
}

impl ClaheConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tiles_x == 0 || self.tiles_y == 0 {
            return Err(ImageError::Config("tile grid must be at least 1x1".into()));
        }
        if self.bins < 2 {
            return Err(ImageError::Config(format!("need at least 2 bins, got {}", self.bins)));
        }
        if !(self.clip_limit >= 1.0) || !self.clip_limit.is_finite() {
            return Err(ImageError::Config(format!(
                "clip limit must be a finite value >= 1, got {}",
                self.clip_limit
            )));
        }
        Ok(())
    }

    pub fn bin_of(&self, v: f32) -> usize {
        ((v.clamp(0.0, 1.0) as f64 * self.bins as f64) as usize).min(self.bins - 1)
    }
}

/// Equalization mapping of one tile.
#[derive(Debug, Clone, PartialEq)]
pub struct TileMapping {
    /// Output intensity per input bin.
    pub lut: Vec<f32>,
    /// Histogram after clipping, before the excess is redistributed.
    pub clipped: Vec<f64>,
    /// Count of a flat histogram: tile pixels / bins.
    pub uniform_level: f64,
    /// Tiles occupying a single bin have no contrast and map through unchanged.
    pub identity: bool,
}

impl TileMapping {
    fn apply(&self, v: f32, cfg: &ClaheConfig) -> f32 {
        if self.identity {
            v
        } else {
            self.lut[cfg.bin_of(v)]
        }
    }
}

/// Pixel span `[start, end)` of each tile along one axis; the last tile
/// absorbs the remainder.
fn spans(len: usize, tiles: usize) -> Vec<(usize, usize)> {
    let size = len / tiles;
    (0..tiles)
        .map(|i| {
            let end = if i + 1 == tiles { len } else { (i + 1) * size };
            (i * size, end)
        })
        .collect()
}

/// For every pixel along one axis: the two neighbouring tiles and the
/// blend weight of the second.
fn blend_axis(len: usize, spans: &[(usize, usize)]) -> Vec<(usize, usize, f32)> {
    let centers: Vec<f64> = spans.iter().map(|&(a, b)| (a + b - 1) as f64 / 2.0).collect();
    let last = centers.len() - 1;
    (0..len)
        .map(|p| {
            let p = p as f64;
            if p <= centers[0] {
                (0, 0, 0.0)
            } else if p >= centers[last] {
                (last, last, 0.0)
            } else {
                let i = centers.iter().rposition(|&c| c <= p).expect("p > centers[0]");
                let t = (p - centers[i]) / (centers[i + 1] - centers[i]);
                (i, i + 1, t as f32)
            }
        })
        .collect()
}

fn tile_mapping(img: &GrayImage, xs: (usize, usize), ys: (usize, usize), cfg: &ClaheConfig) -> TileMapping {
    let bins = cfg.bins;
    let mut hist = vec![0.0f64; bins];
    for y in ys.0..ys.1 {
        for &v in &img.pixels[y * img.width + xs.0..y * img.width + xs.1] {
            hist[cfg.bin_of(v)] += 1.0;
        }
    }
    let total = ((xs.1 - xs.0) * (ys.1 - ys.0)) as f64;
    let uniform_level = total / bins as f64;
    let limit = cfg.clip_limit * uniform_level;
    let identity = hist.iter().filter(|&&h| h > 0.0).count() <= 1;

    let mut excess = 0.0;
    let clipped: Vec<f64> = hist
        .iter()
        .map(|&h| {
            if h > limit {
                excess += h - limit;
                limit
            } else {
                h
            }
        })
        .collect();
    // single pass: equal share per bin, rounding residue to the last bin
    let share = excess / bins as f64;
    let mut spread: Vec<f64> = clipped.iter().map(|&h| h + share).collect();
    let residue = total - spread.iter().sum::<f64>();
    spread[bins - 1] += residue;

    let mut cdf = 0.0;
    let lut = spread
        .iter()
        .map(|&h| {
            cdf += h;
            (cdf / total).clamp(0.0, 1.0) as f32
        })
        .collect();
    TileMapping {
        lut,
        clipped,
        uniform_level,
        identity,
    }
}

/// Per-tile equalization mappings, row-major over the tile grid.
pub fn tile_mappings(img: &GrayImage, cfg: &ClaheConfig) -> Result<Vec<TileMapping>> {
    cfg.validate()?;
    if img.width < cfg.tiles_x || img.height < cfg.tiles_y {
        return Err(ImageError::TooSmallForTiles {
            width: img.width,
            height: img.height,
            tiles_x: cfg.tiles_x,
            tiles_y: cfg.tiles_y,
        });
    }
    let xs = spans(img.width, cfg.tiles_x);
    let ys = spans(img.height, cfg.tiles_y);
    Ok(ys
        .iter()
        .flat_map(|&ty| xs.iter().map(move |&tx| (tx, ty)))
        .map(|(tx, ty)| tile_mapping(img, tx, ty, cfg))
        .collect())
}

/// Contrast-limited adaptive histogram equalization with bilinear blending
/// of neighbouring tile mappings (4 tiles inside, 2 along edges, 1 in corners).
pub fn clahe(img: &GrayImage, cfg: &ClaheConfig) -> Result<GrayImage> {
    let maps = tile_mappings(img, cfg)?;
    let bx = blend_axis(img.width, &spans(img.width, cfg.tiles_x));
    let by = blend_axis(img.height, &spans(img.height, cfg.tiles_y));
    let tx = cfg.tiles_x;
    let mut pixels = Vec::with_capacity(img.pixels.len());
    for (y, &(r0, r1, wy)) in by.iter().enumerate() {
        for (x, &(c0, c1, wx)) in bx.iter().enumerate() {
            let v = img.pixels[y * img.width + x];
            let m = |r: usize, c: usize| maps[r * tx + c].apply(v, cfg);
            let top = m(r0, c0) + (m(r0, c1) - m(r0, c0)) * wx;
            let bot = m(r1, c0) + (m(r1, c1) - m(r1, c0)) * wx;
            pixels.push((top + (bot - top) * wy).clamp(0.0, 1.0));
        }
    }
    Ok(GrayImage {
        width: img.width,
        height: img.height,
        pixels,
    })
}
