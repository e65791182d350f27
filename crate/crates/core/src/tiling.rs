//! Tissue detection, tile-grid planning and tile extraction.

use std::path::Path;

use log::warn;
use rayon::prelude::*;

use crate::csvio::{self, CsvWriter};
use crate::error::{Error, Result};
use crate::raster::RasterImage;

/// Area-averaging downsample to `target_mpp`. Output dimensions are
/// `floor(dim * mpp / target_mpp)`; a matching resolution returns a copy.
pub fn resample_to_target_mpp(image: &RasterImage, target_mpp: f64) -> Result<RasterImage> {
    if !(target_mpp > 0.0 && target_mpp.is_finite()) {
        return Err(Error::Invalid("target mpp must be positive".into()));
    }
    let rel = (target_mpp - image.mpp) / image.mpp;
    if rel.abs() <= 1e-9 {
        let mut out = image.clone();
        out.mpp = target_mpp;
        return Ok(out);
    }
    if rel < 0.0 {
        return Err(Error::Invalid(format!(
            "upsampling from {} to {target_mpp} mpp is not supported",
            image.mpp
        )));
    }
    let factor = target_mpp / image.mpp;
    let out_w = (image.width() as f64 / factor + 1e-9).floor() as usize;
    let out_h = (image.height() as f64 / factor + 1e-9).floor() as usize;
    let wx = area_weights(out_w, factor);
    let wy = area_weights(out_h, factor);

    let (w, h) = (image.width(), image.height());
    let src = image.data();
    // horizontal pass
    let mut tmp = vec![0.0f64; out_w * h * 3];
    tmp.par_chunks_mut(out_w * 3).enumerate().for_each(|(y, row)| {
        for (ox, weights) in wx.iter().enumerate() {
            let mut acc = [0.0f64; 3];
            for &(sx, wgt) in weights {
                let i = (y * w + sx) * 3;
                for c in 0..3 {
                    acc[c] += wgt * src[i + c] as f64;
                }
            }
            row[ox * 3..ox * 3 + 3].copy_from_slice(&acc);
        }
    });
    // vertical pass
    let mut out = vec![0u8; out_w * out_h * 3];
    out.par_chunks_mut(out_w * 3).enumerate().for_each(|(oy, row)| {
        for ox in 0..out_w {
            let mut acc = [0.0f64; 3];
            for &(sy, wgt) in &wy[oy] {
                let i = (sy * out_w + ox) * 3;
                for c in 0..3 {
                    acc[c] += wgt * tmp[i + c];
                }
            }
            for c in 0..3 {
                row[ox * 3 + c] = acc[c].round().clamp(0.0, 255.0) as u8;
            }
        }
    });
    RasterImage::new(out_w, out_h, out, target_mpp)
}

/// Normalized overlap weights of source pixels for each output pixel of a
/// box filter with the given (>1) scale factor.
fn area_weights(out_len: usize, factor: f64) -> Vec<Vec<(usize, f64)>> {
    (0..out_len)
        .map(|o| {
            let lo = o as f64 * factor;
            let hi = (o + 1) as f64 * factor;
            let mut v = Vec::new();
            let mut s = lo.floor() as usize;
            while (s as f64) < hi {
                let overlap = (hi.min(s as f64 + 1.0) - lo.max(s as f64)).max(0.0);
                if overlap > 0.0 {
                    v.push((s, overlap));
                }
                s += 1;
            }
            let total: f64 = v.iter().map(|(_, w)| w).sum();
            v.iter_mut().for_each(|(_, w)| *w /= total);
            v
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TissueParams {
    /// Fixed saturation cut-off; `None` selects Otsu on the saturation channel.
    pub saturation_threshold: Option<f64>,
    /// Lower bound on the effective cut-off so that near-white noise is never tissue.
    pub min_saturation: f64,
}

impl Default for TissueParams {
    fn default() -> Self {
        TissueParams {
            saturation_threshold: None,
            min_saturation: 0.05,
        }
    }
}

/// Binary tissue raster at `downsample` relative to its source image.
#[derive(Debug, Clone, PartialEq)]
pub struct TissueMask {
    pub width: usize,
    pub height: usize,
    pub downsample: usize,
    pub source_width: usize,
    pub source_height: usize,
    data: Vec<bool>,
}

impl TissueMask {
    pub fn from_fn(
        source_width: usize,
        source_height: usize,
        downsample: usize,
        f: impl Fn(usize, usize) -> bool,
    ) -> Self {
        let width = source_width.div_ceil(downsample);
        let height = source_height.div_ceil(downsample);
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        TissueMask {
            width,
            height,
            downsample,
            source_width,
            source_height,
            data,
        }
    }

    pub fn filled(source_width: usize, source_height: usize, downsample: usize, value: bool) -> Self {
        Self::from_fn(source_width, source_height, downsample, |_, _| value)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn cells(&self) -> &[bool] {
        &self.data
    }

    /// Fraction of the source-pixel rectangle covered by tissue cells.
    pub fn coverage(&self, x: usize, y: usize, w: usize, h: usize) -> f64 {
        if w == 0 || h == 0 {
            return 0.0;
        }
        let d = self.downsample;
        let (x1, y1) = (x + w, y + h);
        let mut covered = 0usize;
        for cy in y / d..y1.div_ceil(d).min(self.height) {
            let oy = (y1.min((cy + 1) * d)).saturating_sub(y.max(cy * d));
            if oy == 0 {
                continue;
            }
            for cx in x / d..x1.div_ceil(d).min(self.width) {
                if self.get(cx, cy) {
                    let ox = (x1.min((cx + 1) * d)).saturating_sub(x.max(cx * d));
                    covered += ox * oy;
                }
            }
        }
        covered as f64 / (w * h) as f64
    }
}

fn saturation(rgb: [f64; 3]) -> f64 {
    let max = rgb[0].max(rgb[1]).max(rgb[2]);
    let min = rgb[0].min(rgb[1]).min(rgb[2]);
    if max <= 0.0 {
        0.0
    } else {
        (max - min) / max
    }
}

/// Otsu threshold over values in `[0, 1]` using 256 bins. Returns the upper
/// edge of the last background bin, or `None` when all values share a bin.
pub fn otsu_threshold(values: &[f64]) -> Option<f64> {
    const BINS: usize = 256;
    let mut hist = [0u64; BINS];
    for v in values {
        let b = ((v.clamp(0.0, 1.0) * BINS as f64) as usize).min(BINS - 1);
        hist[b] += 1;
    }
    if hist.iter().filter(|c| **c > 0).count() < 2 {
        return None;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, c)| i as f64 * *c as f64).sum();
    let (mut w0, mut sum0) = (0.0f64, 0.0f64);
    let (mut best, mut best_bin) = (-1.0f64, 0usize);
    for (i, c) in hist.iter().enumerate().take(BINS - 1) {
        w0 += *c as f64;
        sum0 += i as f64 * *c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best {
            best = between;
            best_bin = i;
        }
    }
    Some((best_bin + 1) as f64 / BINS as f64)
}

/// Marks cells whose block-averaged HSV saturation exceeds the threshold,
/// then applies one 3x3 morphological closing.
pub fn detect_tissue(image: &RasterImage, downsample: usize, params: &TissueParams) -> Result<TissueMask> {
    if image.is_empty() {
        return Err(Error::Invalid("cannot detect tissue in an empty image".into()));
    }
    if downsample == 0 {
        return Err(Error::Invalid("downsample must be at least 1".into()));
    }
    let (w, h) = (image.width(), image.height());
    let mw = w.div_ceil(downsample);
    let mh = h.div_ceil(downsample);
    let sats: Vec<f64> = (0..mw * mh)
        .into_par_iter()
        .map(|i| {
            let (cx, cy) = (i % mw, i / mw);
            let mut acc = [0.0f64; 3];
            let mut n = 0.0;
            for y in cy * downsample..((cy + 1) * downsample).min(h) {
                for x in cx * downsample..((cx + 1) * downsample).min(w) {
                    let p = image.pixel(x, y);
                    for c in 0..3 {
                        acc[c] += p[c] as f64;
                    }
                    n += 1.0;
                }
            }
            saturation([acc[0] / n, acc[1] / n, acc[2] / n])
        })
        .collect();

    let cut = params
        .saturation_threshold
        .or_else(|| otsu_threshold(&sats))
        .unwrap_or(params.min_saturation)
        .max(params.min_saturation);
    let raw: Vec<bool> = sats.iter().map(|s| *s > cut).collect();
    let closed = erode(&dilate(&raw, mw, mh), mw, mh);
    Ok(TissueMask {
        width: mw,
        height: mh,
        downsample,
        source_width: w,
        source_height: h,
        data: closed,
    })
}

fn neighbourhood(x: usize, y: usize, w: usize, h: usize) -> impl Iterator<Item = (usize, usize)> {
    let xs = x.saturating_sub(1)..=(x + 1).min(w - 1);
    xs.flat_map(move |nx| (y.saturating_sub(1)..=(y + 1).min(h - 1)).map(move |ny| (nx, ny)))
}

fn dilate(m: &[bool], w: usize, h: usize) -> Vec<bool> {
    (0..w * h)
        .map(|i| neighbourhood(i % w, i / w, w, h).any(|(x, y)| m[y * w + x]))
        .collect()
}

// out-of-bounds neighbours are ignored, so a full mask stays full
fn erode(m: &[bool], w: usize, h: usize) -> Vec<bool> {
    (0..w * h)
        .map(|i| neighbourhood(i % w, i / w, w, h).all(|(x, y)| m[y * w + x]))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileRecord {
    pub wsi_id: String,
    pub tile_id: String,
    pub x: u32,
    pub y: u32,
    pub tissue_fraction: f64,
}

impl TileRecord {
    pub fn new(wsi_id: &str, x: u32, y: u32, tissue_fraction: f64) -> Self {
        TileRecord {
            wsi_id: wsi_id.to_string(),
            tile_id: format!("{wsi_id}_{x}_{y}"),
            x,
            y,
            tissue_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileGrid {
    pub tile_size: usize,
    pub stride: usize,
    pub min_tissue_fraction: f64,
    pub tiles: Vec<TileRecord>,
}

/// Tile origins along one axis: `0, stride, 2*stride, ...` while the tile fits.
pub fn axis_origins(dim: usize, tile_size: usize, stride: usize) -> Vec<usize> {
    if tile_size == 0 || stride == 0 || dim < tile_size {
        return Vec::new();
    }
    (0..=(dim - tile_size)).step_by(stride).collect()
}

/// Plans a row-major grid of full tiles and keeps those whose tissue
/// coverage reaches `min_tissue_fraction`. Partial edge tiles are dropped.
pub fn plan_tiles(
    wsi_id: &str,
    width: usize,
    height: usize,
    tile_size: usize,
    overlap: usize,
    mask: &TissueMask,
    min_tissue_fraction: f64,
) -> Result<TileGrid> {
    if tile_size == 0 {
        return Err(Error::Invalid("tile size must be positive".into()));
    }
    if overlap >= tile_size {
        return Err(Error::Invalid(format!(
            "overlap {overlap} must be smaller than tile size {tile_size}"
        )));
    }
    if !(0.0..=1.0).contains(&min_tissue_fraction) {
        return Err(Error::Invalid("min_tissue_fraction must lie in [0, 1]".into()));
    }
    if mask.source_width != width || mask.source_height != height {
        return Err(Error::Invalid(format!(
            "mask was computed for {}x{}, image is {width}x{height}",
            mask.source_width, mask.source_height
        )));
    }
    let stride = tile_size - overlap;
    if tile_size > width || tile_size > height {
        warn!("{wsi_id}: tile size {tile_size} exceeds image {width}x{height}; no tiles");
    }
    let xs = axis_origins(width, tile_size, stride);
    let ys = axis_origins(height, tile_size, stride);
    let mut tiles = Vec::new();
    for &y in &ys {
        for &x in &xs {
            let frac = mask.coverage(x, y, tile_size, tile_size);
            if frac >= min_tissue_fraction {
                tiles.push(TileRecord::new(wsi_id, x as u32, y as u32, frac));
            }
        }
    }
    Ok(TileGrid {
        tile_size,
        stride,
        min_tissue_fraction,
        tiles,
    })
}

/// Lossless copy of one tile.
pub fn extract_tile(image: &RasterImage, record: &TileRecord, tile_size: usize) -> Result<RasterImage> {
    let (x, y) = (record.x as usize, record.y as usize);
    if x + tile_size > image.width() || y + tile_size > image.height() {
        return Err(Error::Invalid(format!(
            "tile {} exceeds image bounds {}x{}",
            record.tile_id,
            image.width(),
            image.height()
        )));
    }
    let mut data = Vec::with_capacity(tile_size * tile_size * 3);
    let src = image.data();
    for r in y..y + tile_size {
        let start = (r * image.width() + x) * 3;
        data.extend_from_slice(&src[start..start + tile_size * 3]);
    }
    RasterImage::new(tile_size, tile_size, data, image.mpp)
}

/// Extracts many tiles in parallel; output order follows `records`.
pub fn extract_tiles(image: &RasterImage, records: &[TileRecord], tile_size: usize) -> Result<Vec<RasterImage>> {
    records
        .par_iter()
        .map(|r| extract_tile(image, r, tile_size))
        .collect()
}

pub const TILE_MANIFEST_HEADER: [&str; 5] = ["tile_id", "wsi_id", "x", "y", "tissue_fraction"];

pub fn save_tile_manifest(tiles: &[TileRecord], path: &Path) -> Result<()> {
    let mut w = CsvWriter::new(&TILE_MANIFEST_HEADER);
    for t in tiles {
        w.row([
            t.tile_id.clone(),
            t.wsi_id.clone(),
            t.x.to_string(),
            t.y.to_string(),
            t.tissue_fraction.to_string(),
        ]);
    }
    w.finish(path)
}

pub fn load_tile_manifest(path: &Path) -> Result<Vec<TileRecord>> {
    let (rows, _) = csvio::read_table(path, &TILE_MANIFEST_HEADER, &[])?;
    rows.into_iter()
        .map(|row| {
            let f = &row.fields;
            let x = csvio::parse_usize(path, row.line, &f[2], "x")? as u32;
            let y = csvio::parse_usize(path, row.line, &f[3], "y")? as u32;
            let frac = csvio::parse_f64(path, row.line, &f[4], "tissue_fraction")?;
            if !(0.0..=1.0).contains(&frac) {
                return Err(Error::parse(path, row.line, "tissue_fraction outside [0, 1]"));
            }
            Ok(TileRecord {
                tile_id: f[0].clone(),
                wsi_id: f[1].clone(),
                x,
                y,
                tissue_fraction: frac,
            })
        })
        .collect()
}
