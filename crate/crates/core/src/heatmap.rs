//! Score overlays stitched onto a downsampled slide.

use std::collections::BTreeMap;
use std::path::Path;

use crate::csvio::{self, CsvWriter};
use crate::error::{Error, Result};
use crate::raster::RasterImage;
use crate::tiling::{self, TileRecord};

/// Score-to-colour mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ColorRamp {
    /// Piecewise linear: green at 0, yellow at ½, red at 1.
    #[default]
    GreenYellowRed,
}

impl ColorRamp {
    pub fn color(&self, score: f64) -> [f64; 3] {
        let s = score.clamp(0.0, 1.0);
        match self {
            ColorRamp::GreenYellowRed if s <= 0.5 => [510.0 * s, 255.0, 0.0],
            ColorRamp::GreenYellowRed => [255.0, 510.0 * (1.0 - s), 0.0],
        }
    }
}

/// A tile footprint in level-0 (tiling resolution) pixels with one score.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatTile {
    pub tile_id: String,
    pub x: usize,
    pub y: usize,
    pub size: usize,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct HeatmapSpec {
    /// Slide downsampled by `downsample`.
    pub base: RasterImage,
    pub tiles: Vec<HeatTile>,
    pub ramp: ColorRamp,
    pub opacity: f64,
    pub downsample: usize,
}

impl HeatTile {
    /// Half-open footprint `(x0, y0, x1, y1)` on the downsampled base.
    pub fn footprint(&self, downsample: usize) -> (usize, usize, usize, usize) {
        (
            self.x / downsample,
            self.y / downsample,
            (self.x + self.size) / downsample,
            (self.y + self.size) / downsample,
        )
    }
}

/// Blends each tile's tint over the base. Pixels covered by several tiles
/// get the mean tint; pixels covered by none are copied unchanged.
pub fn stitch_heatmap(spec: &HeatmapSpec) -> Result<RasterImage> {
    if !(0.0..=1.0).contains(&spec.opacity) {
        return Err(Error::Invalid(format!("opacity {} not in [0, 1]", spec.opacity)));
    }
    if spec.downsample == 0 {
        return Err(Error::Invalid("downsample factor must be >= 1".into()));
    }
    let (w, h) = (spec.base.width(), spec.base.height());
    let mut tiles: Vec<&HeatTile> = spec.tiles.iter().collect();
    tiles.sort_by(|a, b| (a.y, a.x, &a.tile_id).cmp(&(b.y, b.x, &b.tile_id)));

    let mut sum = vec![[0.0f64; 3]; w * h];
    let mut count = vec![0u32; w * h];
    for t in tiles {
        if !t.score.is_finite() {
            return Err(Error::Invalid(format!("tile `{}` has a non-finite score", t.tile_id)));
        }
        let (x0, y0, x1, y1) = t.footprint(spec.downsample);
        if x1 > w || y1 > h {
            return Err(Error::Invalid(format!(
                "tile `{}` footprint ({x0},{y0})-({x1},{y1}) outside {w}x{h} base",
                t.tile_id
            )));
        }
        let tint = spec.ramp.color(t.score);
        for y in y0..y1 {
            for x in x0..x1 {
                let i = y * w + x;
                for c in 0..3 {
                    sum[i][c] += tint[c];
                }
                count[i] += 1;
            }
        }
    }

    let mut out = spec.base.clone();
    let a = spec.opacity;
    for (i, px) in out.data_mut().chunks_exact_mut(3).enumerate() {
        if count[i] == 0 {
            continue;
        }
        for c in 0..3 {
            let tint = sum[i][c] / count[i] as f64;
            px[c] = ((1.0 - a) * px[c] as f64 + a * tint).round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(out)
}

/// Heat tiles for one slide from its tile records and a score lookup.
pub fn heat_tiles(
    records: &[TileRecord],
    scores: &BTreeMap<String, f64>,
    tile_size: usize,
) -> Result<Vec<HeatTile>> {
    records
        .iter()
        .map(|r| {
            let score = *scores
                .get(&r.tile_id)
                .ok_or_else(|| Error::MissingInput(format!("score for tile `{}`", r.tile_id)))?;
            Ok(HeatTile {
                tile_id: r.tile_id.clone(),
                x: r.x as usize,
                y: r.y as usize,
                size: tile_size,
                score,
            })
        })
        .collect()
}

/// Downsamples a slide at tiling resolution by an integer factor.
pub fn downsample_base(slide: &RasterImage, downsample: usize) -> Result<RasterImage> {
    if downsample == 0 {
        return Err(Error::Invalid("downsample factor must be >= 1".into()));
    }
    tiling::resample_to_target_mpp(slide, slide.mpp * downsample as f64)
}

pub fn save_sidecar(tiles: &[HeatTile], path: &Path) -> Result<()> {
    let mut w = CsvWriter::new(&["tile_id", "score"]);
    let mut sorted: Vec<&HeatTile> = tiles.iter().collect();
    sorted.sort_by(|a, b| a.tile_id.cmp(&b.tile_id));
    for t in sorted {
        w.row([t.tile_id.clone(), t.score.to_string()]);
    }
    csvio::write_file(path, w.into_string().as_bytes())
}
