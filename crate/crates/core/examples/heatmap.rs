//! Tumor-score overlay stitched onto a downsampled slide.

use std::collections::BTreeMap;

use histotype::heatmap::{self, ColorRamp, HeatmapSpec};
use histotype::raster::RasterImage;
use histotype::tiling::TileRecord;

fn main() -> histotype::error::Result<()> {
    let slide = RasterImage::filled(256, 256, [230, 200, 220], 0.5);
    let mut records = Vec::new();
    let mut scores = BTreeMap::new();
    for ty in 0..4u32 {
        for tx in 0..4u32 {
            let t = TileRecord::new("demo", tx * 64, ty * 64, 1.0);
            scores.insert(t.tile_id.clone(), (tx + ty) as f64 / 6.0);
            records.push(t);
        }
    }
    let spec = HeatmapSpec {
        base: heatmap::downsample_base(&slide, 4)?,
        tiles: heatmap::heat_tiles(&records, &scores, 64)?,
        ramp: ColorRamp::GreenYellowRed,
        opacity: 0.4,
        downsample: 4,
    };
    let out = heatmap::stitch_heatmap(&spec)?;
    println!("overlay {}x{}", out.width(), out.height());
    println!("top-left (low score):     {:?}", out.pixel(0, 0));
    println!("bottom-right (high score): {:?}", out.pixel(63, 63));

    let dir = std::env::temp_dir().join("histotype_heatmap_example");
    out.save_png(&dir.join("demo.png"))?;
    heatmap::save_sidecar(&spec.tiles, &dir.join("demo_scores.csv"))?;
    println!("written to {}", dir.display());
    Ok(())
}
