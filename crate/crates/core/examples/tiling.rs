//! Tissue detection and tile planning on a small synthetic slide.

use histotype::raster::RasterImage;
use histotype::tiling::{self, TissueParams};

fn main() -> histotype::error::Result<()> {
    // 0.25 um/px source with a pink tissue block on white glass
    let mut slide = RasterImage::filled(512, 384, [245, 245, 245], 0.25);
    for y in 64..320 {
        for x in 96..448 {
            slide.set_pixel(x, y, [200, 110, 160]);
        }
    }
    let slide = tiling::resample_to_target_mpp(&slide, 0.5)?;
    println!("working resolution: {}x{} at {} um/px", slide.width(), slide.height(), slide.mpp);

    let mask = tiling::detect_tissue(&slide, 4, &TissueParams::default())?;
    println!("tissue mask cells: {}", mask.count());

    for overlap in [0, 16] {
        let grid = tiling::plan_tiles("demo", slide.width(), slide.height(), 64, overlap, &mask, 0.5)?;
        println!("tile 64, overlap {overlap}: {} tiles kept", grid.tiles.len());
        for t in grid.tiles.iter().take(3) {
            println!("  {} at ({}, {}) tissue {:.2}", t.tile_id, t.x, t.y, t.tissue_fraction);
        }
    }
    Ok(())
}
