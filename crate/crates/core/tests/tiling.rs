use histotype::raster::RasterImage;
use histotype::tiling::{self, TissueMask, TissueParams};
use proptest::prelude::*;

fn gradient(w: usize, h: usize) -> RasterImage {
    let data = (0..w * h)
        .flat_map(|i| {
            let (x, y) = (i % w, i / w);
            [(x * 7 % 256) as u8, (y * 11 % 256) as u8, ((x * y) % 256) as u8]
        })
        .collect();
    RasterImage::new(w, h, data, 0.5).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn origin_count_follows_stride_law(dim in 1usize..5000, tile in 1usize..700, ov in 0usize..700) {
        prop_assume!(ov < tile);
        let stride = tile - ov;
        let o = tiling::axis_origins(dim, tile, stride);
        let expected = if dim >= tile { (dim - tile) / stride + 1 } else { 0 };
        prop_assert_eq!(o.len(), expected);
        for (i, x) in o.iter().enumerate() {
            prop_assert_eq!(*x, i * stride);
            prop_assert!(x + tile <= dim);
        }
    }

    #[test]
    fn zero_overlap_tiles_partition_cropped_image(w in 1usize..80, h in 1usize..80, tile in 1usize..24) {
        let img = gradient(w, h);
        let mask = TissueMask::filled(w, h, 4, true);
        let grid = tiling::plan_tiles("s", w, h, tile, 0, &mask, 0.5).unwrap();
        let (cw, ch) = (w / tile * tile, h / tile * tile);
        prop_assert_eq!(grid.tiles.len(), (w / tile) * (h / tile));
        let mut covered = vec![0u8; w * h];
        let mut from_tiles = Vec::new();
        for (rec, t) in grid.tiles.iter().zip(tiling::extract_tiles(&img, &grid.tiles, tile).unwrap()) {
            for dy in 0..tile {
                for dx in 0..tile {
                    let (x, y) = (rec.x as usize + dx, rec.y as usize + dy);
                    covered[y * w + x] += 1;
                    prop_assert_eq!(t.pixel(dx, dy), img.pixel(x, y));
                    from_tiles.push(t.pixel(dx, dy));
                }
            }
        }
        let mut cropped = Vec::new();
        for y in 0..h {
            for x in 0..w {
                prop_assert_eq!(covered[y * w + x], u8::from(x < cw && y < ch));
                if x < cw && y < ch {
                    cropped.push(img.pixel(x, y));
                }
            }
        }
        from_tiles.sort_unstable();
        cropped.sort_unstable();
        prop_assert_eq!(from_tiles, cropped);
    }

    #[test]
    fn raising_min_fraction_never_adds_tiles(
        cells in prop::collection::vec(any::<bool>(), 16 * 16),
        t1 in 0.0f64..1.0,
        dt in 0.0f64..1.0,
        ov in 0usize..16,
    ) {
        let mask = TissueMask::from_fn(128, 128, 8, |x, y| cells[y * 16 + x]);
        let lo = tiling::plan_tiles("s", 128, 128, 32, ov, &mask, t1).unwrap();
        let hi = tiling::plan_tiles("s", 128, 128, 32, ov, &mask, (t1 + dt).min(1.0)).unwrap();
        let lo_ids: std::collections::BTreeSet<_> = lo.tiles.iter().map(|t| &t.tile_id).collect();
        prop_assert!(hi.tiles.iter().all(|t| lo_ids.contains(&t.tile_id)));
        prop_assert!(hi.tiles.iter().all(|t| t.tissue_fraction >= (t1 + dt).min(1.0)));
        prop_assert_eq!(lo, tiling::plan_tiles("s", 128, 128, 32, ov, &mask, t1).unwrap());
    }
}

#[test]
fn her2_overlap_configuration() {
    // 512-pixel tiles with 64 pixels of overlap give a 448-pixel stride
    for dim in [512, 959, 960, 4096, 100_000] {
        let n = tiling::axis_origins(dim, 512, 448).len();
        assert_eq!(n, (dim - 512) / 448 + 1, "dim {dim}");
    }
}

#[test]
fn tissue_disk_matches_generator_mask() {
    let (w, h) = (400usize, 300usize);
    let (cx, cy, r) = (210.0, 140.0, 95.0);
    let inside = |x: f64, y: f64| (x - cx).powi(2) + (y - cy).powi(2) <= r * r;
    let mut img = RasterImage::filled(w, h, [242, 242, 245], 0.5);
    for y in 0..h {
        for x in 0..w {
            if inside(x as f64 + 0.5, y as f64 + 0.5) {
                img.set_pixel(x, y, [214, 120, 170]);
            }
        }
    }
    let ds = 4;
    let mask = tiling::detect_tissue(&img, ds, &TissueParams::default()).unwrap();
    let (mut inter, mut union) = (0, 0);
    for y in 0..mask.height {
        for x in 0..mask.width {
            let truth = inside((x * ds) as f64 + ds as f64 / 2.0, (y * ds) as f64 + ds as f64 / 2.0);
            let m = mask.get(x, y);
            inter += usize::from(m && truth);
            union += usize::from(m || truth);
        }
    }
    let iou = inter as f64 / union as f64;
    assert!(iou >= 0.95, "IoU {iou}");
}
