use histotype::heatmap::{self, ColorRamp, HeatTile, HeatmapSpec};
use histotype::raster::RasterImage;
use proptest::prelude::*;

fn base(w: usize, h: usize) -> RasterImage {
    let data = (0..w * h * 3).map(|i| (i * 37 % 251) as u8).collect();
    RasterImage::new(w, h, data, 2.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn geometry_and_locality(
        ds in 1usize..5,
        tiles in prop::collection::vec((0usize..6, 0usize..6, 0.0f64..=1.0), 0..12),
    ) {
        let size = 16;
        let (w, h) = (6 * size / ds + 3, 6 * size / ds + 1);
        let heat: Vec<HeatTile> = tiles
            .iter()
            .enumerate()
            .map(|(i, (tx, ty, s))| HeatTile { tile_id: format!("t{i}"), x: tx * size, y: ty * size, size, score: *s })
            .collect();
        let spec = HeatmapSpec { base: base(w, h), tiles: heat.clone(), ramp: ColorRamp::GreenYellowRed, opacity: 0.4, downsample: ds };
        let out = heatmap::stitch_heatmap(&spec).unwrap();
        prop_assert_eq!((out.width(), out.height()), (w, h));
        for y in 0..h {
            for x in 0..w {
                let covered = heat.iter().any(|t| {
                    let (x0, y0, x1, y1) = t.footprint(ds);
                    x >= x0 && x < x1 && y >= y0 && y < y1
                });
                if !covered {
                    prop_assert_eq!(out.pixel(x, y), spec.base.pixel(x, y));
                }
            }
        }
        let mut reversed = spec.clone();
        reversed.tiles.reverse();
        prop_assert_eq!(heatmap::stitch_heatmap(&reversed).unwrap(), out);
    }

    #[test]
    fn red_channel_is_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let r = ColorRamp::GreenYellowRed;
        prop_assert!(r.color(lo)[0] <= r.color(hi)[0]);
    }
}
