//! Synthetic H&E slides with known ground truth.
//!
//! Slides are rendered through the stain forward model
//! `I = I0 * 10^(-M * C)` so that tissue masks, tumor regions and stain
//! matrices are all known exactly. Besides tissue, slides carry the
//! non-tumor content a tumor detector must reject: ink marker strokes,
//! folded (doubly dense) tissue and blank glass.

use std::path::{Path, PathBuf};

use rand::Rng as _;
use rayon::prelude::*;

use crate::csvio::{self, CsvWriter};
use crate::error::{Error, Result};
use crate::labels::{SlideLabel, Subtype, Task};
use crate::manifest::{CohortManifest, SlideRecord};
use crate::raster::RasterImage;
use crate::rng::{self, Rng};
use crate::stain::{angle_deg, StainProfile};
use crate::tiling::TileRecord;

/// Widely used H&E reference basis and concentration scale.
pub fn reference_he() -> StainProfile {
    StainProfile::new([0.5626, 0.7201, 0.4062], [0.2159, 0.8012, 0.5581], [1.9705, 1.0308])
        .expect("reference profile is valid")
}

/// Renders concentrations through a stain matrix into an 8-bit tile.
pub fn synthesize_stained(
    matrix: &[[f64; 3]; 2],
    conc: &[[f64; 2]],
    width: usize,
    height: usize,
    i0: f64,
    mpp: f64,
) -> RasterImage {
    assert_eq!(conc.len(), width * height);
    let data = conc
        .iter()
        .flat_map(|c| {
            (0..3).map(move |k| {
                let od = matrix[0][k] * c[0] + matrix[1][k] * c[1];
                (i0 * 10f64.powf(-od)).clamp(0.0, 255.0).round() as u8
            })
        })
        .collect();
    RasterImage::new(width, height, data, mpp).expect("sizes match")
}

/// Concentrations with a share of near-pure pixels of each stain, as in
/// real tissue where nuclei and stroma separate.
pub fn random_concentrations(r: &mut Rng, n: usize) -> Vec<[f64; 2]> {
    (0..n)
        .map(|_| {
            let u: f64 = r.random();
            if u < 0.25 {
                [r.random_range(0.5..1.4), 0.0]
            } else if u < 0.5 {
                [0.0, r.random_range(0.5..1.4)]
            } else {
                [r.random_range(0.1..1.0), r.random_range(0.1..1.0)]
            }
        })
        .collect()
}

/// Random H&E-like stain pair: perturbed reference vectors with all
/// components at least 0.15, hematoxylin redder than eosin, and the two
/// columns at least `min_separation_deg` apart.
pub fn random_stain_matrix(r: &mut Rng, min_separation_deg: f64) -> [[f64; 3]; 2] {
    let base = reference_he().stain_matrix;
    loop {
        let mut cols = [[0.0; 3]; 2];
        for (col, b) in cols.iter_mut().zip(base.iter()) {
            for k in 0..3 {
                col[k] = b[k] + r.random_range(-0.12..0.12);
            }
            let n = (col[0] * col[0] + col[1] * col[1] + col[2] * col[2]).sqrt();
            col.iter_mut().for_each(|c| *c /= n);
        }
        let ok = cols.iter().all(|c| c.iter().all(|v| *v >= 0.15))
            && cols[0][0] > cols[1][0] + 0.1
            && angle_deg(&cols[0], &cols[1]) >= min_separation_deg;
        if ok {
            return cols;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Disk {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

impl Disk {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        dx * dx + dy * dy <= self.r * self.r
    }
}

/// Ground truth of one synthetic slide, in target-resolution pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideTruth {
    pub wsi_id: String,
    pub label: Subtype,
    pub tissue: Disk,
    pub tumor: Disk,
}

impl SlideTruth {
    /// A tile is tumor when its center lies in the tumor region.
    pub fn is_tumor_tile(&self, tile: &TileRecord, tile_size: usize) -> bool {
        let half = tile_size as f64 / 2.0;
        self.tumor.contains(tile.x as f64 + half, tile.y as f64 + half)
    }
}

const TRUTH_HEADER: [&str; 8] = [
    "wsi_id", "label", "tissue_cx", "tissue_cy", "tissue_r", "tumor_cx", "tumor_cy", "tumor_r",
];

pub fn save_ground_truth(truths: &[SlideTruth], path: &Path) -> Result<()> {
    let mut w = CsvWriter::new(&TRUTH_HEADER);
    for t in truths {
        w.row([
            t.wsi_id.clone(),
            t.label.to_string(),
            t.tissue.cx.to_string(),
            t.tissue.cy.to_string(),
            t.tissue.r.to_string(),
            t.tumor.cx.to_string(),
            t.tumor.cy.to_string(),
            t.tumor.r.to_string(),
        ]);
    }
    w.finish(path)
}

pub fn load_ground_truth(path: &Path) -> Result<Vec<SlideTruth>> {
    let (rows, _) = csvio::read_table(path, &TRUTH_HEADER, &[])?;
    rows.into_iter()
        .map(|row| {
            let f = &row.fields;
            let num = |i: usize| csvio::parse_f64(path, row.line, &f[i], TRUTH_HEADER[i]);
            Ok(SlideTruth {
                wsi_id: f[0].clone(),
                label: f[1].parse()?,
                tissue: Disk { cx: num(2)?, cy: num(3)?, r: num(4)? },
                tumor: Disk { cx: num(5)?, cy: num(6)?, r: num(7)? },
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortSpec {
    pub classes: Vec<Subtype>,
    pub wsis_per_class: usize,
    /// Slide side length in pixels at the target resolution.
    pub slide_px: usize,
    pub target_mpp: f64,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            classes: Subtype::ALL.to_vec(),
            wsis_per_class: 40,
            slide_px: 384,
            target_mpp: 0.5,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCohort {
    pub manifest: CohortManifest,
    pub truths: Vec<SlideTruth>,
    pub manifest_path: PathBuf,
    pub ground_truth_path: PathBuf,
}

/// Nucleus density of tumor tissue per class; gives each subtype its own
/// texture statistics.
fn tumor_density(label: Subtype) -> f64 {
    match label {
        Subtype::LumA => 0.35,
        Subtype::LumB => 0.45,
        Subtype::Her2 => 0.55,
        Subtype::Basal => 0.65,
    }
}

fn cell_hash(seed: u64, cx: i64, cy: i64) -> f64 {
    let mut z = seed ^ (cx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (cy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    rng::unit_from_bits(z ^ (z >> 31))
}

fn render_slide(truth: &SlideTruth, stains: &[[f64; 3]; 2], side: usize, scale: usize, mpp: f64, seed: u64) -> RasterImage {
    let w = side * scale;
    let fold = Disk {
        cx: truth.tissue.cx - truth.tissue.r * 0.55,
        cy: truth.tissue.cy + truth.tissue.r * 0.55,
        r: truth.tissue.r * 0.22,
    };
    let density = tumor_density(truth.label);
    let mut data = vec![0u8; w * w * 3];
    data.par_chunks_mut(w * 3).enumerate().for_each(|(sy, row)| {
        let mut r = rng::seeded(rng::stream_seed(seed, sy as u64));
        for sx in 0..w {
            let (x, y) = ((sx as f64 + 0.5) / scale as f64, (sy as f64 + 0.5) / scale as f64);
            let px = &mut row[sx * 3..sx * 3 + 3];
            // ink marker stroke along the top-left corner, on glass
            if (x + y - side as f64 * 0.12).abs() < 3.0 && !truth.tissue.contains(x, y) {
                px.copy_from_slice(&[40, 140 + r.random_range(0..20), 70]);
                continue;
            }
            if !truth.tissue.contains(x, y) {
                let g = 246 + r.random_range(0..8u8);
                px.copy_from_slice(&[g, g, g.saturating_sub(r.random_range(0..3u8))]);
                continue;
            }
            let nuclei = if truth.tumor.contains(x, y) { density } else { 0.12 };
            let cell = cell_hash(seed, (x / 6.0).floor() as i64, (y / 6.0).floor() as i64);
            let mut c = if cell < nuclei {
                [r.random_range(0.8..1.3), r.random_range(0.0..0.15)]
            } else {
                [r.random_range(0.05..0.3), r.random_range(0.5..1.1)]
            };
            if fold.contains(x, y) {
                c = [c[0] * 1.8, c[1] * 1.8];
            }
            for k in 0..3 {
                let od = stains[0][k] * c[0] + stains[1][k] * c[1];
                px[k] = (255.0 * 10f64.powf(-od)).round().clamp(0.0, 255.0) as u8;
            }
        }
    });
    RasterImage::new(w, w, data, mpp).expect("sizes match")
}

/// Writes a synthetic cohort (`manifest.csv`, `ground_truth.csv`,
/// `slides/*.png`) under `out_dir`. Every third slide is stored at twice
/// the target resolution to exercise resampling; every sixth shares its
/// patient with the previous slide of the same class.
pub fn generate_synthetic_cohort(spec: &CohortSpec, out_dir: &Path) -> Result<SyntheticCohort> {
    if spec.classes.is_empty() || spec.wsis_per_class == 0 || spec.slide_px < 32 {
        return Err(Error::Invalid("synthetic cohort needs classes, slides and at least 32 px".into()));
    }
    let slides_dir = out_dir.join("slides");
    std::fs::create_dir_all(&slides_dir).map_err(|e| Error::io(&slides_dir, e))?;

    let mut records = Vec::new();
    let mut truths = Vec::new();
    let mut jobs = Vec::new();
    for &label in &spec.classes {
        let mut patient = 0;
        for i in 0..spec.wsis_per_class {
            if i % 6 != 5 {
                patient += 1;
            }
            let wsi_id = format!("syn_{label}_{i:03}");
            let slide_seed = rng::derive_seed(spec.seed, &wsi_id);
            let mut r = rng::seeded(slide_seed);
            let s = spec.slide_px as f64;
            let tissue = Disk {
                cx: s / 2.0 + r.random_range(-0.05..0.05) * s,
                cy: s / 2.0 + r.random_range(-0.05..0.05) * s,
                r: r.random_range(0.36..0.42) * s,
            };
            let tumor_r = r.random_range(0.2..0.26) * s;
            let slack = tissue.r - tumor_r - 0.02 * s;
            let tumor = Disk {
                cx: tissue.cx + r.random_range(-0.5..0.5) * slack,
                cy: tissue.cy + r.random_range(-0.5..0.5) * slack,
                r: tumor_r,
            };
            let stains = random_stain_matrix(&mut r, 15.0);
            let scale = if i % 3 == 2 { 2 } else { 1 };
            let mpp = spec.target_mpp / scale as f64;
            let truth = SlideTruth { wsi_id: wsi_id.clone(), label, tissue, tumor };
            let rel = PathBuf::from("slides").join(format!("{wsi_id}.png"));
            records.push(SlideRecord {
                wsi_id: wsi_id.clone(),
                patient_id: format!("P_{label}_{patient:03}"),
                label: SlideLabel::Subtype(label),
                image_path: rel.clone(),
                source_mpp: mpp,
            });
            jobs.push((truth.clone(), stains, scale, mpp, slide_seed, out_dir.join(rel)));
            truths.push(truth);
        }
    }
    jobs.iter()
        .try_for_each(|(truth, stains, scale, mpp, seed, path)| {
            render_slide(truth, stains, spec.slide_px, *scale, *mpp, *seed).save_png(path)
        })?;

    let manifest = CohortManifest::new(Task::Subtyping, records)?;
    let manifest_path = out_dir.join("manifest.csv");
    manifest.save(&manifest_path)?;
    let ground_truth_path = out_dir.join("ground_truth.csv");
    save_ground_truth(&truths, &ground_truth_path)?;
    Ok(SyntheticCohort {
        manifest,
        truths,
        manifest_path,
        ground_truth_path,
    })
}
