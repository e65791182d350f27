//! Macenko stain estimation and normalization.
//!
//! Pixels are mapped to optical density, `OD = -log10(clamp(I, 1, I0) / I0)`,
//! where two stains mix linearly: `OD = M * C` with `M` a 3x2 matrix of unit
//! stain vectors and `C` the per-pixel concentrations. The stain plane is the
//! span of the two leading eigenvectors of the OD covariance; the stain
//! directions are read off at robust extremes of the polar angle inside that
//! plane. Normalization solves for `C` against a source profile, rescales each
//! stain to the reference's 99th-percentile concentration and re-synthesizes
//! with the reference matrix.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;

use crate::csvio;
use crate::error::{Error, Result};
use crate::raster::RasterImage;
use crate::rng;
use crate::stats::{percentile, percentile_sorted};
use crate::tiling::TileRecord;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StainParams {
    /// Illumination white point per channel.
    pub i0: f64,
    /// Pixels with any channel OD below this are treated as background.
    pub beta: f64,
    /// Angular percentile used for the robust extremes.
    pub alpha: f64,
}

impl Default for StainParams {
    fn default() -> Self {
        StainParams {
            i0: 255.0,
            beta: 0.15,
            alpha: 1.0,
        }
    }
}

impl StainParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.i0 > 0.0 && self.i0 <= 255.0) {
            return Err(Error::Invalid("i0 must lie in (0, 255]".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Invalid("beta must be non-negative".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha < 50.0) {
            return Err(Error::Invalid("alpha must lie in [0, 50)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpticalDensityField {
    pub width: usize,
    pub height: usize,
    pub values: Vec<[f64; 3]>,
}

pub fn od_of(value: u8, i0: f64) -> f64 {
    -((value as f64).clamp(1.0, i0) / i0).log10()
}

pub fn rgb_to_od(tile: &RasterImage, i0: f64) -> OpticalDensityField {
    assert!(i0 > 0.0, "i0 must be positive");
    // 256-entry lookup; every channel shares it
    let lut: Vec<f64> = (0..=255u8).map(|v| od_of(v, i0)).collect();
    let values = tile
        .pixels()
        .map(|p| [lut[p[0] as usize], lut[p[1] as usize], lut[p[2] as usize]])
        .collect();
    OpticalDensityField {
        width: tile.width(),
        height: tile.height(),
        values,
    }
}

/// Inverse of [`rgb_to_od`] up to the clamp: `I = I0 * 10^-OD`.
pub fn od_to_intensity(od: f64, i0: f64) -> f64 {
    i0 * 10f64.powf(-od)
}

/// Stain basis (H then E, unit columns in OD space) with the 99th-percentile
/// concentration of each stain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StainProfile {
    pub stain_matrix: [[f64; 3]; 2],
    pub max_concentrations: [f64; 2],
}

fn norm(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Angle between two vectors in degrees.
pub fn angle_deg(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (dot(a, b) / (norm(a) * norm(b))).clamp(-1.0, 1.0).acos().to_degrees()
}

impl StainProfile {
    /// Builds a profile from arbitrary (non-zero) stain vectors, normalizing
    /// them to unit length.
    pub fn new(hematoxylin: [f64; 3], eosin: [f64; 3], max_concentrations: [f64; 2]) -> Result<Self> {
        let unit = |v: [f64; 3]| -> Result<[f64; 3]> {
            let n = norm(&v);
            if !(n > 0.0 && n.is_finite()) {
                return Err(Error::Degenerate("zero stain vector".into()));
            }
            Ok([v[0] / n, v[1] / n, v[2] / n])
        };
        let p = StainProfile {
            stain_matrix: [unit(hematoxylin)?, unit(eosin)?],
            max_concentrations,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for col in &self.stain_matrix {
            if (norm(col) - 1.0).abs() > 1e-9 {
                return Err(Error::Degenerate("stain vector is not unit length".into()));
            }
        }
        if angle_deg(&self.stain_matrix[0], &self.stain_matrix[1]) <= 1.0 {
            return Err(Error::Degenerate("stain vectors are nearly parallel".into()));
        }
        if self.max_concentrations.iter().any(|c| !(*c > 0.0 && c.is_finite())) {
            return Err(Error::Degenerate("max concentrations must be positive".into()));
        }
        Ok(())
    }

    pub fn hematoxylin(&self) -> [f64; 3] {
        self.stain_matrix[0]
    }

    pub fn eosin(&self) -> [f64; 3] {
        self.stain_matrix[1]
    }

    pub fn to_text(&self) -> String {
        let [h, e] = self.stain_matrix;
        let mut s = String::from("stain_profile v1\nstain_matrix");
        for r in 0..3 {
            let _ = write!(s, " {:.16e} {:.16e}", h[r], e[r]);
        }
        let _ = writeln!(
            s,
            "\nmax_concentrations {:.16e} {:.16e}",
            self.max_concentrations[0], self.max_concentrations[1]
        );
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Invalid(format!("stain profile: {m}"));
        let mut lines = text.lines();
        if lines.next() != Some("stain_profile v1") {
            return Err(bad("unsupported header"));
        }
        let nums = |line: Option<&str>, key: &str, n: usize| -> Result<Vec<f64>> {
            let line = line.ok_or_else(|| bad("truncated"))?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(key) {
                return Err(bad(&format!("expected `{key}`")));
            }
            let v: Vec<f64> = parts
                .map(|p| p.parse::<f64>().map_err(|_| bad("bad number")))
                .collect::<Result<_>>()?;
            if v.len() != n {
                return Err(bad(&format!("`{key}` needs {n} values")));
            }
            Ok(v)
        };
        let m = nums(lines.next(), "stain_matrix", 6)?;
        let c = nums(lines.next(), "max_concentrations", 2)?;
        let p = StainProfile {
            stain_matrix: [[m[0], m[2], m[4]], [m[1], m[3], m[5]]],
            max_concentrations: [c[0], c[1]],
        };
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        csvio::write_file(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Sign-normalizes an estimated direction: flips it so that its components
/// sum to a positive value, zeroes residual negative components, rescales.
fn orient(v: [f64; 3]) -> [f64; 3] {
    let s = if v[0] + v[1] + v[2] < 0.0 { -1.0 } else { 1.0 };
    let w = [(s * v[0]).max(0.0), (s * v[1]).max(0.0), (s * v[2]).max(0.0)];
    let n = norm(&w);
    if n == 0.0 {
        w
    } else {
        [w[0] / n, w[1] / n, w[2] / n]
    }
}

/// Estimates the H&E stain basis of an OD field.
pub fn estimate_stain_profile(od: &OpticalDensityField, params: &StainParams) -> Result<StainProfile> {
    estimate_from_values(&od.values, params)
}

pub(crate) fn estimate_from_values(values: &[[f64; 3]], params: &StainParams) -> Result<StainProfile> {
    let tissue: Vec<[f64; 3]> = values
        .iter()
        .filter(|v| v.iter().all(|c| *c >= params.beta))
        .copied()
        .collect();
    if tissue.len() < 2 {
        return Err(Error::Degenerate(format!(
            "{} pixels above the OD threshold",
            tissue.len()
        )));
    }

    let n = tissue.len() as f64;
    let mut mean = [0.0; 3];
    for v in &tissue {
        for c in 0..3 {
            mean[c] += v[c] / n;
        }
    }
    let mut cov = Matrix3::<f64>::zeros();
    for v in &tissue {
        let d = Vector3::new(v[0] - mean[0], v[1] - mean[1], v[2] - mean[2]);
        cov += d * d.transpose();
    }
    cov /= n - 1.0;

    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]));
    let (l1, l2) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]);
    if !(l1 > 0.0) || l2 <= 1e-3 * l1 {
        return Err(Error::Degenerate(
            "OD covariance has rank below two (single stain?)".into(),
        ));
    }
    let col = |i: usize| -> [f64; 3] {
        let c = eig.eigenvectors.column(order[i]);
        [c[0], c[1], c[2]]
    };
    let mut e1 = col(0);
    let e2 = col(1);
    // point the leading axis into the data so angles stay away from +-pi
    if dot(&e1, &mean) < 0.0 {
        e1 = [-e1[0], -e1[1], -e1[2]];
    }

    let mut phi: Vec<f64> = tissue
        .iter()
        .map(|v| dot(v, &e2).atan2(dot(v, &e1)))
        .collect();
    phi.sort_by(f64::total_cmp);
    let lo = percentile_sorted(&phi, params.alpha);
    let hi = percentile_sorted(&phi, 100.0 - params.alpha);
    let dir = |a: f64| -> [f64; 3] {
        orient([
            e1[0] * a.cos() + e2[0] * a.sin(),
            e1[1] * a.cos() + e2[1] * a.sin(),
            e1[2] * a.cos() + e2[2] * a.sin(),
        ])
    };
    let (v_lo, v_hi) = (dir(lo), dir(hi));
    // hematoxylin absorbs red light more strongly than eosin
    let (h, e) = if v_lo[0] >= v_hi[0] { (v_lo, v_hi) } else { (v_hi, v_lo) };
    if norm(&h) == 0.0 || norm(&e) == 0.0 || angle_deg(&h, &e) <= 1.0 {
        return Err(Error::Degenerate("estimated stain vectors coincide".into()));
    }

    let matrix = [h, e];
    let conc = concentrations_of(values, &matrix)?;
    let max_h = percentile(&conc.iter().map(|c| c[0]).collect::<Vec<_>>(), 99.0);
    let max_e = percentile(&conc.iter().map(|c| c[1]).collect::<Vec<_>>(), 99.0);
    let profile = StainProfile {
        stain_matrix: matrix,
        max_concentrations: [max_h, max_e],
    };
    profile.validate()?;
    Ok(profile)
}

/// Least-squares stain concentrations per pixel, negatives clamped to zero.
pub fn compute_concentrations(od: &OpticalDensityField, stain_matrix: &[[f64; 3]; 2]) -> Result<Vec<[f64; 2]>> {
    concentrations_of(&od.values, stain_matrix)
}

fn concentrations_of(values: &[[f64; 3]], m: &[[f64; 3]; 2]) -> Result<Vec<[f64; 2]>> {
    let solve = normal_equations(m)?;
    Ok(values.par_iter().map(&solve).collect())
}

/// Returns the solver of the 2x2 normal equations `(M^T M) c = M^T od`.
fn normal_equations(m: &[[f64; 3]; 2]) -> Result<impl Fn(&[f64; 3]) -> [f64; 2] + Sync + '_> {
    let a = dot(&m[0], &m[0]);
    let b = dot(&m[0], &m[1]);
    let d = dot(&m[1], &m[1]);
    let det = a * d - b * b;
    if !(det.abs() > 1e-12 * (a * d).max(f64::MIN_POSITIVE)) {
        return Err(Error::Degenerate("singular stain matrix".into()));
    }
    Ok(move |v: &[f64; 3]| {
        let r0 = dot(&m[0], v);
        let r1 = dot(&m[1], v);
        let c0 = (d * r0 - b * r1) / det;
        let c1 = (a * r1 - b * r0) / det;
        [c0.max(0.0), c1.max(0.0)]
    })
}

/// Maps a tile from the `source` stain profile onto the `reference` one.
pub fn normalize_tile(
    tile: &RasterImage,
    source: &StainProfile,
    reference: &StainProfile,
    i0: f64,
) -> Result<RasterImage> {
    source.validate()?;
    reference.validate()?;
    let od = rgb_to_od(tile, i0);
    let conc = compute_concentrations(&od, &source.stain_matrix)?;
    let scale = [
        reference.max_concentrations[0] / source.max_concentrations[0],
        reference.max_concentrations[1] / source.max_concentrations[1],
    ];
    let [h, e] = reference.stain_matrix;
    let cap = i0.min(255.0);
    let data: Vec<u8> = conc
        .par_iter()
        .flat_map_iter(|c| {
            let (ch, ce) = (c[0] * scale[0], c[1] * scale[1]);
            (0..3).map(move |k| {
                let v = od_to_intensity(h[k] * ch + e[k] * ce, i0);
                v.clamp(0.0, cap).round() as u8
            })
        })
        .collect();
    RasterImage::new(tile.width(), tile.height(), data, tile.mpp)
}

/// Fits a profile to the pooled pixels of several tiles.
pub fn estimate_pooled(tiles: &[RasterImage], params: &StainParams) -> Result<StainProfile> {
    let values: Vec<[f64; 3]> = tiles
        .iter()
        .flat_map(|t| rgb_to_od(t, params.i0).values)
        .collect();
    estimate_from_values(&values, params)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceMosaic {
    pub image: RasterImage,
    pub profile: StainProfile,
    /// `(wsi_id, tile_id)` of each mosaic cell, row-major.
    pub provenance: Vec<(String, String)>,
}

impl ReferenceMosaic {
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.image.save_png(&dir.join("mosaic.png"))?;
        self.profile.save(&dir.join("profile.txt"))?;
        let mut w = csvio::CsvWriter::new(&["wsi_id", "tile_id"]);
        for (wsi, tile) in &self.provenance {
            w.row([wsi, tile]);
        }
        w.finish(&dir.join("provenance.csv"))
    }
}

/// Builds the normalization target: one random tumor tile from each of
/// `n_wsis` randomly chosen slides, laid out row-major on a square grid
/// (blank cells white), with a profile fitted to the pooled tile pixels.
pub fn build_reference_mosaic<F>(
    tumor_tiles: &BTreeMap<String, Vec<TileRecord>>,
    n_wsis: usize,
    tile_size: usize,
    seed: u64,
    params: &StainParams,
    load: F,
) -> Result<ReferenceMosaic>
where
    F: Fn(&TileRecord) -> Result<RasterImage> + Sync,
{
    let mut eligible: Vec<&String> = tumor_tiles
        .iter()
        .filter(|(_, t)| !t.is_empty())
        .map(|(k, _)| k)
        .collect();
    if eligible.is_empty() || n_wsis == 0 {
        return Err(Error::Invalid("no slides with tumor tiles for the reference mosaic".into()));
    }
    if eligible.len() < n_wsis {
        warn!(
            "reference mosaic: only {} slides with tumor tiles, {} requested",
            eligible.len(),
            n_wsis
        );
    }
    let mut rng = rng::seeded(seed);
    eligible.shuffle(&mut rng);
    eligible.truncate(n_wsis);
    let picks: Vec<&TileRecord> = eligible
        .iter()
        .map(|w| {
            let tiles = &tumor_tiles[*w];
            &tiles[rng.random_range(0..tiles.len())]
        })
        .collect();
    let images: Vec<RasterImage> = picks.par_iter().map(|t| load(t)).collect::<Result<_>>()?;
    let mpp = images[0].mpp;
    if images.iter().any(|i| i.width() != tile_size || i.height() != tile_size) {
        return Err(Error::Invalid("mosaic tiles must match the tile size".into()));
    }
    let side = (picks.len() as f64).sqrt().ceil() as usize;
    let mut canvas = RasterImage::filled(side * tile_size, side * tile_size, [255, 255, 255], mpp);
    for (i, img) in images.iter().enumerate() {
        canvas.paste(img, (i % side) * tile_size, (i / side) * tile_size)?;
    }
    let profile = estimate_pooled(&images, params)?;
    Ok(ReferenceMosaic {
        image: canvas,
        profile,
        provenance: picks
            .iter()
            .map(|t| (t.wsi_id.clone(), t.tile_id.clone()))
            .collect(),
    })
}
