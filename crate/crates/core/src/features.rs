//! Per-slide count features from per-tile one-vs-rest scores.
//!
//! Column order is `(LumA, ¬LumA, LumB, ¬LumB, HER2, ¬HER2, Basal, ¬Basal)`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::index;
use rayon::prelude::*;

use crate::csvio::{self, CsvWriter};
use crate::error::{Error, Result};
use crate::labels::{ClassifierId, Subtype};
use crate::rng;
use crate::scoring::ScoreTable;
use crate::threshold::ThresholdSet;

pub const N_FEATURES: usize = 8;

pub const FEATURE_HEADER: [&str; 10] = [
    "wsi_id",
    "n_tiles",
    "c_lumA",
    "c_not_lumA",
    "c_lumB",
    "c_not_lumB",
    "c_her2",
    "c_not_her2",
    "c_basal",
    "c_not_basal",
];

/// Where a score exactly at the threshold falls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Boundary {
    /// `score >= threshold` is target.
    #[default]
    Inclusive,
    /// `score > threshold` is target.
    Strict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TileCall {
    Target,
    Rest,
}

pub fn classify_tile(target_score: f64, threshold: f64, boundary: Boundary) -> TileCall {
    let hit = match boundary {
        Boundary::Inclusive => target_score >= threshold,
        Boundary::Strict => target_score > threshold,
    };
    if hit {
        TileCall::Target
    } else {
        TileCall::Rest
    }
}

/// How counts are presented to the meta-classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeatureMode {
    #[default]
    Counts,
    /// Counts divided by the number of tiles.
    Fractions,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WsiFeatureVector {
    pub wsi_id: String,
    pub counts: [u64; N_FEATURES],
    pub n_tiles: u64,
}

impl WsiFeatureVector {
    /// A slide without tumor tiles carries no evidence.
    pub fn is_degenerate(&self) -> bool {
        self.n_tiles == 0
    }

    pub fn values(&self, mode: FeatureMode) -> [f64; N_FEATURES] {
        match mode {
            FeatureMode::Counts => self.counts.map(|c| c as f64),
            FeatureMode::Fractions if self.n_tiles == 0 => [0.0; N_FEATURES],
            FeatureMode::Fractions => self.counts.map(|c| c as f64 / self.n_tiles as f64),
        }
    }
}

/// Counts for one slide. Every tile present in `table` under any subtype
/// classifier must have records for all four; tumor-classifier records are
/// ignored.
pub fn aggregate_counts(
    wsi_id: &str,
    table: &ScoreTable,
    thresholds: &ThresholdSet,
    boundary: Boundary,
) -> Result<WsiFeatureVector> {
    let tiles: BTreeSet<String> = table
        .iter()
        .filter(|r| r.classifier != ClassifierId::Tumor)
        .map(|r| r.tile_id)
        .collect();
    let mut counts = [0u64; N_FEATURES];
    for t in &tiles {
        for s in Subtype::ALL {
            let pair = table.get(t, ClassifierId::Subtype(s)).ok_or_else(|| {
                Error::MissingInput(format!("{s} score for tile `{t}` of slide `{wsi_id}`"))
            })?;
            let col = 2 * s.index();
            match classify_tile(pair.target, thresholds.threshold(s), boundary) {
                TileCall::Target => counts[col] += 1,
                TileCall::Rest => counts[col + 1] += 1,
            }
        }
    }
    Ok(WsiFeatureVector {
        wsi_id: wsi_id.to_string(),
        counts,
        n_tiles: tiles.len() as u64,
    })
}

/// One row per slide, ordered by `wsi_id`, with optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: Vec<WsiFeatureVector>,
    pub labels: Option<Vec<Subtype>>,
}

impl FeatureMatrix {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn x(&self, mode: FeatureMode) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| r.values(mode).to_vec()).collect()
    }

    pub fn wsi_ids(&self) -> Vec<&str> {
        self.rows.iter().map(|r| r.wsi_id.as_str()).collect()
    }

    /// Rows whose id is in `keep`, preserving order.
    pub fn subset(&self, keep: &BTreeSet<&str>) -> FeatureMatrix {
        let idx: Vec<usize> = (0..self.rows.len())
            .filter(|i| keep.contains(self.rows[*i].wsi_id.as_str()))
            .collect();
        FeatureMatrix {
            rows: idx.iter().map(|i| self.rows[*i].clone()).collect(),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|i| l[*i]).collect()),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut header: Vec<&str> = FEATURE_HEADER.to_vec();
        if self.labels.is_some() {
            header.push("label");
        }
        let mut w = CsvWriter::new(&header);
        for (i, r) in self.rows.iter().enumerate() {
            let mut fields = vec![r.wsi_id.clone(), r.n_tiles.to_string()];
            fields.extend(r.counts.iter().map(u64::to_string));
            if let Some(l) = &self.labels {
                fields.push(l[i].to_string());
            }
            w.row(fields);
        }
        w.into_string()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        csvio::write_file(path, self.to_csv().as_bytes())
    }

    pub fn load(path: &Path) -> Result<FeatureMatrix> {
        let (rows, labelled) = csvio::read_table(path, &FEATURE_HEADER, &["label"])?;
        let mut out = Vec::with_capacity(rows.len());
        let mut labels = Vec::new();
        let mut seen = BTreeSet::new();
        for row in rows {
            let f = &row.fields;
            if !seen.insert(f[0].clone()) {
                return Err(Error::parse(path, row.line, format!("duplicate wsi_id `{}`", f[0])));
            }
            let n_tiles = csvio::parse_usize(path, row.line, &f[1], "n_tiles")? as u64;
            let mut counts = [0u64; N_FEATURES];
            for (k, c) in counts.iter_mut().enumerate() {
                *c = csvio::parse_usize(path, row.line, &f[2 + k], FEATURE_HEADER[2 + k])? as u64;
            }
            if (0..4).any(|k| counts[2 * k] + counts[2 * k + 1] != n_tiles) {
                return Err(Error::parse(path, row.line, "pair counts do not sum to n_tiles"));
            }
            if labelled {
                labels.push(
                    f[10]
                        .parse::<Subtype>()
                        .map_err(|e| Error::parse(path, row.line, e.to_string()))?,
                );
            }
            out.push(WsiFeatureVector {
                wsi_id: f[0].clone(),
                counts,
                n_tiles,
            });
        }
        Ok(FeatureMatrix {
            rows: out,
            labels: labelled.then_some(labels),
        })
    }
}

/// Aggregates every slide in `tables` (slide id to that slide's scores).
/// When `labels` is given every slide must have one.
pub fn build_feature_matrix(
    tables: &BTreeMap<String, ScoreTable>,
    thresholds: &ThresholdSet,
    labels: Option<&BTreeMap<String, Subtype>>,
    boundary: Boundary,
) -> Result<FeatureMatrix> {
    let entries: Vec<(&String, &ScoreTable)> = tables.iter().collect();
    let rows = entries
        .par_iter()
        .map(|(id, t)| aggregate_counts(id, t, thresholds, boundary))
        .collect::<Result<Vec<_>>>()?;
    let labels = labels
        .map(|map| {
            rows.iter()
                .map(|r| {
                    map.get(&r.wsi_id)
                        .copied()
                        .ok_or_else(|| Error::MissingInput(format!("label for slide `{}`", r.wsi_id)))
                })
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;
    Ok(FeatureMatrix { rows, labels })
}

/// Keeps at most `cap` tile ids, drawn without replacement; input order is
/// preserved.
pub fn cap_tiles(tiles: &[String], cap: Option<usize>, seed: u64) -> Vec<String> {
    match cap {
        Some(c) if c < tiles.len() => {
            let mut r = rng::seeded(seed);
            let mut idx = index::sample(&mut r, tiles.len(), c).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| tiles[i].clone()).collect()
        }
        _ => tiles.to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::ScoreRecord;

    fn table(scores: &[[f64; 4]]) -> ScoreTable {
        let mut t = ScoreTable::new();
        for (i, row) in scores.iter().enumerate() {
            for s in Subtype::ALL {
                t.insert(ScoreRecord {
                    tile_id: format!("t{i}"),
                    classifier: ClassifierId::Subtype(s),
                    target: row[s.index()],
                    rest: 1.0 - row[s.index()],
                })
                .unwrap();
            }
        }
        t
    }

    #[test]
    fn boundary_rules() {
        assert_eq!(classify_tile(0.434, 0.434, Boundary::Inclusive), TileCall::Target);
        assert_eq!(classify_tile(0.434, 0.434, Boundary::Strict), TileCall::Rest);
        assert_eq!(classify_tile(0.0, 0.1, Boundary::Inclusive), TileCall::Rest);
        assert_eq!(classify_tile(0.999, 1.0, Boundary::Inclusive), TileCall::Rest);
    }

    #[test]
    fn uniform_luma() {
        let t = table(&[[0.9, 0.1, 0.1, 0.1]; 10]);
        let v = aggregate_counts("w", &t, &ThresholdSet::published(), Boundary::Inclusive).unwrap();
        assert_eq!(v.counts, [10, 0, 0, 10, 0, 10, 0, 10]);
        assert_eq!(v.n_tiles, 10);
        assert_eq!(v.values(FeatureMode::Fractions)[0], 1.0);
    }

    #[test]
    fn empty_is_degenerate() {
        let v = aggregate_counts("w", &ScoreTable::new(), &ThresholdSet::published(), Boundary::Inclusive).unwrap();
        assert!(v.is_degenerate());
        assert_eq!(v.counts, [0; 8]);
        assert_eq!(v.values(FeatureMode::Fractions), [0.0; 8]);
    }

    #[test]
    fn missing_classifier_record() {
        let mut t = table(&[[0.5; 4]]);
        t.insert(ScoreRecord {
            tile_id: "lonely".into(),
            classifier: ClassifierId::Subtype(Subtype::Her2),
            target: 0.5,
            rest: 0.5,
        })
        .unwrap();
        assert!(aggregate_counts("w", &t, &ThresholdSet::published(), Boundary::Inclusive).is_err());
    }

    #[test]
    fn matrix_round_trip_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let mut tables = BTreeMap::new();
        tables.insert("b".to_string(), table(&[[0.9, 0.2, 0.2, 0.2], [0.1, 0.8, 0.2, 0.2]]));
        tables.insert("a".to_string(), table(&[[0.1, 0.1, 0.9, 0.1]]));
        let labels = BTreeMap::from([("a".to_string(), Subtype::Her2), ("b".to_string(), Subtype::LumA)]);
        let m = build_feature_matrix(&tables, &ThresholdSet::published(), Some(&labels), Boundary::Inclusive).unwrap();
        assert_eq!(m.wsi_ids(), vec!["a", "b"]);
        assert_eq!(m.labels.as_ref().unwrap(), &vec![Subtype::Her2, Subtype::LumA]);
        let p = dir.path().join("f.csv");
        m.save(&p).unwrap();
        assert_eq!(FeatureMatrix::load(&p).unwrap(), m);

        let unlabelled = build_feature_matrix(&tables, &ThresholdSet::published(), None, Boundary::Inclusive).unwrap();
        unlabelled.save(&p).unwrap();
        assert_eq!(FeatureMatrix::load(&p).unwrap().labels, None);

        std::fs::write(&p, format!("{}\nx,3,1,1,0,3,0,3,0,3\n", FEATURE_HEADER.join(","))).unwrap();
        assert!(matches!(FeatureMatrix::load(&p), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn cap_keeps_order() {
        let tiles: Vec<String> = (0..20).map(|i| format!("t{i:02}")).collect();
        let c = cap_tiles(&tiles, Some(5), 1);
        assert_eq!(c.len(), 5);
        assert!(c.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(cap_tiles(&tiles, Some(50), 1), tiles);
        assert_eq!(cap_tiles(&tiles, None, 1), tiles);
    }
}
