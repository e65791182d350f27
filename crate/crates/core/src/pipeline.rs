//! Stage graph, work-directory layout and hash-based stage caching.
//!
//! Every stage writes its outputs plus `provenance/<stage>.json`, holding
//! the hash of the config sections it reads, the hashes of its input and
//! output files, its seed and a timestamp. A stage whose recorded config
//! hash, seed and input hashes match, and whose outputs are intact, is
//! skipped.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{Backend, PipelineConfig, ThresholdSource};
use crate::csvio::{self, CsvWriter};
use crate::error::{Error, Result};
use crate::features::{self, FeatureMatrix};
use crate::gbdt::{self, GbdtModel};
use crate::heatmap::{self, ColorRamp, HeatmapSpec};
use crate::labels::{ClassifierId, Subtype, Task};
use crate::manifest::{self, CohortManifest, OvrLabel, SplitSet};
use crate::metrics::{self, EvalRecord};
use crate::raster::{PngReader, RasterImage, SlideReader};
use crate::rng;
use crate::scoring::{self, ProcessScorer, ScoreTable, SyntheticScorer, TileRef, TileScorer, TileTruth};
use crate::stain::{self, StainProfile};
use crate::synthetic;
use crate::threshold::{self, ThresholdSet};
use crate::tiling::{self, TileRecord};

/// Stages in dependency order.
pub const STAGES: [&str; 12] = [
    "tile",
    "score-tumor",
    "build-ref",
    "normalize",
    "split",
    "score",
    "threshold",
    "features",
    "train",
    "predict",
    "evaluate",
    "heatmap",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    Skipped,
}

/// Where every artifact lives.
#[derive(Debug, Clone)]
pub struct Layout {
    pub work: PathBuf,
    pub tiles: PathBuf,
    pub tile_manifest: PathBuf,
    pub scores: PathBuf,
    pub reference: PathBuf,
    pub normalized: PathBuf,
    pub split: PathBuf,
    pub thresholds: PathBuf,
    pub datasets: PathBuf,
    pub features: PathBuf,
    pub model: PathBuf,
    pub predictions: PathBuf,
    pub report: PathBuf,
    pub heatmaps: PathBuf,
    pub provenance: PathBuf,
}

impl Layout {
    pub fn new(cfg: &PipelineConfig) -> Layout {
        let work = cfg.resolve(&cfg.paths.work_dir);
        let pick = |custom: &str, default: &str| {
            if custom.is_empty() {
                work.join(default)
            } else {
                cfg.resolve(custom)
            }
        };
        let tiles = pick(&cfg.paths.tile_dir, "tiles");
        Layout {
            tile_manifest: tiles.join("tile_manifest.csv"),
            tiles,
            scores: pick(&cfg.paths.score_dir, "scores"),
            reference: work.join("reference"),
            normalized: work.join("normalized"),
            split: work.join("split"),
            thresholds: work.join("thresholds"),
            datasets: work.join("datasets"),
            features: work.join("features"),
            model: pick(&cfg.paths.model_dir, "model"),
            predictions: work.join("predictions"),
            report: pick(&cfg.paths.report_dir, "report"),
            heatmaps: work.join("heatmaps"),
            provenance: work.join("provenance"),
            work,
        }
    }

    pub fn tumor_scores(&self) -> PathBuf {
        self.scores.join("tumor.csv")
    }
    pub fn subtype_scores(&self) -> PathBuf {
        self.scores.join("subtypes.csv")
    }
    pub fn split_file(&self) -> PathBuf {
        self.split.join("split.csv")
    }
    pub fn profile(&self) -> PathBuf {
        self.reference.join("profile.txt")
    }
    pub fn threshold_file(&self) -> PathBuf {
        self.thresholds.join("thresholds.csv")
    }
    pub fn xgb_features(&self) -> PathBuf {
        self.features.join("xgb.csv")
    }
    pub fn test_features(&self) -> PathBuf {
        self.features.join("test.csv")
    }
    pub fn model_file(&self) -> PathBuf {
        self.model.join("gbdt.txt")
    }
    pub fn prediction_file(&self) -> PathBuf {
        self.predictions.join("predictions.csv")
    }
    pub fn tile_png(&self, tile_id: &str) -> PathBuf {
        self.tiles.join(format!("{tile_id}.png"))
    }
    pub fn normalized_png(&self, tile_id: &str) -> PathBuf {
        self.normalized.join(format!("{tile_id}.png"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: String,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub timestamp: u64,
}

/// Static description of a stage.
struct StageDef {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    sections: &'static [&'static str],
    seeded: bool,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// All files under the given paths (directories expanded recursively),
/// sorted.
fn expand(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    fn walk(p: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        if p.is_dir() {
            for entry in std::fs::read_dir(p).map_err(|e| Error::io(p, e))? {
                walk(&entry.map_err(|e| Error::io(p, e))?.path(), out)?;
            }
        } else if p.exists() {
            out.push(p.to_path_buf());
        }
        Ok(())
    }
    let mut out = Vec::new();
    for p in paths {
        walk(p, &mut out)?;
    }
    out.sort();
    out.dedup();
    Ok(out)
}

fn hash_files(files: &[PathBuf], roots: &[&Path]) -> Result<BTreeMap<String, String>> {
    let hashes: Vec<(String, String)> = files
        .par_iter()
        .map(|f| {
            let rel = roots.iter().find_map(|r| f.strip_prefix(r).ok()).unwrap_or(f);
            let key = rel.display().to_string();
            Ok((key, sha256_file(f)?))
        })
        .collect::<Result<_>>()?;
    Ok(hashes.into_iter().collect())
}

fn remove_path(p: &Path) -> Result<()> {
    if p.is_dir() {
        std::fs::remove_dir_all(p).map_err(|e| Error::io(p, e))
    } else if p.exists() {
        std::fs::remove_file(p).map_err(|e| Error::io(p, e))
    } else {
        Ok(())
    }
}

fn tile_ref(path: PathBuf, tile_id: &str) -> TileRef {
    TileRef {
        tile_id: tile_id.to_string(),
        path,
    }
}

fn group_by_wsi(tiles: &[TileRecord]) -> BTreeMap<String, Vec<TileRecord>> {
    let mut out: BTreeMap<String, Vec<TileRecord>> = BTreeMap::new();
    for t in tiles {
        out.entry(t.wsi_id.clone()).or_default().push(t.clone());
    }
    out
}

pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub layout: Layout,
    reader: Box<dyn SlideReader>,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Pipeline {
        Pipeline {
            layout: Layout::new(&cfg),
            cfg,
            reader: Box::new(PngReader),
        }
    }

    /// Replaces the slide decoder.
    pub fn with_reader(mut self, reader: Box<dyn SlideReader>) -> Pipeline {
        self.reader = reader;
        self
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        rng::derive_seed(self.cfg.seed, stage)
    }

    fn manifest_path(&self) -> PathBuf {
        self.cfg.resolve(&self.cfg.paths.manifest)
    }

    fn manifest(&self) -> Result<CohortManifest> {
        manifest::load_manifest_for_task(&self.manifest_path(), Task::Subtyping)
    }

    fn slide_path(&self, image_path: &Path) -> PathBuf {
        if image_path.is_absolute() {
            image_path.to_path_buf()
        } else {
            let base = self.manifest_path();
            base.parent().unwrap_or(Path::new(".")).join(image_path)
        }
    }

    fn ground_truth_path(&self) -> Option<PathBuf> {
        (self.cfg.backend().ok() == Some(Backend::Synthetic) && !self.cfg.scoring.ground_truth.is_empty())
            .then(|| self.cfg.resolve(&self.cfg.scoring.ground_truth))
    }

    fn scorer_inputs(&self) -> Vec<PathBuf> {
        self.ground_truth_path().into_iter().collect()
    }

    fn def(&self, stage: &str) -> Result<StageDef> {
        let l = &self.layout;
        let manifest = self.manifest_path();
        let d = match stage {
            "tile" => {
                let mut inputs = vec![manifest.clone()];
                if let Ok(m) = manifest::load_manifest(&manifest) {
                    inputs.extend(m.records.iter().map(|r| self.slide_path(&r.image_path)));
                }
                StageDef {
                    inputs,
                    outputs: vec![l.tiles.clone()],
                    sections: &["tiling"],
                    seeded: false,
                }
            }
            "score-tumor" => StageDef {
                inputs: [vec![l.tiles.clone()], self.scorer_inputs()].concat(),
                outputs: vec![l.tumor_scores()],
                sections: &["scoring", "tiling"],
                seeded: true,
            },
            "build-ref" => StageDef {
                inputs: vec![l.tile_manifest.clone(), l.tumor_scores(), l.tiles.clone()],
                outputs: vec![l.reference.clone()],
                sections: &["stain", "scoring", "tiling"],
                seeded: true,
            },
            "normalize" => StageDef {
                inputs: vec![l.tile_manifest.clone(), l.tumor_scores(), l.profile(), l.tiles.clone()],
                outputs: vec![l.normalized.clone()],
                sections: &["stain", "scoring", "tiling"],
                seeded: false,
            },
            "split" => StageDef {
                inputs: vec![manifest],
                outputs: vec![l.split_file()],
                sections: &["split"],
                seeded: true,
            },
            "score" => StageDef {
                inputs: [vec![l.tile_manifest.clone(), l.tumor_scores(), l.normalized.clone()], self.scorer_inputs()]
                    .concat(),
                outputs: vec![l.subtype_scores()],
                sections: &["scoring", "tiling"],
                seeded: true,
            },
            "threshold" => StageDef {
                inputs: vec![manifest, l.split_file(), l.tile_manifest.clone(), l.tumor_scores(), l.subtype_scores()],
                outputs: vec![l.thresholds.clone(), l.datasets.clone()],
                sections: &["thresholds", "quotas", "scoring"],
                seeded: true,
            },
            "features" => StageDef {
                inputs: vec![
                    manifest,
                    l.split_file(),
                    l.tile_manifest.clone(),
                    l.tumor_scores(),
                    l.subtype_scores(),
                    l.threshold_file(),
                ],
                outputs: vec![l.features.clone()],
                sections: &["features", "thresholds", "scoring"],
                seeded: true,
            },
            "train" => StageDef {
                inputs: vec![manifest, l.xgb_features()],
                outputs: vec![l.model.clone()],
                sections: &["gbdt", "split", "features"],
                seeded: true,
            },
            "predict" => StageDef {
                inputs: vec![l.model_file(), l.test_features()],
                outputs: vec![l.predictions.clone()],
                sections: &["features"],
                seeded: false,
            },
            "evaluate" => StageDef {
                inputs: vec![l.prediction_file(), l.test_features()],
                outputs: vec![l.report.clone()],
                sections: &["bootstrap"],
                seeded: true,
            },
            "heatmap" => {
                let mut inputs = vec![manifest.clone(), l.split_file(), l.tile_manifest.clone(), l.tumor_scores()];
                if let Ok(m) = manifest::load_manifest(&manifest) {
                    inputs.extend(m.records.iter().map(|r| self.slide_path(&r.image_path)));
                }
                StageDef {
                    inputs,
                    outputs: vec![l.heatmaps.clone()],
                    sections: &["heatmap", "tiling"],
                    seeded: false,
                }
            }
            other => return Err(Error::Config(format!("unknown stage `{other}`"))),
        };
        Ok(d)
    }

    fn provenance_path(&self, stage: &str) -> PathBuf {
        self.layout.provenance.join(format!("{stage}.json"))
    }

    pub fn load_provenance(&self, stage: &str) -> Option<Provenance> {
        let text = std::fs::read_to_string(self.provenance_path(stage)).ok()?;
        serde_json::from_str(&text).ok()
    }

    /// Runs one stage unless it is up to date.
    pub fn run_stage(&self, stage: &str) -> Result<StageOutcome> {
        let name: &'static str = STAGES
            .iter()
            .find(|s| **s == stage)
            .ok_or_else(|| Error::Config(format!("unknown stage `{stage}` (expected one of {})", STAGES.join(", "))))?;
        self.run_named(name).map_err(|e| match e {
            Error::Stage { .. } => e,
            other => Error::Stage {
                stage: name,
                source: Box::new(other),
            },
        })
    }

    fn run_named(&self, stage: &'static str) -> Result<StageOutcome> {
        let def = self.def(stage)?;
        for p in &def.inputs {
            if !p.exists() {
                return Err(Error::MissingInput(p.display().to_string()));
            }
        }
        let roots = [self.layout.work.as_path(), self.cfg.base_dir.as_path()];
        let inputs = hash_files(&expand(&def.inputs)?, &roots)?;
        let config_hash = self.cfg.section_hash(def.sections);
        let seed = def.seeded.then(|| self.stage_seed(stage));

        if let Some(prev) = self.load_provenance(stage) {
            if prev.config_hash == config_hash && prev.seed == seed && prev.inputs == inputs {
                let current = hash_files(&expand(&def.outputs)?, &roots)?;
                if !current.is_empty() && current == prev.outputs {
                    info!("stage `{stage}`: skipped (up to date)");
                    return Ok(StageOutcome::Skipped);
                }
            }
        }

        info!("stage `{stage}`: running");
        for o in &def.outputs {
            remove_path(o)?;
        }
        match stage {
            "tile" => self.stage_tile()?,
            "score-tumor" => self.stage_score_tumor(seed.expect("seeded"))?,
            "build-ref" => self.stage_build_ref(seed.expect("seeded"))?,
            "normalize" => self.stage_normalize()?,
            "split" => self.stage_split(seed.expect("seeded"))?,
            "score" => self.stage_score(seed.expect("seeded"))?,
            "threshold" => self.stage_threshold(seed.expect("seeded"))?,
            "features" => self.stage_features(seed.expect("seeded"))?,
            "train" => self.stage_train(seed.expect("seeded"))?,
            "predict" => self.stage_predict()?,
            "evaluate" => self.stage_evaluate(seed.expect("seeded"))?,
            "heatmap" => self.stage_heatmap()?,
            _ => unreachable!("stage list is closed"),
        }
        let outputs = hash_files(&expand(&def.outputs)?, &roots)?;
        let record = Provenance {
            stage: stage.to_string(),
            config_hash,
            seed,
            inputs,
            outputs,
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        let json = serde_json::to_string_pretty(&record).expect("provenance serializes");
        csvio::write_file(&self.provenance_path(stage), json.as_bytes())?;
        Ok(StageOutcome::Ran)
    }

    /// Runs every stage in order.
    pub fn run_all(&self) -> Result<Vec<(&'static str, StageOutcome)>> {
        STAGES.iter().map(|s| Ok((*s, self.run_stage(s)?))).collect()
    }

    fn tiles(&self) -> Result<Vec<TileRecord>> {
        tiling::load_tile_manifest(&self.layout.tile_manifest)
    }

    fn tumor_table(&self) -> Result<ScoreTable> {
        scoring::load_scores_with(&self.layout.tumor_scores(), &self.cfg.score_policy())
    }

    /// Tumor tiles of every slide, in tile-manifest order.
    fn tumor_tiles_by_wsi(&self, tiles: &[TileRecord]) -> Result<BTreeMap<String, Vec<TileRecord>>> {
        let table = self.tumor_table()?;
        let ids: Vec<String> = tiles.iter().map(|t| t.tile_id.clone()).collect();
        let keep = scoring::filter_tumor_tiles(&table, &ids, self.cfg.scoring.tumor_threshold)?;
        let mut out = group_by_wsi(tiles);
        for v in out.values_mut() {
            v.retain(|t| keep.contains(&t.tile_id));
        }
        Ok(out)
    }

    fn scorer(&self, tiles: &[TileRecord], seed: u64) -> Result<Box<dyn TileScorer>> {
        match self.cfg.backend()? {
            Backend::Process => {
                if self.cfg.scoring.command.trim().is_empty() {
                    return Err(Error::Config(
                        "scoring.command is empty; pass --scorer-cmd or set scoring.backend".into(),
                    ));
                }
                Ok(Box::new(ProcessScorer::from_command_line(
                    &self.cfg.scoring.command,
                    self.cfg.scoring.workers,
                    self.cfg.score_policy(),
                )?))
            }
            Backend::Synthetic => {
                let gt = self
                    .ground_truth_path()
                    .ok_or_else(|| Error::Config("synthetic scorer needs scoring.ground_truth".into()))?;
                let truths: HashMap<String, synthetic::SlideTruth> = synthetic::load_ground_truth(&gt)?
                    .into_iter()
                    .map(|t| (t.wsi_id.clone(), t))
                    .collect();
                let mut map = HashMap::new();
                for t in tiles {
                    let truth = truths
                        .get(&t.wsi_id)
                        .ok_or_else(|| Error::MissingInput(format!("ground truth for slide `{}`", t.wsi_id)))?;
                    map.insert(
                        t.tile_id.clone(),
                        TileTruth {
                            tumor: truth.is_tumor_tile(t, self.cfg.tiling.tile_size),
                            subtype: truth.label,
                        },
                    );
                }
                Ok(Box::new(SyntheticScorer::new(map, self.cfg.scoring.signal, seed)?))
            }
        }
    }

    fn stage_tile(&self) -> Result<()> {
        let m = manifest::load_manifest(&self.manifest_path())?;
        let t = &self.cfg.tiling;
        let tissue = self.cfg.tissue_params()?;
        let l = &self.layout;
        std::fs::create_dir_all(&l.tiles).map_err(|e| Error::io(&l.tiles, e))?;
        let per_slide: Vec<Vec<TileRecord>> = m
            .records
            .par_iter()
            .map(|r| {
                let slide = self.reader.read(&self.slide_path(&r.image_path), r.source_mpp)?;
                let slide = tiling::resample_to_target_mpp(&slide, t.target_mpp)?;
                let mask = tiling::detect_tissue(&slide, t.mask_downsample, &tissue)?;
                let grid = tiling::plan_tiles(
                    &r.wsi_id,
                    slide.width(),
                    slide.height(),
                    t.tile_size,
                    self.cfg.overlap_for(r.label.subtype()),
                    &mask,
                    t.min_tissue_fraction,
                )?;
                if grid.tiles.is_empty() {
                    warn!("{}: no tissue tiles", r.wsi_id);
                }
                for rec in &grid.tiles {
                    tiling::extract_tile(&slide, rec, t.tile_size)?.save_png(&l.tile_png(&rec.tile_id))?;
                }
                Ok(grid.tiles)
            })
            .collect::<Result<_>>()?;
        let all: Vec<TileRecord> = per_slide.into_iter().flatten().collect();
        info!("tiled {} slides into {} tiles", m.records.len(), all.len());
        tiling::save_tile_manifest(&all, &l.tile_manifest)
    }

    fn stage_score_tumor(&self, seed: u64) -> Result<()> {
        let tiles = self.tiles()?;
        let refs: Vec<TileRef> = tiles
            .iter()
            .map(|t| tile_ref(self.layout.tile_png(&t.tile_id), &t.tile_id))
            .collect();
        let scorer = self.scorer(&tiles, seed)?;
        let table = scoring::score_tiles(scorer.as_ref(), &refs, ClassifierId::Tumor)?;
        scoring::save_scores(&table, &self.layout.tumor_scores())
    }

    fn stage_build_ref(&self, seed: u64) -> Result<()> {
        let tiles = self.tiles()?;
        let tumor = self.tumor_tiles_by_wsi(&tiles)?;
        let mpp = self.cfg.tiling.target_mpp;
        let mosaic = stain::build_reference_mosaic(
            &tumor,
            self.cfg.stain.reference_wsis,
            self.cfg.tiling.tile_size,
            seed,
            &self.cfg.stain_params(),
            |t| RasterImage::load_png(&self.layout.tile_png(&t.tile_id), mpp),
        )?;
        mosaic.save(&self.layout.reference)
    }

    fn stage_normalize(&self) -> Result<()> {
        let tiles = self.tiles()?;
        let tumor = self.tumor_tiles_by_wsi(&tiles)?;
        let reference = StainProfile::load(&self.layout.profile())?;
        let params = self.cfg.stain_params();
        let mpp = self.cfg.tiling.target_mpp;
        let enabled = self.cfg.stain.enabled;
        let l = &self.layout;
        std::fs::create_dir_all(&l.normalized).map_err(|e| Error::io(&l.normalized, e))?;
        let logs: Vec<Vec<(String, &'static str)>> = tumor
            .par_iter()
            .map(|(wsi, recs)| {
                let images: Vec<RasterImage> = recs
                    .iter()
                    .map(|t| RasterImage::load_png(&l.tile_png(&t.tile_id), mpp))
                    .collect::<Result<_>>()?;
                let mut wsi_profile: Option<Option<StainProfile>> = None;
                let mut log = Vec::with_capacity(recs.len());
                for (t, img) in recs.iter().zip(&images) {
                    let (out, source) = if !enabled {
                        (img.clone(), "disabled")
                    } else {
                        let own = stain::estimate_stain_profile(&stain::rgb_to_od(img, params.i0), &params);
                        let profile = match own {
                            Ok(p) => Some((p, "tile")),
                            Err(_) => wsi_profile
                                .get_or_insert_with(|| stain::estimate_pooled(&images, &params).ok())
                                .map(|p| (p, "slide")),
                        };
                        match profile {
                            Some((p, src)) => (stain::normalize_tile(img, &p, &reference, params.i0)?, src),
                            None => {
                                warn!("{wsi}: tile {} left unnormalized", t.tile_id);
                                (img.clone(), "none")
                            }
                        }
                    };
                    out.save_png(&l.normalized_png(&t.tile_id))?;
                    log.push((t.tile_id.clone(), source));
                }
                Ok(log)
            })
            .collect::<Result<_>>()?;
        let mut w = CsvWriter::new(&["tile_id", "profile_source"]);
        for (id, src) in logs.into_iter().flatten() {
            w.row([id, src.to_string()]);
        }
        w.finish(&l.normalized.join("normalization.csv"))
    }

    fn stage_split(&self, seed: u64) -> Result<()> {
        let m = self.manifest()?;
        let split = manifest::stratified_patient_split(&m, self.cfg.split_fractions(), seed)?;
        split.save(&self.layout.split_file())
    }

    fn stage_score(&self, seed: u64) -> Result<()> {
        let tiles = self.tiles()?;
        let tumor = self.tumor_tiles_by_wsi(&tiles)?;
        let tumor_tiles: Vec<TileRecord> = tumor.into_values().flatten().collect();
        let refs: Vec<TileRef> = tumor_tiles
            .iter()
            .map(|t| tile_ref(self.layout.normalized_png(&t.tile_id), &t.tile_id))
            .collect();
        let scorer = self.scorer(&tumor_tiles, seed)?;
        let mut table = ScoreTable::new();
        for c in ClassifierId::SUBTYPES {
            table.merge(scoring::score_tiles(scorer.as_ref(), &refs, c)?)?;
        }
        scoring::save_scores(&table, &self.layout.subtype_scores())
    }

    /// Quota-sampled tumor tiles of one split set, grouped by class.
    fn quota_tiles(
        &self,
        m: &CohortManifest,
        split: &BTreeMap<String, SplitSet>,
        set: SplitSet,
        tumor: &BTreeMap<String, Vec<TileRecord>>,
        seed: u64,
    ) -> Result<BTreeMap<Subtype, Vec<String>>> {
        let policy = self.cfg.quota_policy()?;
        let mut groups: BTreeMap<Subtype, Vec<String>> = BTreeMap::new();
        for r in &m.records {
            if split.get(&r.wsi_id) != Some(&set) {
                continue;
            }
            let label = r.label.subtype().expect("subtyping manifest");
            let tiles = tumor.get(&r.wsi_id).map(Vec::as_slice).unwrap_or(&[]);
            let picked = manifest::sample_tile_quota(tiles, label, &policy, rng::derive_seed(seed, &r.wsi_id));
            groups.entry(label).or_default().extend(picked.into_iter().map(|t| t.tile_id));
        }
        Ok(groups)
    }

    fn stage_threshold(&self, seed: u64) -> Result<()> {
        let m = self.manifest()?;
        let split = manifest::load_split(&self.layout.split_file())?;
        let tiles = self.tiles()?;
        let tumor = self.tumor_tiles_by_wsi(&tiles)?;
        let scores = scoring::load_scores_with(&self.layout.subtype_scores(), &self.cfg.score_policy())?;
        let criterion = self.cfg.criterion()?;
        let mut choices = Vec::new();
        for (set, tag) in [(SplitSet::CnnTrain, "train"), (SplitSet::CnnVal, "val")] {
            let set_seed = rng::derive_seed(seed, set.as_str());
            let groups = self.quota_tiles(&m, &split, set, &tumor, set_seed)?;
            for s in Subtype::ALL {
                let data = match manifest::build_ovr_dataset(s, &groups, rng::derive_seed(set_seed, s.as_str())) {
                    Ok(d) => d,
                    Err(e) if set == SplitSet::CnnTrain => {
                        warn!("one-vs-rest training set for {s}: {e}");
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let mut w = CsvWriter::new(&["tile_id", "label"]);
                for (t, lab) in &data {
                    w.row([t.as_str(), lab.as_str()]);
                }
                w.finish(&self.layout.datasets.join(format!("ovr_{s}_{tag}.csv")))?;
                if set == SplitSet::CnnVal {
                    let c = ClassifierId::Subtype(s);
                    let mut sc = Vec::with_capacity(data.len());
                    let mut lb = Vec::with_capacity(data.len());
                    for (t, lab) in &data {
                        let p = scores
                            .get(t, c)
                            .ok_or_else(|| Error::MissingInput(format!("{s} score for tile `{t}`")))?;
                        sc.push(p.target);
                        lb.push(*lab == OvrLabel::Target);
                    }
                    choices.push(threshold::optimal_threshold(c, &sc, &lb, criterion)?);
                }
            }
        }
        let set = match self.cfg.threshold_source()? {
            ThresholdSource::Validation => ThresholdSet::new(choices)?,
            ThresholdSource::Fixed => ThresholdSet::fixed(self.cfg.fixed_thresholds())?,
        };
        for c in set.choices() {
            info!("threshold {}: {} ({} {})", c.classifier, c.threshold, c.criterion, c.criterion_value);
        }
        set.save(&self.layout.threshold_file())
    }

    fn stage_features(&self, seed: u64) -> Result<()> {
        let m = self.manifest()?;
        let split = manifest::load_split(&self.layout.split_file())?;
        let tiles = self.tiles()?;
        let tumor = self.tumor_tiles_by_wsi(&tiles)?;
        let scores = scoring::load_scores_with(&self.layout.subtype_scores(), &self.cfg.score_policy())?;
        let thresholds = ThresholdSet::load(&self.layout.threshold_file())?;
        let boundary = self.cfg.boundary()?;
        let labels: BTreeMap<String, Subtype> = m
            .records
            .iter()
            .filter_map(|r| r.label.subtype().map(|s| (r.wsi_id.clone(), s)))
            .collect();
        for (set, path) in [
            (SplitSet::XgbSet, self.layout.xgb_features()),
            (SplitSet::Test, self.layout.test_features()),
        ] {
            let mut tables = BTreeMap::new();
            for wsi in split.iter().filter(|(_, s)| **s == set).map(|(w, _)| w) {
                let ids: Vec<String> = tumor
                    .get(wsi)
                    .map(|v| v.iter().map(|t| t.tile_id.clone()).collect())
                    .unwrap_or_default();
                let kept = features::cap_tiles(&ids, self.cfg.tile_cap(), rng::derive_seed(seed, wsi));
                tables.insert(wsi.clone(), scores.restrict(kept.iter().map(String::as_str)));
            }
            let fm = features::build_feature_matrix(&tables, &thresholds, Some(&labels), boundary)?;
            for r in fm.rows.iter().filter(|r| r.is_degenerate()) {
                warn!("{}: no tumor tiles, features are all zero", r.wsi_id);
            }
            fm.save(&path)?;
        }
        Ok(())
    }

    fn stage_train(&self, seed: u64) -> Result<()> {
        let m = self.manifest()?;
        let fm = FeatureMatrix::load(&self.layout.xgb_features())?;
        if fm.is_empty() {
            return Err(Error::Invalid("the gbdt training set has no slides".into()));
        }
        let mode = self.cfg.feature_mode()?;
        let ids: BTreeSet<&str> = fm.wsi_ids().into_iter().collect();
        let sub = CohortManifest::new(
            m.task,
            m.records.iter().filter(|r| ids.contains(r.wsi_id.as_str())).cloned().collect(),
        )?;
        let (train_ids, val_ids) = manifest::divide_patients(&sub, self.cfg.split.xgb_train, rng::derive_seed(seed, "divide"))?;
        let train = fm.subset(&train_ids.iter().map(String::as_str).collect());
        let val = fm.subset(&val_ids.iter().map(String::as_str).collect());
        let y = train
            .labels
            .clone()
            .ok_or_else(|| Error::MissingInput("labels in xgb features".into()))?;
        let model = gbdt::train_subtypes(&train.x(mode), &y, &self.cfg.train_config(seed))?;
        model.save(&self.layout.model_file())?;

        let mut w = CsvWriter::new(&["wsi_id", "truth", "predicted"]);
        let mut correct = 0;
        if let Some(vl) = &val.labels {
            for ((row, x), truth) in val.rows.iter().zip(val.x(mode)).zip(vl) {
                let p = model.predict_subtype(&x)?;
                correct += (p == *truth) as usize;
                w.row([row.wsi_id.clone(), truth.to_string(), p.to_string()]);
            }
        }
        if !val.is_empty() {
            info!(
                "gbdt: {} training slides, validation accuracy {}/{}",
                train.len(),
                correct,
                val.len()
            );
        }
        w.finish(&self.layout.model.join("validation.csv"))
    }

    fn stage_predict(&self) -> Result<()> {
        let model = GbdtModel::load(&self.layout.model_file())?;
        let fm = FeatureMatrix::load(&self.layout.test_features())?;
        let mode = self.cfg.feature_mode()?;
        let mut header = vec!["wsi_id".to_string(), "predicted".to_string()];
        header.extend(Subtype::ALL.iter().map(|s| format!("p_{s}")));
        let refs: Vec<&str> = header.iter().map(String::as_str).collect();
        let mut w = CsvWriter::new(&refs);
        for (row, x) in fm.rows.iter().zip(fm.x(mode)) {
            let p = model.predict_proba(&x)?;
            let class = model.predict_subtype(&x)?;
            let mut f = vec![row.wsi_id.clone(), class.to_string()];
            f.extend(p.iter().map(f64::to_string));
            w.row(f);
        }
        w.finish(&self.layout.prediction_file())
    }

    fn stage_evaluate(&self, seed: u64) -> Result<()> {
        let records = load_eval_records(&self.layout.prediction_file(), &self.layout.test_features())?;
        let names: Vec<&str> = Subtype::ALL.iter().map(|s| s.as_str()).collect();
        let report = metrics::evaluate(&records, &names, &self.cfg.bootstrap_params(seed))?;
        info!(
            "evaluation: accuracy {:.3}, macro F1 {:.3}",
            report.overall_accuracy, report.macro_row.metrics[0].point
        );
        report.save(&self.layout.report)
    }

    fn stage_heatmap(&self) -> Result<()> {
        let m = manifest::load_manifest(&self.manifest_path())?;
        let split = manifest::load_split(&self.layout.split_file())?;
        let sets: Vec<SplitSet> = self
            .cfg
            .heatmap
            .sets
            .iter()
            .map(|s| s.parse())
            .collect::<Result<_>>()?;
        let tiles = group_by_wsi(&self.tiles()?);
        let table = self.tumor_table()?;
        let scores: BTreeMap<String, f64> = table
            .iter()
            .filter(|r| r.classifier == ClassifierId::Tumor)
            .map(|r| (r.tile_id, r.target))
            .collect();
        let t = &self.cfg.tiling;
        let h = &self.cfg.heatmap;
        std::fs::create_dir_all(&self.layout.heatmaps).map_err(|e| Error::io(&self.layout.heatmaps, e))?;
        m.records
            .par_iter()
            .filter(|r| split.get(&r.wsi_id).is_some_and(|s| sets.contains(s)))
            .try_for_each(|r| {
                let slide = self.reader.read(&self.slide_path(&r.image_path), r.source_mpp)?;
                let slide = tiling::resample_to_target_mpp(&slide, t.target_mpp)?;
                let recs = tiles.get(&r.wsi_id).map(Vec::as_slice).unwrap_or(&[]);
                let heat = heatmap::heat_tiles(recs, &scores, t.tile_size)?;
                let spec = HeatmapSpec {
                    base: heatmap::downsample_base(&slide, h.downsample)?,
                    tiles: heat,
                    ramp: ColorRamp::GreenYellowRed,
                    opacity: h.opacity,
                    downsample: h.downsample,
                };
                let img = heatmap::stitch_heatmap(&spec)?;
                img.save_png(&self.layout.heatmaps.join(format!("{}.png", r.wsi_id)))?;
                heatmap::save_sidecar(&spec.tiles, &self.layout.heatmaps.join(format!("{}_scores.csv", r.wsi_id)))
            })
    }
}

/// Joins predictions with the labelled test features.
pub fn load_eval_records(predictions: &Path, test_features: &Path) -> Result<Vec<EvalRecord>> {
    let fm = FeatureMatrix::load(test_features)?;
    let labels = fm
        .labels
        .as_ref()
        .ok_or_else(|| Error::MissingInput("labels in test features".into()))?;
    let truth: BTreeMap<&str, Subtype> = fm.wsi_ids().into_iter().zip(labels.iter().copied()).collect();
    let mut header = vec!["wsi_id".to_string(), "predicted".to_string()];
    header.extend(Subtype::ALL.iter().map(|s| format!("p_{s}")));
    let refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let (rows, _) = csvio::read_table(predictions, &refs, &[])?;
    rows.into_iter()
        .map(|row| {
            let f = &row.fields;
            let predicted: Subtype = f[1].parse().map_err(|e: Error| Error::parse(predictions, row.line, e.to_string()))?;
            let t = truth
                .get(f[0].as_str())
                .ok_or_else(|| Error::parse(predictions, row.line, format!("no label for `{}`", f[0])))?;
            let probabilities = (0..4)
                .map(|k| csvio::parse_f64(predictions, row.line, &f[2 + k], "probability"))
                .collect::<Result<Vec<_>>>()?;
            Ok(EvalRecord {
                wsi_id: f[0].clone(),
                truth: t.index(),
                predicted: predicted.index(),
                probabilities,
            })
        })
        .collect()
}

/// Configuration written next to a generated synthetic cohort.
pub fn synthetic_config_text(signal: f64, seed: u64) -> String {
    format!(
        r#"# Pipeline settings for a generated synthetic cohort.
seed = {seed}

[paths]
manifest = "manifest.csv"
work_dir = "work"

[tiling]
tile_size = 64
overlap_her2 = 8
mask_downsample = 4

[stain]
reference_wsis = 64

[quotas]
LumA = 12
LumB = 16
HER2 = "all"
Basal = 20

[scoring]
backend = "synthetic"
ground_truth = "ground_truth.csv"
signal = {signal:?}

[gbdt]
n_rounds = 50
min_child_weight = 0.1

[bootstrap]
n_resamples = 200

[heatmap]
downsample = 2
"#
    )
}

/// Generates a synthetic cohort and its `pipeline.toml` under `out_dir`.
pub fn generate_synthetic(spec: &synthetic::CohortSpec, signal: f64, out_dir: &Path) -> Result<PathBuf> {
    if !(0.0..=1.0).contains(&signal) {
        return Err(Error::Config("signal must lie in [0, 1]".into()));
    }
    synthetic::generate_synthetic_cohort(spec, out_dir)?;
    let path = out_dir.join("pipeline.toml");
    csvio::write_file(&path, synthetic_config_text(signal, spec.seed).as_bytes())?;
    Ok(path)
}
