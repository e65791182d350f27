//! Pipeline configuration: an embedded default TOML document, deep-merged
//! with an optional user file and `key=value` overrides, then validated.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{Boundary, FeatureMode};
use crate::gbdt::TrainConfig;
use crate::labels::Subtype;
use crate::manifest::{Quota, QuotaPolicy};
use crate::metrics::BootstrapParams;
use crate::scoring::ScorePolicy;
use crate::stain::StainParams;
use crate::threshold::Criterion;
use crate::tiling::TissueParams;

pub const DEFAULT_CONFIG: &str = include_str!("default_config.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub tiling: TilingConfig,
    pub stain: StainConfig,
    pub split: SplitConfig,
    pub quotas: QuotaConfig,
    pub scoring: ScoringConfig,
    pub thresholds: ThresholdConfig,
    pub features: FeatureConfig,
    pub gbdt: GbdtConfig,
    pub bootstrap: BootstrapConfig,
    pub heatmap: HeatmapConfig,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub manifest: String,
    pub work_dir: String,
    pub tile_dir: String,
    pub score_dir: String,
    pub model_dir: String,
    pub report_dir: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SaturationSetting {
    Value(f64),
    Method(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TilingConfig {
    pub tile_size: usize,
    pub target_mpp: f64,
    pub overlap: usize,
    pub overlap_her2: usize,
    pub min_tissue_fraction: f64,
    pub mask_downsample: usize,
    pub saturation_threshold: SaturationSetting,
    pub min_saturation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StainConfig {
    pub enabled: bool,
    pub i0: f64,
    pub alpha: f64,
    pub beta: f64,
    pub reference_wsis: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub cnn: f64,
    pub xgb: f64,
    pub test: f64,
    pub cnn_train: f64,
    pub xgb_train: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum QuotaSetting {
    Count(u64),
    Keyword(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuotaConfig {
    #[serde(rename = "LumA")]
    pub luma: QuotaSetting,
    #[serde(rename = "LumB")]
    pub lumb: QuotaSetting,
    #[serde(rename = "HER2")]
    pub her2: QuotaSetting,
    #[serde(rename = "Basal")]
    pub basal: QuotaSetting,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Synthetic,
    Process,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoringConfig {
    pub backend: String,
    pub command: String,
    pub workers: usize,
    pub tumor_threshold: f64,
    pub pair_sum_tolerance: f64,
    pub strict_pair_sum: bool,
    pub signal: f64,
    pub ground_truth: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdSource {
    Validation,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdConfig {
    pub source: String,
    pub criterion: String,
    pub boundary: String,
    #[serde(rename = "LumA")]
    pub luma: f64,
    #[serde(rename = "LumB")]
    pub lumb: f64,
    #[serde(rename = "HER2")]
    pub her2: f64,
    #[serde(rename = "Basal")]
    pub basal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    pub mode: String,
    pub tile_cap: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GbdtConfig {
    pub n_rounds: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub max_depth: usize,
    pub min_child_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapConfig {
    pub n_resamples: usize,
    pub level: f64,
    pub max_retries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeatmapConfig {
    pub downsample: usize,
    pub opacity: f64,
    pub sets: Vec<String>,
}

fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_override(spec: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key.split('.').map(str::to_string).collect(), value))
}

fn apply_override(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty key");
    let mut cur = table;
    for p in parents {
        cur = match cur.get_mut(p) {
            Some(toml::Value::Table(t)) => t,
            _ => return Err(Error::Config(format!("unknown config section `{}`", path.join(".")))),
        };
    }
    if !cur.contains_key(last) {
        return Err(Error::Config(format!("unknown config key `{}`", path.join("."))));
    }
    cur.insert(last.clone(), value);
    Ok(())
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::from_tables(None, &[], PathBuf::from(".")).expect("embedded default config is valid")
    }
}

impl PipelineConfig {
    /// Loads the defaults, the optional user file, then overrides, and
    /// validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let (user, base_dir) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                let table: toml::Table = toml::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                let dir = p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
                (Some(table), dir.to_path_buf())
            }
            None => (None, PathBuf::from(".")),
        };
        Self::from_tables(user, overrides, base_dir)
    }

    /// Like [`load`](Self::load) with the user document given as text.
    pub fn from_toml_str(text: &str, overrides: &[String], base_dir: &Path) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_tables(Some(table), overrides, base_dir.to_path_buf())
    }

    fn from_tables(user: Option<toml::Table>, overrides: &[String], base_dir: PathBuf) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(DEFAULT_CONFIG).expect("embedded default parses");
        if let Some(u) = user {
            merge(&mut table, u);
        }
        for o in overrides {
            let (key, value) = parse_override(o)?;
            apply_override(&mut table, &key, value)?;
        }
        let mut cfg: PipelineConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.base_dir = base_dir;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let t = &self.tiling;
        if t.tile_size == 0 {
            return bad("tiling.tile_size must be positive".into());
        }
        for (name, o) in [("overlap", t.overlap), ("overlap_her2", t.overlap_her2)] {
            if o >= t.tile_size {
                return bad(format!("tiling.{name} = {o} must be below tile_size {}", t.tile_size));
            }
        }
        if !(t.target_mpp > 0.0 && t.target_mpp.is_finite()) {
            return bad("tiling.target_mpp must be positive".into());
        }
        if !(0.0..=1.0).contains(&t.min_tissue_fraction) {
            return bad("tiling.min_tissue_fraction must lie in [0, 1]".into());
        }
        if t.mask_downsample == 0 {
            return bad("tiling.mask_downsample must be >= 1".into());
        }
        self.tissue_params()?;
        self.stain_params().validate()?;
        if self.stain.reference_wsis == 0 {
            return bad("stain.reference_wsis must be >= 1".into());
        }
        let s = &self.split;
        let parts = [s.cnn, s.xgb, s.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("split.cnn + split.xgb + split.test must be fractions summing to 1".into());
        }
        for (name, f) in [("cnn_train", s.cnn_train), ("xgb_train", s.xgb_train)] {
            if !(f > 0.0 && f < 1.0) {
                return bad(format!("split.{name} must lie strictly between 0 and 1"));
            }
        }
        self.quota_policy()?;
        self.backend()?;
        let sc = &self.scoring;
        if sc.workers == 0 {
            return bad("scoring.workers must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&sc.tumor_threshold) {
            return bad("scoring.tumor_threshold must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&sc.signal) {
            return bad("scoring.signal must lie in [0, 1]".into());
        }
        if !(sc.pair_sum_tolerance >= 0.0) {
            return bad("scoring.pair_sum_tolerance must be >= 0".into());
        }
        self.threshold_source()?;
        self.criterion()?;
        self.boundary()?;
        for (s, v) in self.fixed_thresholds() {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("thresholds.{s} must lie in [0, 1]"));
            }
        }
        self.feature_mode()?;
        self.train_config(0).validate()?;
        self.bootstrap_params(0).validate()?;
        if self.heatmap.downsample == 0 {
            return bad("heatmap.downsample must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.heatmap.opacity) {
            return bad("heatmap.opacity must lie in [0, 1]".into());
        }
        for set in &self.heatmap.sets {
            set.parse::<crate::manifest::SplitSet>()
                .map_err(|_| Error::Config(format!("heatmap.sets: unknown set `{set}`")))?;
        }
        Ok(())
    }

    pub fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn tissue_params(&self) -> Result<TissueParams> {
        let saturation_threshold = match &self.tiling.saturation_threshold {
            SaturationSetting::Value(v) if (0.0..=1.0).contains(v) => Some(*v),
            SaturationSetting::Method(m) if m == "otsu" => None,
            other => {
                return Err(Error::Config(format!(
                    "tiling.saturation_threshold: expected \"otsu\" or a value in [0, 1], got {other:?}"
                )))
            }
        };
        Ok(TissueParams {
            saturation_threshold,
            min_saturation: self.tiling.min_saturation,
        })
    }

    pub fn overlap_for(&self, label: Option<Subtype>) -> usize {
        if label == Some(Subtype::Her2) {
            self.tiling.overlap_her2
        } else {
            self.tiling.overlap
        }
    }

    pub fn stain_params(&self) -> StainParams {
        StainParams {
            i0: self.stain.i0,
            beta: self.stain.beta,
            alpha: self.stain.alpha,
        }
    }

    /// Four-way split fractions `(cnn_train, cnn_val, xgb, test)`.
    pub fn split_fractions(&self) -> [f64; 4] {
        let s = &self.split;
        [s.cnn * s.cnn_train, s.cnn * (1.0 - s.cnn_train), s.xgb, s.test]
    }

    pub fn quota_policy(&self) -> Result<QuotaPolicy> {
        let q = &self.quotas;
        let mut map = BTreeMap::new();
        for (s, v) in [
            (Subtype::LumA, &q.luma),
            (Subtype::LumB, &q.lumb),
            (Subtype::Her2, &q.her2),
            (Subtype::Basal, &q.basal),
        ] {
            let quota = match v {
                QuotaSetting::Count(0) => return Err(Error::Config(format!("quotas.{s} must be positive"))),
                QuotaSetting::Count(n) => Quota::Count(*n as usize),
                QuotaSetting::Keyword(k) if k == "all" => Quota::All,
                QuotaSetting::Keyword(k) => {
                    return Err(Error::Config(format!("quotas.{s}: expected a count or \"all\", got `{k}`")))
                }
            };
            map.insert(s, quota);
        }
        QuotaPolicy::new(map)
    }

    pub fn backend(&self) -> Result<Backend> {
        match self.scoring.backend.as_str() {
            "synthetic" => Ok(Backend::Synthetic),
            "process" => Ok(Backend::Process),
            other => Err(Error::Config(format!("scoring.backend: unknown backend `{other}`"))),
        }
    }

    pub fn score_policy(&self) -> ScorePolicy {
        ScorePolicy {
            pair_sum_tolerance: self.scoring.pair_sum_tolerance,
            strict_pair_sum: self.scoring.strict_pair_sum,
        }
    }

    pub fn threshold_source(&self) -> Result<ThresholdSource> {
        match self.thresholds.source.as_str() {
            "validation" => Ok(ThresholdSource::Validation),
            "fixed" => Ok(ThresholdSource::Fixed),
            other => Err(Error::Config(format!("thresholds.source: unknown source `{other}`"))),
        }
    }

    pub fn criterion(&self) -> Result<Criterion> {
        self.thresholds.criterion.parse()
    }

    pub fn boundary(&self) -> Result<Boundary> {
        match self.thresholds.boundary.as_str() {
            "inclusive" => Ok(Boundary::Inclusive),
            "strict" => Ok(Boundary::Strict),
            other => Err(Error::Config(format!("thresholds.boundary: unknown rule `{other}`"))),
        }
    }

    pub fn fixed_thresholds(&self) -> [(Subtype, f64); 4] {
        let t = &self.thresholds;
        [
            (Subtype::LumA, t.luma),
            (Subtype::LumB, t.lumb),
            (Subtype::Her2, t.her2),
            (Subtype::Basal, t.basal),
        ]
    }

    pub fn feature_mode(&self) -> Result<FeatureMode> {
        match self.features.mode.as_str() {
            "counts" => Ok(FeatureMode::Counts),
            "fractions" => Ok(FeatureMode::Fractions),
            other => Err(Error::Config(format!("features.mode: unknown mode `{other}`"))),
        }
    }

    pub fn tile_cap(&self) -> Option<usize> {
        (self.features.tile_cap > 0).then_some(self.features.tile_cap)
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let g = &self.gbdt;
        TrainConfig {
            n_rounds: g.n_rounds,
            learning_rate: g.learning_rate,
            lambda: g.lambda,
            gamma: g.gamma,
            max_depth: g.max_depth,
            min_child_weight: g.min_child_weight,
            seed,
        }
    }

    pub fn bootstrap_params(&self, seed: u64) -> BootstrapParams {
        BootstrapParams {
            n_resamples: self.bootstrap.n_resamples,
            level: self.bootstrap.level,
            seed,
            max_retries: self.bootstrap.max_retries,
        }
    }

    /// SHA-256 over the canonical JSON of the named top-level sections.
    pub fn section_hash(&self, sections: &[&str]) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        let mut h = Sha256::new();
        for s in sections {
            h.update(s.as_bytes());
            h.update(b"=");
            h.update(v.get(*s).map(|x| x.to_string()).unwrap_or_default().as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
