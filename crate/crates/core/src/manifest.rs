//! Cohort manifests, patient-level stratified splits, per-class tile quotas
//! and one-vs-rest training set assembly.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use rand::seq::{index, SliceRandom};

use crate::csvio::{self, CsvWriter};
use crate::error::{Error, Result};
use crate::labels::{SlideLabel, Subtype, Task};
use crate::rng;
use crate::tiling::TileRecord;

pub const MANIFEST_HEADER: [&str; 5] = ["wsi_id", "patient_id", "label", "image_path", "source_mpp"];

#[derive(Debug, Clone, PartialEq)]
pub struct SlideRecord {
    pub wsi_id: String,
    pub patient_id: String,
    pub label: SlideLabel,
    pub image_path: PathBuf,
    pub source_mpp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortManifest {
    pub task: Task,
    pub records: Vec<SlideRecord>,
}

impl CohortManifest {
    /// Validates and wraps a record list. Ids must be unique, every label must
    /// belong to `task` and every resolution must be positive.
    pub fn new(task: Task, records: Vec<SlideRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Invalid("manifest has no records".into()));
        }
        let mut seen = BTreeSet::new();
        for r in &records {
            if !seen.insert(r.wsi_id.as_str()) {
                return Err(Error::Duplicate(r.wsi_id.clone()));
            }
            if r.label.task() != task {
                return Err(Error::UnknownLabel(r.label.to_string()));
            }
            if !(r.source_mpp > 0.0 && r.source_mpp.is_finite()) {
                return Err(Error::Invalid(format!(
                    "{}: source_mpp must be positive",
                    r.wsi_id
                )));
            }
        }
        Ok(CohortManifest { task, records })
    }

    pub fn get(&self, wsi_id: &str) -> Option<&SlideRecord> {
        self.records.iter().find(|r| r.wsi_id == wsi_id)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = CsvWriter::new(&MANIFEST_HEADER);
        for r in &self.records {
            w.row([
                r.wsi_id.clone(),
                r.patient_id.clone(),
                r.label.to_string(),
                r.image_path.display().to_string(),
                r.source_mpp.to_string(),
            ]);
        }
        w.finish(path)
    }
}

/// Loads a manifest, inferring the task from its labels. Labels outside both
/// label sets (for example `Normal-like`) are rejected.
pub fn load_manifest(path: &Path) -> Result<CohortManifest> {
    let records = read_records(path)?;
    let task = records
        .first()
        .map(|r| r.label.task())
        .ok_or_else(|| Error::parse(path, 2, "manifest has no records"))?;
    CohortManifest::new(task, records)
}

/// Loads a manifest and requires every label to belong to `task`.
pub fn load_manifest_for_task(path: &Path, task: Task) -> Result<CohortManifest> {
    CohortManifest::new(task, read_records(path)?)
}

fn read_records(path: &Path) -> Result<Vec<SlideRecord>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.display().to_string()));
    }
    let (rows, _) = csvio::read_table(path, &MANIFEST_HEADER, &[])?;
    let mut out = Vec::with_capacity(rows.len());
    let mut seen = BTreeSet::new();
    for row in rows {
        let f = &row.fields;
        if f[0].is_empty() || f[1].is_empty() {
            return Err(Error::parse(path, row.line, "empty wsi_id or patient_id"));
        }
        if !seen.insert(f[0].clone()) {
            return Err(Error::Duplicate(f[0].clone()));
        }
        let label: SlideLabel = f[2].parse()?;
        let mpp = csvio::parse_f64(path, row.line, &f[4], "source_mpp")?;
        if !(mpp > 0.0 && mpp.is_finite()) {
            return Err(Error::parse(path, row.line, "source_mpp must be positive"));
        }
        out.push(SlideRecord {
            wsi_id: f[0].clone(),
            patient_id: f[1].clone(),
            label,
            image_path: PathBuf::from(&f[3]),
            source_mpp: mpp,
        });
    }
    Ok(out)
}

/// The four disjoint partitions of a cohort.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SplitSet {
    CnnTrain,
    CnnVal,
    XgbSet,
    Test,
}

impl SplitSet {
    pub const ALL: [SplitSet; 4] = [
        SplitSet::CnnTrain,
        SplitSet::CnnVal,
        SplitSet::XgbSet,
        SplitSet::Test,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitSet::CnnTrain => "cnn_train",
            SplitSet::CnnVal => "cnn_val",
            SplitSet::XgbSet => "xgb_set",
            SplitSet::Test => "test",
        }
    }
}

impl fmt::Display for SplitSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SplitSet::ALL
            .into_iter()
            .find(|set| set.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown split set `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitAssignment {
    pub assignment: BTreeMap<String, SplitSet>,
    pub fractions: [f64; 4],
    pub seed: u64,
}

impl SplitAssignment {
    pub fn set_of(&self, wsi_id: &str) -> Option<SplitSet> {
        self.assignment.get(wsi_id).copied()
    }

    pub fn members(&self, set: SplitSet) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, s)| **s == set)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut w = CsvWriter::new(&["wsi_id", "set"]);
        for (id, set) in &self.assignment {
            w.row([id.as_str(), set.as_str()]);
        }
        w.into_string()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        csvio::write_file(path, self.to_csv().as_bytes())
    }
}

/// Reads a `wsi_id,set` file back into a lookup.
pub fn load_split(path: &Path) -> Result<BTreeMap<String, SplitSet>> {
    let (rows, _) = csvio::read_table(path, &["wsi_id", "set"], &[])?;
    let mut out = BTreeMap::new();
    for row in rows {
        let set = row.fields[1]
            .parse()
            .map_err(|_| Error::parse(path, row.line, format!("unknown set `{}`", row.fields[1])))?;
        if out.insert(row.fields[0].clone(), set).is_some() {
            return Err(Error::Duplicate(row.fields[0].clone()));
        }
    }
    Ok(out)
}

struct Patient<'a> {
    wsis: Vec<&'a str>,
}

/// Majority label of a patient's slides; ties go to the lexicographically
/// smallest label name.
fn patient_label(labels: &[SlideLabel]) -> SlideLabel {
    let mut counts: BTreeMap<&str, (usize, SlideLabel)> = BTreeMap::new();
    for l in labels {
        counts.entry(l.as_str()).or_insert((0, *l)).0 += 1;
    }
    let best = counts.values().map(|(c, _)| *c).max().unwrap_or(0);
    counts
        .values()
        .find(|(c, _)| *c == best)
        .map(|(_, l)| *l)
        .expect("patient has at least one slide")
}

fn group_patients(manifest: &CohortManifest) -> BTreeMap<SlideLabel, Vec<Patient<'_>>> {
    let mut by_patient: BTreeMap<&str, (Vec<&str>, Vec<SlideLabel>)> = BTreeMap::new();
    for r in &manifest.records {
        let e = by_patient.entry(r.patient_id.as_str()).or_default();
        e.0.push(r.wsi_id.as_str());
        e.1.push(r.label);
    }
    let mut by_class: BTreeMap<SlideLabel, Vec<Patient<'_>>> = BTreeMap::new();
    for (_, (wsis, labels)) in by_patient {
        by_class
            .entry(patient_label(&labels))
            .or_default()
            .push(Patient { wsis });
    }
    by_class
}

/// Cut points for `n` items at the cumulative `fractions`; sizes differ from
/// `fraction * n` by less than one item.
fn cut_points(n: usize, fractions: &[f64]) -> Vec<usize> {
    let mut cum = 0.0;
    let mut cuts = Vec::with_capacity(fractions.len());
    for (i, f) in fractions.iter().enumerate() {
        cum += f;
        let c = if i + 1 == fractions.len() {
            n
        } else {
            ((cum * n as f64).round() as usize).min(n)
        };
        cuts.push(c);
    }
    cuts
}

fn validate_fractions(fractions: &[f64]) -> Result<()> {
    if fractions.iter().any(|f| !(*f >= 0.0) || !f.is_finite()) {
        return Err(Error::Invalid("split fractions must be non-negative".into()));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!(
            "split fractions sum to {total}, expected 1"
        )));
    }
    Ok(())
}

/// Assigns every slide to one of the four sets such that all slides of a
/// patient share a set and each class is split at the requested fractions.
///
/// Patients of each class (majority label) are sorted by id, shuffled with a
/// per-class stream derived from `seed`, then cut at the cumulative fractions.
pub fn stratified_patient_split(
    manifest: &CohortManifest,
    fractions: [f64; 4],
    seed: u64,
) -> Result<SplitAssignment> {
    validate_fractions(&fractions)?;
    let non_empty = fractions.iter().filter(|f| **f > 0.0).count();
    let mut assignment = BTreeMap::new();
    for (label, mut patients) in group_patients(manifest) {
        if patients.len() < non_empty {
            return Err(Error::Invalid(format!(
                "class {label} has {} patients but {non_empty} non-empty split fractions",
                patients.len()
            )));
        }
        let mut rng = rng::seeded(rng::derive_seed(seed, label.as_str()));
        patients.shuffle(&mut rng);
        let cuts = cut_points(patients.len(), &fractions);
        let mut start = 0;
        for (set, end) in SplitSet::ALL.into_iter().zip(cuts) {
            for p in &patients[start..end] {
                for w in &p.wsis {
                    assignment.insert((*w).to_string(), set);
                }
            }
            start = end;
        }
    }
    Ok(SplitAssignment {
        assignment,
        fractions,
        seed,
    })
}

/// Two-way patient-level division of a sub-cohort (used for the internal
/// train/validation division of a set). Unlike [`stratified_patient_split`]
/// a class too small to populate both sides is not an error.
pub fn divide_patients(
    manifest: &CohortManifest,
    first_fraction: f64,
    seed: u64,
) -> Result<(Vec<String>, Vec<String>)> {
    validate_fractions(&[first_fraction, 1.0 - first_fraction])?;
    let mut first = Vec::new();
    let mut second = Vec::new();
    for (label, mut patients) in group_patients(manifest) {
        let mut rng = rng::seeded(rng::derive_seed(seed, label.as_str()));
        patients.shuffle(&mut rng);
        let cut = cut_points(patients.len(), &[first_fraction, 1.0 - first_fraction])[0];
        for (i, p) in patients.iter().enumerate() {
            let side = if i < cut { &mut first } else { &mut second };
            side.extend(p.wsis.iter().map(|w| w.to_string()));
        }
    }
    first.sort();
    second.sort();
    Ok((first, second))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quota {
    Count(usize),
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuotaPolicy {
    pub per_class: BTreeMap<Subtype, Quota>,
}

impl QuotaPolicy {
    pub fn new(per_class: BTreeMap<Subtype, Quota>) -> Result<Self> {
        if per_class.values().any(|q| *q == Quota::Count(0)) {
            return Err(Error::Invalid("numeric quotas must be positive".into()));
        }
        Ok(QuotaPolicy { per_class })
    }

    /// Classes without an entry are unrestricted.
    pub fn quota(&self, class: Subtype) -> Quota {
        self.per_class.get(&class).copied().unwrap_or(Quota::All)
    }
}

/// Uniformly samples `min(quota, tiles.len())` tiles of one slide without
/// replacement. The sample keeps the input order; a shortfall is returned
/// as-is, never upsampled.
pub fn sample_tile_quota(
    tiles: &[TileRecord],
    label: Subtype,
    policy: &QuotaPolicy,
    seed: u64,
) -> Vec<TileRecord> {
    debug_assert!(tiles.windows(2).all(|w| w[0].wsi_id == w[1].wsi_id));
    match policy.quota(label) {
        Quota::All => tiles.to_vec(),
        Quota::Count(q) if q >= tiles.len() => tiles.to_vec(),
        Quota::Count(q) => {
            let mut rng = rng::seeded(seed);
            let mut picked = index::sample(&mut rng, tiles.len(), q).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| tiles[i].clone()).collect()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OvrLabel {
    Target,
    Rest,
}

impl OvrLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            OvrLabel::Target => "target",
            OvrLabel::Rest => "rest",
        }
    }
}

/// Binary training set for one one-vs-rest classifier: every tile of the
/// target class plus `floor(n_c / 3)` tiles sampled from each other class.
pub fn build_ovr_dataset<T: Clone>(
    target: Subtype,
    tiles_by_class: &BTreeMap<Subtype, Vec<T>>,
    seed: u64,
) -> Result<Vec<(T, OvrLabel)>> {
    let positives = tiles_by_class.get(&target).map(Vec::as_slice).unwrap_or(&[]);
    if positives.is_empty() {
        return Err(Error::Invalid(format!("no tiles for target class {target}")));
    }
    let mut out: Vec<(T, OvrLabel)> = positives
        .iter()
        .map(|t| (t.clone(), OvrLabel::Target))
        .collect();
    let mut negatives = 0;
    for class in Subtype::ALL.into_iter().filter(|c| *c != target) {
        let pool = tiles_by_class.get(&class).map(Vec::as_slice).unwrap_or(&[]);
        let take = pool.len() / 3;
        if take == 0 {
            continue;
        }
        let mut rng = rng::seeded(rng::derive_seed(seed, class.as_str()));
        let mut picked = index::sample(&mut rng, pool.len(), take).into_vec();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|i| (pool[i].clone(), OvrLabel::Rest)));
        negatives += take;
    }
    if negatives == 0 {
        warn!("one-vs-rest set for {target} has no negative tiles");
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn record(wsi: &str, patient: &str, label: Subtype) -> SlideRecord {
        SlideRecord {
            wsi_id: wsi.into(),
            patient_id: patient.into(),
            label: SlideLabel::Subtype(label),
            image_path: PathBuf::from(format!("{wsi}.png")),
            source_mpp: 0.5,
        }
    }

    fn write_tmp(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_four_row_manifest() {
        let f = write_tmp(
            "wsi_id,patient_id,label,image_path,source_mpp\n\
             a,p1,LumA,a.png,0.25\nb,p2,LumB,b.png,0.5\nc,p3,HER2,c.png,0.5\nd,p4,Basal,d.png,0.5\n",
        );
        let m = load_manifest(f.path()).unwrap();
        assert_eq!(m.records.len(), 4);
        assert_eq!(m.task, Task::Subtyping);
        assert_eq!(m.records[0].source_mpp, 0.25);
    }

    #[test]
    fn rejects_duplicate_wsi() {
        let f = write_tmp(
            "wsi_id,patient_id,label,image_path,source_mpp\na,p1,LumA,a.png,0.5\na,p2,LumB,b.png,0.5\n",
        );
        assert!(matches!(load_manifest(f.path()), Err(Error::Duplicate(id)) if id == "a"));
    }

    #[test]
    fn rejects_normal_like() {
        let f = write_tmp(
            "wsi_id,patient_id,label,image_path,source_mpp\na,p1,LumA,a.png,0.5\nb,p2,Normal-like,b.png,0.5\n",
        );
        assert!(matches!(load_manifest(f.path()), Err(Error::UnknownLabel(l)) if l == "Normal-like"));
    }

    #[test]
    fn malformed_row_reports_line() {
        let f = write_tmp("wsi_id,patient_id,label,image_path,source_mpp\na,p1,LumA,a.png\n");
        match load_manifest(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let f = write_tmp("wsi_id,patient_id,label,image_path,source_mpp\na,p1,LumA,a.png,-1\n");
        assert!(matches!(load_manifest(f.path()), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn missing_file() {
        assert!(matches!(
            load_manifest(Path::new("/nonexistent/manifest.csv")),
            Err(Error::MissingInput(_))
        ));
    }

    #[test]
    fn mixed_tasks_rejected() {
        let records = vec![
            record("a", "p1", Subtype::LumA),
            SlideRecord {
                label: SlideLabel::Tumor,
                ..record("b", "p2", Subtype::LumA)
            },
        ];
        assert!(CohortManifest::new(Task::Subtyping, records).is_err());
    }

    #[test]
    fn exact_split_sizes() {
        let records = (0..100)
            .map(|i| record(&format!("w{i:03}"), &format!("p{i:03}"), Subtype::LumA))
            .collect();
        let m = CohortManifest::new(Task::Subtyping, records).unwrap();
        let s = stratified_patient_split(&m, [0.7, 0.0, 0.15, 0.15], 1).unwrap();
        let sizes: Vec<usize> = SplitSet::ALL.iter().map(|set| s.members(*set).len()).collect();
        assert_eq!(sizes, vec![70, 0, 15, 15]);
    }

    #[test]
    fn patient_slides_stay_together() {
        let mut records: Vec<SlideRecord> = (0..20)
            .map(|i| record(&format!("w{i:02}"), &format!("p{i:02}"), Subtype::Basal))
            .collect();
        for k in 0..3 {
            records.push(record(&format!("multi{k}"), "P", Subtype::Basal));
        }
        let m = CohortManifest::new(Task::Subtyping, records).unwrap();
        for seed in 0..20 {
            let s = stratified_patient_split(&m, [0.5, 0.2, 0.15, 0.15], seed).unwrap();
            let sets: BTreeSet<_> = (0..3).map(|k| s.set_of(&format!("multi{k}")).unwrap()).collect();
            assert_eq!(sets.len(), 1);
        }
    }

    #[test]
    fn stratification_counts() {
        let mut records = Vec::new();
        for i in 0..40 {
            records.push(record(&format!("a{i:02}"), &format!("pa{i:02}"), Subtype::LumA));
            records.push(record(&format!("b{i:02}"), &format!("pb{i:02}"), Subtype::Basal));
        }
        let m = CohortManifest::new(Task::Subtyping, records).unwrap();
        let s = stratified_patient_split(&m, [0.5, 0.0, 0.25, 0.25], 9).unwrap();
        // independent tally of class membership per set
        for set in SplitSet::ALL {
            let members = s.members(set);
            let luma = members.iter().filter(|w| w.starts_with('a')).count();
            let basal = members.iter().filter(|w| w.starts_with('b')).count();
            let expected = match set {
                SplitSet::CnnTrain => 20,
                SplitSet::CnnVal => 0,
                _ => 10,
            };
            assert_eq!((luma, basal), (expected, expected), "{set}");
        }
    }

    #[test]
    fn too_few_patients() {
        let m = CohortManifest::new(
            Task::Subtyping,
            vec![record("a", "p", Subtype::LumA), record("b", "q", Subtype::LumA)],
        )
        .unwrap();
        assert!(stratified_patient_split(&m, [0.7, 0.1, 0.1, 0.1], 0).is_err());
        assert!(stratified_patient_split(&m, [0.5, 0.0, 0.0, 0.5], 0).is_ok());
    }

    #[test]
    fn fractions_must_sum_to_one() {
        let m = CohortManifest::new(Task::Subtyping, vec![record("a", "p", Subtype::LumA)]).unwrap();
        assert!(stratified_patient_split(&m, [0.7, 0.1, 0.1, 0.2], 0).is_err());
    }

    #[test]
    fn mixed_label_patient_uses_majority_then_name() {
        let l = |s| SlideLabel::Subtype(s);
        assert_eq!(
            patient_label(&[l(Subtype::LumB), l(Subtype::LumB), l(Subtype::Basal)]),
            l(Subtype::LumB)
        );
        // tie: "Basal" < "LumA"
        assert_eq!(
            patient_label(&[l(Subtype::LumA), l(Subtype::Basal)]),
            l(Subtype::Basal)
        );
    }

    fn tiles(n: usize) -> Vec<TileRecord> {
        (0..n).map(|i| TileRecord::new("w", i as u32 * 512, 0, 1.0)).collect()
    }

    fn policy() -> QuotaPolicy {
        QuotaPolicy::new(BTreeMap::from([
            (Subtype::LumA, Quota::Count(441)),
            (Subtype::LumB, Quota::Count(1180)),
            (Subtype::Basal, Quota::Count(1410)),
            (Subtype::Her2, Quota::All),
        ]))
        .unwrap()
    }

    #[test]
    fn quota_sampling() {
        let t = tiles(1000);
        let s = sample_tile_quota(&t, Subtype::LumA, &policy(), 3);
        assert_eq!(s.len(), 441);
        let ids: BTreeSet<_> = s.iter().map(|t| t.tile_id.clone()).collect();
        assert_eq!(ids.len(), 441);
        assert_eq!(s, sample_tile_quota(&t, Subtype::LumA, &policy(), 3));

        let short = tiles(200);
        assert_eq!(sample_tile_quota(&short, Subtype::LumA, &policy(), 3), short);
        assert_eq!(sample_tile_quota(&t, Subtype::Her2, &policy(), 3), t);
    }

    #[test]
    fn zero_quota_rejected() {
        assert!(QuotaPolicy::new(BTreeMap::from([(Subtype::LumA, Quota::Count(0))])).is_err());
    }

    #[test]
    fn ovr_balanced() {
        let by_class: BTreeMap<Subtype, Vec<usize>> = Subtype::ALL
            .into_iter()
            .map(|c| (c, (0..300).map(|i| c.index() * 1000 + i).collect()))
            .collect();
        let d = build_ovr_dataset(Subtype::LumA, &by_class, 5).unwrap();
        let pos = d.iter().filter(|(_, l)| *l == OvrLabel::Target).count();
        assert_eq!(pos, 300);
        for c in [Subtype::LumB, Subtype::Her2, Subtype::Basal] {
            let n = d
                .iter()
                .filter(|(t, l)| *l == OvrLabel::Rest && t / 1000 == c.index())
                .count();
            assert_eq!(n, 100);
        }
    }

    #[test]
    fn ovr_floor_counts() {
        let mut by_class = BTreeMap::new();
        by_class.insert(Subtype::LumA, (0..10).collect::<Vec<usize>>());
        by_class.insert(Subtype::LumB, (1000..1090).collect());
        by_class.insert(Subtype::Her2, (2000..2091).collect());
        by_class.insert(Subtype::Basal, (3000..3092).collect());
        let d = build_ovr_dataset(Subtype::LumA, &by_class, 5).unwrap();
        let per: Vec<usize> = (1..4)
            .map(|k| d.iter().filter(|(t, _)| t / 1000 == k).count())
            .collect();
        assert_eq!(per, vec![30, 30, 30]);
    }

    #[test]
    fn ovr_degenerate_and_empty_target() {
        let mut by_class = BTreeMap::new();
        by_class.insert(Subtype::Her2, (0..300).collect::<Vec<usize>>());
        let d = build_ovr_dataset(Subtype::Her2, &by_class, 1).unwrap();
        assert_eq!(d.len(), 300);
        assert!(build_ovr_dataset(Subtype::LumA, &by_class, 1).is_err());
    }
}
