//! Tile scoring through external scorer processes or a deterministic
//! synthetic scorer.
//!
//! # Wire protocol
//!
//! A scorer is a child process speaking UTF-8 lines over stdin/stdout. It is
//! started as `<command...> --classifier-id <id>` and must first print
//! `READY`. The gateway then writes one request per tile,
//!
//! ```text
//! {"tile_id": "w1_0_0", "path": "/tiles/w1_0_0.png"}
//! ```
//!
//! and closes stdin. The scorer answers each request exactly once, in any
//! order, with either
//!
//! ```text
//! {"tile_id": "w1_0_0", "target": 0.83, "rest": 0.17}
//! {"tile_id": "w1_0_0", "error": "cannot read tile"}
//! ```
//!
//! and prints `DONE` when its input is exhausted.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use log::warn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::csvio::{self, CsvWriter};
use crate::error::{Error, Result};
use crate::labels::{ClassifierId, Subtype};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScorePair {
    pub target: f64,
    pub rest: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub tile_id: String,
    pub classifier: ClassifierId,
    pub target: f64,
    pub rest: f64,
}

/// Validation applied to every score on ingest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScorePolicy {
    pub pair_sum_tolerance: f64,
    /// When false a violated pair sum only logs a warning.
    pub strict_pair_sum: bool,
}

impl Default for ScorePolicy {
    fn default() -> Self {
        ScorePolicy {
            pair_sum_tolerance: 1e-4,
            strict_pair_sum: true,
        }
    }
}

impl ScorePolicy {
    pub fn check(&self, tile_id: &str, pair: ScorePair) -> Result<()> {
        for v in [pair.target, pair.rest] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::ScoreRange {
                    tile_id: tile_id.to_string(),
                    value: v,
                });
            }
        }
        let sum = pair.target + pair.rest;
        if (sum - 1.0).abs() > self.pair_sum_tolerance {
            if self.strict_pair_sum {
                return Err(Error::Protocol(format!(
                    "scores of `{tile_id}` sum to {sum}, not 1"
                )));
            }
            warn!("scores of `{tile_id}` sum to {sum}");
        }
        Ok(())
    }
}

/// Scores keyed by `(tile_id, classifier)`, at most one per key.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreTable {
    records: BTreeMap<(String, ClassifierId), ScorePair>,
}

pub const SCORE_HEADER: [&str; 4] = ["tile_id", "classifier_id", "target", "rest"];

impl ScoreTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn insert(&mut self, record: ScoreRecord) -> Result<()> {
        let key = (record.tile_id, record.classifier);
        if self.records.contains_key(&key) {
            return Err(Error::Duplicate(format!("{}/{}", key.0, key.1)));
        }
        self.records.insert(
            key,
            ScorePair {
                target: record.target,
                rest: record.rest,
            },
        );
        Ok(())
    }

    pub fn get(&self, tile_id: &str, classifier: ClassifierId) -> Option<ScorePair> {
        // BTreeMap lookups need an owned key; tables are small enough
        self.records.get(&(tile_id.to_string(), classifier)).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = ScoreRecord> + '_ {
        self.records.iter().map(|((t, c), p)| ScoreRecord {
            tile_id: t.clone(),
            classifier: *c,
            target: p.target,
            rest: p.rest,
        })
    }

    /// Merges a table with disjoint keys; order of merging does not matter.
    pub fn merge(&mut self, other: ScoreTable) -> Result<()> {
        for (k, v) in other.records {
            if self.records.contains_key(&k) {
                return Err(Error::Duplicate(format!("{}/{}", k.0, k.1)));
            }
            self.records.insert(k, v);
        }
        Ok(())
    }

    /// Subset of records for the given tiles.
    pub fn restrict<'a>(&self, tiles: impl IntoIterator<Item = &'a str>) -> ScoreTable {
        let wanted: HashSet<&str> = tiles.into_iter().collect();
        ScoreTable {
            records: self
                .records
                .iter()
                .filter(|((t, _), _)| wanted.contains(t.as_str()))
                .map(|(k, v)| (k.clone(), *v))
                .collect(),
        }
    }

    pub fn tile_ids(&self) -> BTreeSet<&str> {
        self.records.keys().map(|(t, _)| t.as_str()).collect()
    }

    /// True when every tile has a record for every classifier.
    pub fn is_complete(&self, tiles: &[&str], classifiers: &[ClassifierId]) -> bool {
        tiles
            .iter()
            .all(|t| classifiers.iter().all(|c| self.get(t, *c).is_some()))
    }

    pub fn to_csv(&self) -> String {
        let mut w = CsvWriter::new(&SCORE_HEADER);
        for ((t, c), p) in &self.records {
            w.row([t.clone(), c.to_string(), p.target.to_string(), p.rest.to_string()]);
        }
        w.into_string()
    }
}

pub fn save_scores(table: &ScoreTable, path: &Path) -> Result<()> {
    csvio::write_file(path, table.to_csv().as_bytes())
}

pub fn load_scores(path: &Path) -> Result<ScoreTable> {
    load_scores_with(path, &ScorePolicy::default())
}

/// Loads a score file, validating every record. An empty file (or one with
/// only a header) yields an empty table.
pub fn load_scores_with(path: &Path, policy: &ScorePolicy) -> Result<ScoreTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.trim().is_empty() {
        return Ok(ScoreTable::new());
    }
    let (rows, _) = csvio::read_table(path, &SCORE_HEADER, &[])?;
    let mut table = ScoreTable::new();
    for row in rows {
        let f = &row.fields;
        let classifier: ClassifierId = f[1]
            .parse()
            .map_err(|_| Error::parse(path, row.line, format!("unknown classifier `{}`", f[1])))?;
        let pair = ScorePair {
            target: csvio::parse_f64(path, row.line, &f[2], "target")?,
            rest: csvio::parse_f64(path, row.line, &f[3], "rest")?,
        };
        policy
            .check(&f[0], pair)
            .map_err(|e| Error::parse(path, row.line, e.to_string()))?;
        table
            .insert(ScoreRecord {
                tile_id: f[0].clone(),
                classifier,
                target: pair.target,
                rest: pair.rest,
            })
            .map_err(|e| Error::parse(path, row.line, e.to_string()))?;
    }
    Ok(table)
}

/// Tiles whose tumor score reaches `threshold` (inclusive).
pub fn filter_tumor_tiles(table: &ScoreTable, tiles: &[String], threshold: f64) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    for t in tiles {
        let pair = table
            .get(t, ClassifierId::Tumor)
            .ok_or_else(|| Error::MissingInput(format!("tumor score for tile `{t}`")))?;
        if pair.target >= threshold {
            out.insert(t.clone());
        }
    }
    Ok(out)
}

/// A tile to be scored: its id and where its pixels live.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileRef {
    pub tile_id: String,
    pub path: PathBuf,
}

pub trait TileScorer: Sync {
    fn score(&self, classifier: ClassifierId, tiles: &[TileRef]) -> Result<ScoreTable>;
}

/// Ground truth of one tile as seen by the synthetic scorer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TileTruth {
    pub tumor: bool,
    pub subtype: Subtype,
}

impl TileTruth {
    fn is_target(&self, classifier: ClassifierId) -> bool {
        match classifier {
            ClassifierId::Tumor => self.tumor,
            ClassifierId::Subtype(s) => s == self.subtype,
        }
    }
}

/// Test double for the tile classifiers: with signal `s` the target score is
/// `s * [tile is target] + (1 - s) * u`, where `u` is a uniform draw keyed by
/// `(seed, classifier, tile_id)`. `s = 1` gives exact indicators, `s = 0`
/// pure noise.
#[derive(Debug, Clone)]
pub struct SyntheticScorer {
    pub truth: HashMap<String, TileTruth>,
    pub signal: f64,
    pub seed: u64,
}

impl SyntheticScorer {
    pub fn new(truth: HashMap<String, TileTruth>, signal: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&signal) {
            return Err(Error::Invalid("signal strength must lie in [0, 1]".into()));
        }
        Ok(SyntheticScorer { truth, signal, seed })
    }

    pub fn score_one(&self, tile_id: &str, classifier: ClassifierId) -> Option<ScorePair> {
        let truth = self.truth.get(tile_id)?;
        let ind = if truth.is_target(classifier) { 1.0 } else { 0.0 };
        let noise = keyed_unit(self.seed, classifier.as_str(), tile_id);
        let target = self.signal * ind + (1.0 - self.signal) * noise;
        Some(ScorePair {
            target,
            rest: 1.0 - target,
        })
    }
}

fn keyed_unit(seed: u64, classifier: &str, tile_id: &str) -> f64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(classifier.as_bytes());
    h.update([0]);
    h.update(tile_id.as_bytes());
    let d = h.finalize();
    rng::unit_from_bits(u64::from_le_bytes(d[..8].try_into().expect("8 bytes")))
}

impl TileScorer for SyntheticScorer {
    fn score(&self, classifier: ClassifierId, tiles: &[TileRef]) -> Result<ScoreTable> {
        let mut table = ScoreTable::new();
        let mut unscored = Vec::new();
        for t in tiles {
            match self.score_one(&t.tile_id, classifier) {
                Some(p) => table.insert(ScoreRecord {
                    tile_id: t.tile_id.clone(),
                    classifier,
                    target: p.target,
                    rest: p.rest,
                })?,
                None => unscored.push(t.tile_id.clone()),
            }
        }
        if !unscored.is_empty() {
            return Err(Error::Incomplete {
                classifier: classifier.to_string(),
                unscored,
            });
        }
        Ok(table)
    }
}

/// Drives external scorer processes over the line protocol.
#[derive(Debug, Clone)]
pub struct ProcessScorer {
    /// Program followed by its arguments.
    pub command: Vec<String>,
    /// Number of concurrent scorer processes, each on a disjoint batch.
    pub workers: usize,
    pub policy: ScorePolicy,
}

#[derive(Serialize)]
struct Request<'a> {
    tile_id: &'a str,
    path: &'a str,
}

enum Response {
    Scores(String, ScorePair),
    Failed(String, String),
}

fn parse_response(line: &str) -> Result<Response> {
    let v: serde_json::Value = serde_json::from_str(line)
        .map_err(|e| Error::Protocol(format!("malformed response `{line}`: {e}")))?;
    let obj = v
        .as_object()
        .ok_or_else(|| Error::Protocol(format!("response is not an object: `{line}`")))?;
    let tile_id = obj
        .get("tile_id")
        .and_then(|t| t.as_str())
        .ok_or_else(|| Error::Protocol(format!("response without tile_id: `{line}`")))?
        .to_string();
    if let Some(err) = obj.get("error") {
        let msg = err.as_str().map(str::to_string).unwrap_or_else(|| err.to_string());
        return Ok(Response::Failed(tile_id, msg));
    }
    let num = |k: &str| {
        obj.get(k)
            .and_then(|x| x.as_f64())
            .ok_or_else(|| Error::Protocol(format!("response without numeric `{k}`: `{line}`")))
    };
    Ok(Response::Scores(
        tile_id,
        ScorePair {
            target: num("target")?,
            rest: num("rest")?,
        },
    ))
}

impl ProcessScorer {
    pub fn new(command: Vec<String>, workers: usize, policy: ScorePolicy) -> Result<Self> {
        if command.is_empty() {
            return Err(Error::Invalid("empty scorer command".into()));
        }
        Ok(ProcessScorer {
            command,
            workers: workers.max(1),
            policy,
        })
    }

    /// Splits `cmd` with POSIX shell quoting rules.
    pub fn from_command_line(cmd: &str, workers: usize, policy: ScorePolicy) -> Result<Self> {
        let argv = shlex::split(cmd).ok_or_else(|| Error::Config(format!("cannot parse scorer command `{cmd}`")))?;
        Self::new(argv, workers, policy)
    }

    fn session(&self, classifier: ClassifierId, batch: &[TileRef]) -> Result<ScoreTable> {
        let mut child = Command::new(&self.command[0])
            .args(&self.command[1..])
            .arg("--classifier-id")
            .arg(classifier.as_str())
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::io(&self.command[0], e))?;
        let mut stdin = child.stdin.take().expect("piped stdin");
        let mut reader = BufReader::new(child.stdout.take().expect("piped stdout"));

        let mut line = String::new();
        let n = reader
            .read_line(&mut line)
            .map_err(|e| Error::Protocol(format!("reading READY: {e}")))?;
        if n == 0 || line.trim_end() != "READY" {
            let _ = child.kill();
            let _ = child.wait();
            return Err(Error::Protocol(format!(
                "expected READY, got `{}`",
                line.trim_end()
            )));
        }

        let pending: HashSet<&str> = batch.iter().map(|t| t.tile_id.as_str()).collect();
        let lines: Vec<String> = batch
            .iter()
            .map(|t| {
                let req = Request {
                    tile_id: &t.tile_id,
                    path: &t.path.to_string_lossy(),
                };
                serde_json::to_string(&req).expect("serializable")
            })
            .collect();
        // detached: a scorer that stops reading must not block the caller
        let writer = std::thread::spawn(move || {
            for json in lines {
                // a scorer may stop reading early; its responses decide the outcome
                if writeln!(stdin, "{json}").is_err() {
                    break;
                }
            }
        });
        let outcome = self.read_responses(classifier, &mut reader, &pending);
        if outcome.is_err() {
            let _ = child.kill();
        } else {
            let _ = writer.join();
        }
        let _ = child.wait();
        outcome
    }

    fn read_responses(
        &self,
        classifier: ClassifierId,
        reader: &mut impl BufRead,
        pending: &HashSet<&str>,
    ) -> Result<ScoreTable> {
        let mut table = ScoreTable::new();
        let mut answered: HashSet<String> = HashSet::new();
        let mut failed = Vec::new();
        let mut done = false;
        let mut line = String::new();
        loop {
            line.clear();
            let n = reader
                .read_line(&mut line)
                .map_err(|e| Error::Protocol(format!("reading response: {e}")))?;
            if n == 0 {
                break;
            }
            let l = line.trim_end();
            if l == "DONE" {
                done = true;
                break;
            }
            if l.is_empty() {
                continue;
            }
            let (tile_id, result) = match parse_response(l)? {
                Response::Scores(t, p) => (t, Ok(p)),
                Response::Failed(t, m) => (t, Err(m)),
            };
            if !pending.contains(tile_id.as_str()) {
                return Err(Error::Protocol(format!("response for unrequested tile `{tile_id}`")));
            }
            if !answered.insert(tile_id.clone()) {
                return Err(Error::Protocol(format!("second response for tile `{tile_id}`")));
            }
            match result {
                Ok(pair) => {
                    self.policy.check(&tile_id, pair)?;
                    table.insert(ScoreRecord {
                        tile_id,
                        classifier,
                        target: pair.target,
                        rest: pair.rest,
                    })?;
                }
                Err(msg) => {
                    warn!("scorer failed on `{tile_id}`: {msg}");
                    failed.push(tile_id);
                }
            }
        }
        let mut missing: Vec<String> = pending
            .iter()
            .filter(|t| !answered.contains(**t))
            .map(|t| t.to_string())
            .collect();
        if done && !missing.is_empty() {
            missing.sort();
            return Err(Error::Protocol(format!(
                "DONE before answering {} tiles (first `{}`)",
                missing.len(),
                missing[0]
            )));
        }
        failed.extend(missing);
        if !failed.is_empty() {
            failed.sort();
            return Err(Error::Incomplete {
                classifier: classifier.to_string(),
                unscored: failed,
            });
        }
        Ok(table)
    }
}

impl TileScorer for ProcessScorer {
    fn score(&self, classifier: ClassifierId, tiles: &[TileRef]) -> Result<ScoreTable> {
        if tiles.is_empty() {
            return Ok(ScoreTable::new());
        }
        let chunk = tiles.len().div_ceil(self.workers);
        let results: Vec<Result<ScoreTable>> = std::thread::scope(|s| {
            let handles: Vec<_> = tiles
                .chunks(chunk)
                .map(|batch| s.spawn(move || self.session(classifier, batch)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("scorer session thread panicked"))
                .collect()
        });
        let mut table = ScoreTable::new();
        let mut unscored = Vec::new();
        for r in results {
            match r {
                Ok(t) => table.merge(t)?,
                Err(Error::Incomplete { unscored: u, .. }) => unscored.extend(u),
                Err(e) => return Err(e),
            }
        }
        if !unscored.is_empty() {
            unscored.sort();
            return Err(Error::Incomplete {
                classifier: classifier.to_string(),
                unscored,
            });
        }
        Ok(table)
    }
}

/// Scores one classifier over a tile slice and checks totality.
pub fn score_tiles(scorer: &dyn TileScorer, tiles: &[TileRef], classifier: ClassifierId) -> Result<ScoreTable> {
    let table = scorer.score(classifier, tiles)?;
    if table.len() != tiles.len() {
        return Err(Error::Protocol(format!(
            "{} records for {} tiles",
            table.len(),
            tiles.len()
        )));
    }
    Ok(table)
}

/// Score of the built-in stub: a uniform value from
/// `SHA-256("<classifier_id>:<tile_id>")`, independent of pixels.
pub fn stub_score(classifier: ClassifierId, tile_id: &str) -> ScorePair {
    let mut h = Sha256::new();
    h.update(format!("{classifier}:{tile_id}").as_bytes());
    let d = h.finalize();
    let target = rng::unit_from_bits(u64::from_be_bytes(d[..8].try_into().expect("8 bytes")));
    ScorePair {
        target,
        rest: 1.0 - target,
    }
}

/// Serves the scorer protocol with [`stub_score`]. Tiles whose file is
/// missing receive an error response; the session continues.
pub fn serve_stub(classifier: ClassifierId, input: impl BufRead, mut output: impl Write) -> std::io::Result<()> {
    writeln!(output, "READY")?;
    output.flush()?;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = match serde_json::from_str::<TileRef>(&line) {
            Ok(req) if req.path.exists() => {
                let p = stub_score(classifier, &req.tile_id);
                serde_json::json!({"tile_id": req.tile_id, "target": p.target, "rest": p.rest})
            }
            Ok(req) => serde_json::json!({"tile_id": req.tile_id, "error": "tile file not found"}),
            Err(e) => serde_json::json!({"tile_id": "", "error": format!("bad request: {e}")}),
        };
        writeln!(output, "{resp}")?;
        output.flush()?;
    }
    writeln!(output, "DONE")?;
    output.flush()
}
