//! Precision-recall curves and decision-threshold selection.
//!
//! A tile is predicted positive when `score >= threshold`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::csvio::{self, CsvWriter};
use crate::error::{Error, Result};
use crate::labels::{ClassifierId, Subtype};

/// Offset of the sentinel thresholds from the extreme scores.
pub const SENTINEL_GAP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
}

/// Exact PR curve over ascending candidate thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub n_positive: usize,
    pub n_total: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Criterion {
    F1,
    FBeta(f64),
}

impl Criterion {
    pub fn name(&self) -> String {
        match self {
            Criterion::F1 => "f1".into(),
            Criterion::FBeta(b) => format!("f{b}"),
        }
    }

    /// Value from confusion counts; an empty denominator scores 0.
    pub fn value(&self, tp: usize, fp: usize, fn_: usize) -> f64 {
        let b2 = match self {
            Criterion::F1 => 1.0,
            Criterion::FBeta(b) => b * b,
        };
        let num = (1.0 + b2) * tp as f64;
        let den = num + b2 * fn_ as f64 + fp as f64;
        if den == 0.0 {
            0.0
        } else {
            num / den
        }
    }
}

impl std::str::FromStr for Criterion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "f1" {
            return Ok(Criterion::F1);
        }
        s.strip_prefix('f')
            .and_then(|b| b.parse::<f64>().ok())
            .filter(|b| *b > 0.0 && b.is_finite())
            .map(Criterion::FBeta)
            .ok_or_else(|| Error::Config(format!("unknown threshold criterion `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdChoice {
    pub classifier: ClassifierId,
    pub threshold: f64,
    pub criterion: String,
    pub criterion_value: f64,
}

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<usize> {
    if scores.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Invalid(format!("non-finite score {s}")));
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    if n_pos == 0 {
        return Err(Error::Degenerate("no positive labels".into()));
    }
    Ok(n_pos)
}

/// Distinct ascending values with their positive and negative counts.
fn grouped(scores: &[f64], labels: &[bool]) -> Vec<(f64, usize, usize)> {
    let mut pairs: Vec<(f64, bool)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, usize, usize)> = Vec::new();
    for (s, l) in pairs {
        match out.last_mut() {
            Some(g) if g.0 == s => {
                if l {
                    g.1 += 1
                } else {
                    g.2 += 1
                }
            }
            _ => out.push((s, l as usize, (!l) as usize)),
        }
    }
    out
}

/// Lowest candidate: just below the minimum score, floored at 0.
pub fn low_sentinel(min_score: f64) -> f64 {
    let t = min_score - SENTINEL_GAP;
    if t < 0.0 && min_score >= 0.0 {
        0.0
    } else {
        t
    }
}

pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<PrCurve> {
    let n_pos = check_inputs(scores, labels)?;
    let groups = grouped(scores, labels);
    let m = groups.len();
    // suffix[j]: (tp, fp) predicted positive when threshold falls in (v_{j-1}, v_j]
    let mut suffix = vec![(0usize, 0usize); m + 1];
    for j in (0..m).rev() {
        suffix[j] = (suffix[j + 1].0 + groups[j].1, suffix[j + 1].1 + groups[j].2);
    }
    let mut points = Vec::with_capacity(m + 1);
    for (j, &(tp, fp)) in suffix.iter().enumerate() {
        let threshold = if j == 0 {
            low_sentinel(groups[0].0)
        } else if j == m {
            groups[m - 1].0 + SENTINEL_GAP
        } else {
            0.5 * (groups[j - 1].0 + groups[j].0)
        };
        let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
        points.push(PrPoint {
            threshold,
            precision,
            recall: tp as f64 / n_pos as f64,
            tp,
            fp,
        });
    }
    Ok(PrCurve {
        points,
        n_positive: n_pos,
        n_total: scores.len(),
    })
}

/// Candidate threshold maximising `criterion`; ties go to the smallest
/// threshold.
pub fn optimal_threshold(
    classifier: ClassifierId,
    scores: &[f64],
    labels: &[bool],
    criterion: Criterion,
) -> Result<ThresholdChoice> {
    let curve = pr_curve(scores, labels)?;
    let mut best: Option<(f64, f64)> = None;
    for p in &curve.points {
        let v = criterion.value(p.tp, p.fp, curve.n_positive - p.tp);
        if best.is_none_or(|(_, bv)| v > bv) {
            best = Some((p.threshold, v));
        }
    }
    let (threshold, value) = best.expect("curve has at least two points");
    Ok(ThresholdChoice {
        classifier,
        threshold,
        criterion: criterion.name(),
        criterion_value: value,
    })
}

/// Step-wise average precision over distinct scores in descending order.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let n_pos = check_inputs(scores, labels)?;
    let groups = grouped(scores, labels);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for &(_, pos, neg) in groups.iter().rev() {
        tp += pos;
        fp += neg;
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Published per-subtype decision thresholds, used when thresholds are not
/// recomputed from validation scores.
pub const PUBLISHED_THRESHOLDS: [(Subtype, f64); 4] = [
    (Subtype::LumA, 0.434),
    (Subtype::LumB, 0.415),
    (Subtype::Her2, 0.481),
    (Subtype::Basal, 0.424),
];

/// One threshold per subtype classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdSet {
    choices: BTreeMap<Subtype, ThresholdChoice>,
}

pub const THRESHOLD_HEADER: [&str; 4] = ["classifier_id", "threshold", "criterion", "criterion_value"];

impl ThresholdSet {
    pub fn new(choices: impl IntoIterator<Item = ThresholdChoice>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for c in choices {
            let s = c
                .classifier
                .subtype()
                .ok_or_else(|| Error::Invalid("tumor classifier in subtype threshold set".into()))?;
            if !(0.0..=1.0).contains(&c.threshold) {
                return Err(Error::Invalid(format!(
                    "threshold {} of {} outside [0, 1]",
                    c.threshold, c.classifier
                )));
            }
            if map.insert(s, c).is_some() {
                return Err(Error::Duplicate(format!("threshold for {s}")));
            }
        }
        if map.len() != Subtype::ALL.len() {
            let missing: Vec<&str> = Subtype::ALL
                .iter()
                .filter(|s| !map.contains_key(s))
                .map(|s| s.as_str())
                .collect();
            return Err(Error::MissingInput(format!("thresholds for {}", missing.join(", "))));
        }
        Ok(ThresholdSet { choices: map })
    }

    /// Fixed thresholds with no criterion value.
    pub fn fixed(values: [(Subtype, f64); 4]) -> Result<Self> {
        Self::new(values.into_iter().map(|(s, t)| ThresholdChoice {
            classifier: ClassifierId::Subtype(s),
            threshold: t,
            criterion: "fixed".into(),
            criterion_value: f64::NAN,
        }))
    }

    pub fn published() -> Self {
        Self::fixed(PUBLISHED_THRESHOLDS).expect("published thresholds are valid")
    }

    pub fn threshold(&self, s: Subtype) -> f64 {
        self.choices[&s].threshold
    }

    pub fn values(&self) -> [f64; 4] {
        Subtype::ALL.map(|s| self.threshold(s))
    }

    pub fn choices(&self) -> impl Iterator<Item = &ThresholdChoice> {
        self.choices.values()
    }

    pub fn to_csv(&self) -> String {
        let mut w = CsvWriter::new(&THRESHOLD_HEADER);
        for c in self.choices.values() {
            w.row([
                c.classifier.to_string(),
                c.threshold.to_string(),
                c.criterion.clone(),
                c.criterion_value.to_string(),
            ]);
        }
        w.into_string()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        csvio::write_file(path, self.to_csv().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (rows, _) = csvio::read_table(path, &THRESHOLD_HEADER, &[])?;
        let mut choices = Vec::new();
        for row in rows {
            let f = &row.fields;
            let classifier: ClassifierId = f[0]
                .parse()
                .map_err(|_| Error::parse(path, row.line, format!("unknown classifier `{}`", f[0])))?;
            choices.push(ThresholdChoice {
                classifier,
                threshold: csvio::parse_f64(path, row.line, &f[1], "threshold")?,
                criterion: f[2].clone(),
                criterion_value: csvio::parse_f64(path, row.line, &f[3], "criterion_value")?,
            });
        }
        Self::new(choices)
    }
}
