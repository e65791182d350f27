//! Confusion matrices, per-class and macro metrics, and percentile
//! bootstrap confidence intervals over slides.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;

use crate::csvio::{self, CsvWriter};
use crate::error::{Error, Result};
use crate::rng;
use crate::stats;
use crate::threshold;

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn k(&self) -> usize {
        self.classes.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn from_counts(classes: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = classes.len();
        if counts.len() != k || counts.iter().any(|r| r.len() != k) {
            return Err(Error::Invalid(format!("confusion matrix must be {k}x{k}")));
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    /// Fraction of all predictions on the diagonal.
    pub fn overall_accuracy(&self) -> f64 {
        let diag: u64 = (0..self.k()).map(|i| self.counts[i][i]).sum();
        ratio(diag, self.total())
    }

    pub fn to_csv(&self) -> String {
        let mut header = vec!["true\\predicted".to_string()];
        header.extend(self.classes.iter().cloned());
        let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
        let mut w = CsvWriter::new(&header_refs);
        for (i, row) in self.counts.iter().enumerate() {
            let mut f = vec![self.classes[i].clone()];
            f.extend(row.iter().map(u64::to_string));
            w.row(f);
        }
        w.into_string()
    }
}

/// Tallies class-index pairs.
pub fn confusion_matrix(predictions: &[usize], truths: &[usize], classes: &[&str]) -> Result<ConfusionMatrix> {
    if predictions.len() != truths.len() {
        return Err(Error::Invalid(format!(
            "{} predictions but {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    let k = classes.len();
    let mut counts = vec![vec![0u64; k]; k];
    for (&p, &t) in predictions.iter().zip(truths) {
        if p >= k || t >= k {
            return Err(Error::UnknownLabel(format!("class index {}", p.max(t))));
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix {
        classes: classes.iter().map(|s| s.to_string()).collect(),
        counts,
    })
}

/// Tallies labels given a declared class order.
pub fn confusion_matrix_labels<T: PartialEq + std::fmt::Display>(
    predictions: &[T],
    truths: &[T],
    order: &[T],
) -> Result<ConfusionMatrix> {
    let index = |v: &T| {
        order
            .iter()
            .position(|o| o == v)
            .ok_or_else(|| Error::UnknownLabel(v.to_string()))
    };
    let p = predictions.iter().map(index).collect::<Result<Vec<_>>>()?;
    let t = truths.iter().map(index).collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = order.iter().map(|o| o.to_string()).collect();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    confusion_matrix(&p, &t, &refs)
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Harmonic mean of precision and sensitivity; 0 when both are 0.
pub fn f1_score(precision: f64, sensitivity: f64) -> f64 {
    if precision + sensitivity > 0.0 {
        2.0 * precision * sensitivity / (precision + sensitivity)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
}

impl ClassMetrics {
    pub fn as_array(&self) -> [f64; 4] {
        [self.f1, self.precision, self.sensitivity, self.specificity]
    }
}

/// One-vs-rest reduction of class `c`; empty denominators give 0.
pub fn class_metrics(cm: &ConfusionMatrix, c: usize) -> ClassMetrics {
    let k = cm.k();
    let tp = cm.counts[c][c];
    let row: u64 = cm.counts[c].iter().sum();
    let col: u64 = (0..k).map(|i| cm.counts[i][c]).sum();
    let fp = col - tp;
    let fn_ = row - tp;
    let tn = cm.total() - tp - fp - fn_;
    let precision = ratio(tp, tp + fp);
    let sensitivity = ratio(tp, tp + fn_);
    ClassMetrics {
        precision,
        sensitivity,
        specificity: ratio(tn, tn + fp),
        f1: f1_score(precision, sensitivity),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MacroMetrics {
    pub f1: f64,
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    /// Mean per-class recall.
    pub accuracy: f64,
}

pub fn macro_from_rows(rows: &[ClassMetrics]) -> MacroMetrics {
    let n = rows.len().max(1) as f64;
    let mean = |f: fn(&ClassMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let sensitivity = mean(|r| r.sensitivity);
    MacroMetrics {
        f1: mean(|r| r.f1),
        precision: mean(|r| r.precision),
        sensitivity,
        specificity: mean(|r| r.specificity),
        accuracy: sensitivity,
    }
}

pub fn macro_metrics(cm: &ConfusionMatrix) -> MacroMetrics {
    let rows: Vec<ClassMetrics> = (0..cm.k()).map(|c| class_metrics(cm, c)).collect();
    macro_from_rows(&rows)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapCi {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub n_resamples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapParams {
    pub n_resamples: usize,
    pub level: f64,
    pub seed: u64,
    /// Redraws allowed per resample when the metric is undefined on it.
    pub max_retries: usize,
}

impl Default for BootstrapParams {
    fn default() -> Self {
        BootstrapParams {
            n_resamples: 1000,
            level: 0.95,
            seed: 0,
            max_retries: 100,
        }
    }
}

impl BootstrapParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_resamples == 0 {
            return Err(Error::Config("bootstrap needs at least one resample".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Config(format!("confidence level {} not in (0, 1)", self.level)));
        }
        Ok(())
    }
}

/// Percentile bootstrap for several metrics at once. `metric` returns
/// `None` when undefined on a sample; such resamples are redrawn. Each
/// resample `i` draws from its own stream so the result does not depend on
/// scheduling. Bounds are widened to contain the full-data estimate.
pub fn bootstrap_many<R, F>(records: &[R], metric: F, params: &BootstrapParams) -> Result<Vec<BootstrapCi>>
where
    R: Sync,
    F: Fn(&[&R]) -> Option<Vec<f64>> + Sync,
{
    params.validate()?;
    if records.len() < 2 {
        return Err(Error::Degenerate("bootstrap needs at least two records".into()));
    }
    let all: Vec<&R> = records.iter().collect();
    let point = metric(&all).ok_or_else(|| Error::Degenerate("metric undefined on the full sample".into()))?;
    let n = records.len();
    let draws: Vec<Vec<f64>> = (0..params.n_resamples)
        .into_par_iter()
        .map(|i| {
            let base = rng::stream_seed(params.seed, i as u64);
            for attempt in 0..=params.max_retries {
                let mut r = rng::seeded(rng::stream_seed(base, attempt as u64));
                let sample: Vec<&R> = (0..n).map(|_| &records[r.random_range(0..n)]).collect();
                if let Some(v) = metric(&sample) {
                    if v.len() != point.len() {
                        return Err(Error::Invalid("metric arity changed between samples".into()));
                    }
                    return Ok(v);
                }
            }
            Err(Error::Degenerate(format!(
                "metric undefined on resample {i} after {} redraws",
                params.max_retries
            )))
        })
        .collect::<Result<_>>()?;
    let lo_q = (1.0 - params.level) / 2.0 * 100.0;
    let hi_q = 100.0 - lo_q;
    Ok((0..point.len())
        .map(|j| {
            let mut col: Vec<f64> = draws.iter().map(|d| d[j]).collect();
            col.sort_by(f64::total_cmp);
            BootstrapCi {
                point: point[j],
                lower: stats::percentile_sorted(&col, lo_q).min(point[j]),
                upper: stats::percentile_sorted(&col, hi_q).max(point[j]),
                level: params.level,
                n_resamples: params.n_resamples,
                seed: params.seed,
            }
        })
        .collect())
}

pub fn bootstrap_ci<R, F>(records: &[R], metric: F, params: &BootstrapParams) -> Result<BootstrapCi>
where
    R: Sync,
    F: Fn(&[&R]) -> Option<f64> + Sync,
{
    bootstrap_many(records, |s| metric(s).map(|v| vec![v]), params).map(|mut v| v.remove(0))
}

/// One evaluated slide.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub wsi_id: String,
    pub truth: usize,
    pub predicted: usize,
    /// Per-class probabilities, used for AUPRC.
    pub probabilities: Vec<f64>,
}

pub const METRIC_NAMES: [&str; 5] = ["f1", "precision", "sensitivity", "specificity", "auprc"];

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub name: String,
    /// Indexed like [`METRIC_NAMES`].
    pub metrics: Vec<BootstrapCi>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub confusion: ConfusionMatrix,
    pub per_class: Vec<ReportRow>,
    pub macro_row: ReportRow,
    pub macro_accuracy: BootstrapCi,
    pub overall_accuracy: f64,
}

/// Per-class metric vector for one sample: for each class the four
/// confusion-derived metrics and AUPRC, then the five macro means and macro
/// accuracy. Undefined when some class has no true member.
fn sample_metrics(sample: &[&EvalRecord], classes: &[&str]) -> Option<Vec<f64>> {
    let k = classes.len();
    let mut present = vec![false; k];
    for r in sample {
        present[r.truth] = true;
    }
    if present.iter().any(|p| !p) {
        return None;
    }
    let preds: Vec<usize> = sample.iter().map(|r| r.predicted).collect();
    let truths: Vec<usize> = sample.iter().map(|r| r.truth).collect();
    let cm = confusion_matrix(&preds, &truths, classes).ok()?;
    let rows: Vec<ClassMetrics> = (0..k).map(|c| class_metrics(&cm, c)).collect();
    let mut out = Vec::with_capacity(5 * k + 6);
    let mut aps = Vec::with_capacity(k);
    for (c, row) in rows.iter().enumerate() {
        let scores: Vec<f64> = sample.iter().map(|r| r.probabilities[c]).collect();
        let labels: Vec<bool> = sample.iter().map(|r| r.truth == c).collect();
        let ap = threshold::average_precision(&scores, &labels).ok()?;
        aps.push(ap);
        out.extend(row.as_array());
        out.push(ap);
    }
    let m = macro_from_rows(&rows);
    out.extend([m.f1, m.precision, m.sensitivity, m.specificity]);
    out.push(aps.iter().sum::<f64>() / k as f64);
    out.push(m.accuracy);
    Some(out)
}

pub fn evaluate(records: &[EvalRecord], classes: &[&str], params: &BootstrapParams) -> Result<EvaluationReport> {
    let k = classes.len();
    for r in records {
        if r.truth >= k || r.predicted >= k || r.probabilities.len() != k {
            return Err(Error::Invalid(format!("record `{}` does not match {k} classes", r.wsi_id)));
        }
    }
    let preds: Vec<usize> = records.iter().map(|r| r.predicted).collect();
    let truths: Vec<usize> = records.iter().map(|r| r.truth).collect();
    let confusion = confusion_matrix(&preds, &truths, classes)?;
    let cis = bootstrap_many(records, |s| sample_metrics(s, classes), params)?;
    let per_class = (0..k)
        .map(|c| ReportRow {
            name: classes[c].to_string(),
            metrics: cis[5 * c..5 * c + 5].to_vec(),
        })
        .collect();
    Ok(EvaluationReport {
        overall_accuracy: confusion.overall_accuracy(),
        confusion,
        per_class,
        macro_row: ReportRow {
            name: "macro".into(),
            metrics: cis[5 * k..5 * k + 5].to_vec(),
        },
        macro_accuracy: cis[5 * k + 5],
    })
}

impl EvaluationReport {
    pub fn to_csv(&self) -> String {
        let mut header = vec!["class".to_string()];
        for m in METRIC_NAMES {
            header.extend([m.to_string(), format!("{m}_lower"), format!("{m}_upper")]);
        }
        let refs: Vec<&str> = header.iter().map(String::as_str).collect();
        let mut w = CsvWriter::new(&refs);
        for row in self.per_class.iter().chain(std::iter::once(&self.macro_row)) {
            let mut f = vec![row.name.clone()];
            for ci in &row.metrics {
                f.extend([ci.point.to_string(), ci.lower.to_string(), ci.upper.to_string()]);
            }
            w.row(f);
        }
        w.into_string()
    }

    pub fn to_text(&self) -> String {
        let cell = |ci: &BootstrapCi| format!("{:.3} ({:.3}-{:.3})", ci.point, ci.lower, ci.upper);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<14}{:<22}{:<22}{:<22}{:<22}{:<22}",
            "Class", "F1 score", "Precision", "Sensitivity", "Specificity", "AUPRC"
        );
        for row in self.per_class.iter().chain(std::iter::once(&self.macro_row)) {
            let name = if row.name == "macro" { "Macro-average" } else { row.name.as_str() };
            let _ = write!(s, "{name:<14}");
            for ci in &row.metrics {
                let _ = write!(s, "{:<22}", cell(ci));
            }
            s.truncate(s.trim_end().len());
            s.push('\n');
        }
        let ci = &self.macro_accuracy;
        let _ = writeln!(s, "\nMacro accuracy (mean per-class recall): {}", cell(ci));
        let _ = writeln!(s, "Overall accuracy: {:.3}", self.overall_accuracy);
        let _ = writeln!(
            s,
            "Intervals: {:.0}% percentile bootstrap, {} resamples, seed {}",
            ci.level * 100.0,
            ci.n_resamples,
            ci.seed
        );
        let _ = writeln!(s, "\nConfusion matrix (rows true, columns predicted)");
        let _ = write!(s, "{:<8}", "");
        for c in &self.confusion.classes {
            let _ = write!(s, "{c:>8}");
        }
        s.push('\n');
        for (i, row) in self.confusion.counts.iter().enumerate() {
            let _ = write!(s, "{:<8}", self.confusion.classes[i]);
            for v in row {
                let _ = write!(s, "{v:>8}");
            }
            s.push('\n');
        }
        s
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        csvio::write_file(&dir.join("report.csv"), self.to_csv().as_bytes())?;
        csvio::write_file(&dir.join("report.txt"), self.to_text().as_bytes())?;
        csvio::write_file(&dir.join("confusion.csv"), self.confusion.to_csv().as_bytes())
    }
}
