//! Ranking metrics and report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::LabelSet;
use crate::linear::ScoredStudents;

pub const ROWS_FILE: &str = "rows.csv";
pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const SUMMARY_FILE: &str = "summary.txt";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("AUC undefined: labels contain a single class")]
    SingleClass,
    #[error("empty list")]
    EmptyList,
    #[error("{0} scores but {1} labels")]
    LengthMismatch(usize, usize),
    #[error("no label for student `{0}`")]
    MissingLabel(String),
    #[error("non-finite score")]
    NonFiniteScore,
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

fn io_err(path: &Path, e: impl ToString) -> EvalError {
    EvalError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Mann-Whitney AUC. Ties between a positive and a negative count one half.
///
/// Students are sorted once by score; each tie group contributes
/// `pos * (2 * negatives_below + neg_in_group)` to twice the U statistic, so
/// the count is an exact integer.
pub fn auc_from_slices(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(EvalError::NonFiniteScore);
    }
    let n_pos = labels.iter().filter(|&&l| l).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut twice_u: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        twice_u += pos * (2 * neg_below + neg);
        neg_below += neg;
        i = j;
    }
    Ok(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}

fn aligned(scores: &ScoredStudents, labels: &LabelSet) -> Result<Vec<bool>, EvalError> {
    scores
        .student_ids
        .iter()
        .map(|id| {
            labels
                .get(id)
                .map(|l| l == 1)
                .ok_or_else(|| EvalError::MissingLabel(id.clone()))
        })
        .collect()
}

/// AUC of `scores` against `labels`, matched by student id.
pub fn auc(scores: &ScoredStudents, labels: &LabelSet) -> Result<f64, EvalError> {
    let y = aligned(scores, labels)?;
    auc_from_slices(&scores.scores, &y)
}

/// Standard error of the mean with the `n - 1` sample deviation; 0 for one value.
pub fn sem(values: &[f64]) -> Result<f64, EvalError> {
    let n = values.len();
    if n == 0 {
        return Err(EvalError::EmptyList);
    }
    // exact zero for constant input, which the mean's rounding would miss
    if values.iter().all(|&v| v == values[0]) {
        return Ok(0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    Ok((ss / (n - 1) as f64).sqrt() / (n as f64).sqrt())
}

/// Fraction of students whose thresholded score (`score >= threshold`)
/// equals their label.
pub fn raw_accuracy(
    scores: &ScoredStudents,
    labels: &LabelSet,
    threshold: f64,
) -> Result<f64, EvalError> {
    let y = aligned(scores, labels)?;
    Ok(accuracy_from_slices(&scores.scores, &y, threshold))
}

pub fn accuracy_from_slices(scores: &[f64], labels: &[bool], threshold: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s >= threshold) == l)
        .count();
    hits as f64 / scores.len() as f64
}

/// Mid-ranks (1-based) with ties sharing their average rank.
pub fn mid_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        i = j;
    }
    ranks
}

/// Spearman rank correlation; `None` when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (mid_ranks(x), mid_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub paradigm: String,
    pub course_id: String,
    pub week: i32,
    pub auc: f64,
    /// Accuracy at a 0.5 threshold; absent when read back from a rows file.
    pub accuracy: Option<f64>,
    pub n_students: usize,
    pub n_positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub paradigm: String,
    pub week: i32,
    pub mean_auc: f64,
    pub sem: f64,
    pub n_courses: usize,
}

/// A (paradigm, course, week) cell that produced no AUC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedCell {
    pub paradigm: String,
    pub course_id: String,
    pub week: i32,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub aggregates: Vec<Aggregate>,
    pub skipped: Vec<SkippedCell>,
}

impl EvalReport {
    /// Aggregates rows per (paradigm, week). Paradigms keep their order of
    /// first appearance; weeks ascend.
    pub fn from_rows(rows: Vec<EvalRow>, skipped: Vec<SkippedCell>) -> Self {
        let mut paradigms: Vec<&str> = Vec::new();
        let mut groups: BTreeMap<(usize, i32), Vec<f64>> = BTreeMap::new();
        for r in &rows {
            let p = match paradigms.iter().position(|&p| p == r.paradigm) {
                Some(p) => p,
                None => {
                    paradigms.push(&r.paradigm);
                    paradigms.len() - 1
                }
            };
            groups.entry((p, r.week)).or_default().push(r.auc);
        }
        let aggregates = groups
            .into_iter()
            .map(|((p, week), aucs)| Aggregate {
                paradigm: paradigms[p].to_string(),
                week,
                mean_auc: aucs.iter().sum::<f64>() / aucs.len() as f64,
                sem: sem(&aucs).expect("groups are non-empty"),
                n_courses: aucs.len(),
            })
            .collect();
        EvalReport {
            rows,
            aggregates,
            skipped,
        }
    }

    /// Mean of the weekly mean AUCs of one paradigm.
    pub fn mean_over_weeks(&self, paradigm: &str) -> Option<f64> {
        let means: Vec<f64> = self
            .aggregates
            .iter()
            .filter(|a| a.paradigm == paradigm)
            .map(|a| a.mean_auc)
            .collect();
        (!means.is_empty()).then(|| means.iter().sum::<f64>() / means.len() as f64)
    }

    pub fn rows_csv(&self) -> String {
        let mut out = String::from("paradigm,course_id,week,auc,n_students,n_positives\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.paradigm, r.course_id, r.week, r.auc, r.n_students, r.n_positives
            );
        }
        out
    }

    pub fn aggregate_csv(&self) -> String {
        let mut out = String::from("paradigm,week,mean_auc,sem,n_courses\n");
        for a in &self.aggregates {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                a.paradigm, a.week, a.mean_auc, a.sem, a.n_courses
            );
        }
        out
    }

    /// Paradigm x week grid of `mean±sem`.
    pub fn summary_table(&self) -> String {
        let mut weeks: Vec<i32> = self.aggregates.iter().map(|a| a.week).collect();
        weeks.sort_unstable();
        weeks.dedup();
        let mut paradigms: Vec<&str> = Vec::new();
        for a in &self.aggregates {
            if !paradigms.contains(&a.paradigm.as_str()) {
                paradigms.push(&a.paradigm);
            }
        }
        let label_width = paradigms.iter().map(|p| p.len()).max().unwrap_or(0).max(8);
        let mut out = String::new();
        let _ = write!(out, "{:<label_width$}", "paradigm");
        for w in &weeks {
            let _ = write!(out, " {:>15}", format!("week {w}"));
        }
        out.push('\n');
        for p in &paradigms {
            let _ = write!(out, "{p:<label_width$}");
            for w in &weeks {
                let cell = self
                    .aggregates
                    .iter()
                    .find(|a| a.paradigm == *p && a.week == *w)
                    .map(|a| format!("{:.4}±{:.4}", a.mean_auc, a.sem))
                    .unwrap_or_else(|| "-".into());
                let _ = write!(out, " {cell:>15}");
            }
            out.push('\n');
        }
        if !self.skipped.is_empty() {
            let _ = writeln!(out, "\nskipped cells: {}", self.skipped.len());
            for s in &self.skipped {
                let _ = writeln!(out, "  {} {} week {}: {}", s.paradigm, s.course_id, s.week, s.reason);
            }
        }
        out
    }
}

/// Writes `rows.csv`, `aggregate.csv` and `summary.txt` into `dir`.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<(), EvalError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    for (name, text) in [
        (ROWS_FILE, report.rows_csv()),
        (AGGREGATE_FILE, report.aggregate_csv()),
        (SUMMARY_FILE, report.summary_table()),
    ] {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    }
    Ok(())
}

/// Reads a rows file written by [`emit_report`].
pub fn read_rows_csv(path: &Path) -> Result<Vec<EvalRow>, EvalError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let r = record.map_err(|e| io_err(path, e))?;
        if r.len() != 6 {
            return Err(io_err(path, format!("expected 6 fields, found {}", r.len())));
        }
        let parse_err = |field: &str| io_err(path, format!("bad {field} `{}`", r.as_slice()));
        rows.push(EvalRow {
            paradigm: r[0].to_string(),
            course_id: r[1].to_string(),
            week: r[2].parse().map_err(|_| parse_err("week"))?,
            auc: r[3].parse().map_err(|_| parse_err("auc"))?,
            accuracy: None,
            n_students: r[4].parse().map_err(|_| parse_err("n_students"))?,
            n_positives: r[5].parse().map_err(|_| parse_err("n_positives"))?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Quadratic pair count.
    fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut credit = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        credit += 1.0;
                    } else if scores[i] == scores[j] {
                        credit += 0.5;
                    }
                }
            }
        }
        credit / pairs
    }

    #[test]
    fn auc_reference_cases() {
        let y = [true, false, true, false];
        assert_eq!(auc_from_slices(&[0.9, 0.8, 0.7, 0.6], &y).unwrap(), 0.75);
        assert_eq!(brute_auc(&[0.9, 0.8, 0.7, 0.6], &y), 0.75);
        assert_eq!(auc_from_slices(&[0.9, 0.1, 0.8, 0.2], &y).unwrap(), 1.0);
        assert_eq!(auc_from_slices(&[0.3; 4], &y).unwrap(), 0.5);
        assert_eq!(auc_from_slices(&[0.1, 0.9, 0.2, 0.8], &y).unwrap(), 0.0);
        assert!(matches!(
            auc_from_slices(&[0.1, 0.2], &[true, true]),
            Err(EvalError::SingleClass)
        ));
        assert!(auc_from_slices(&[f64::NAN, 0.2], &[true, false]).is_err());
    }

    #[test]
    fn sem_values() {
        assert_eq!(sem(&[0.5]).unwrap(), 0.0);
        assert!((sem(&[0.0, 1.0]).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(sem(&[0.7, 0.7, 0.7]).unwrap(), 0.0);
        assert!(matches!(sem(&[]), Err(EvalError::EmptyList)));
    }

    #[test]
    fn accuracy_values() {
        let labels: Vec<bool> = (0..10).map(|i| i == 0).collect();
        assert_eq!(accuracy_from_slices(&[0.0; 10], &labels, 0.5), 0.9);
        assert_eq!(accuracy_from_slices(&[0.3; 10], &labels, 0.0), 0.1);
        let perfect: Vec<f64> = labels.iter().map(|&l| if l { 0.9 } else { 0.1 }).collect();
        assert_eq!(accuracy_from_slices(&perfect, &labels, 0.5), 1.0);
    }

    #[test]
    fn spearman_basics() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0], &[5.0, 5.0]), None);
        assert_eq!(mid_ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
    }

    fn row(p: &str, c: &str, week: i32, auc: f64) -> EvalRow {
        EvalRow {
            paradigm: p.into(),
            course_id: c.into(),
            week,
            auc,
            accuracy: Some(0.5),
            n_students: 10,
            n_positives: 3,
        }
    }

    #[test]
    fn aggregation_groups_by_paradigm_and_week() {
        let report = EvalReport::from_rows(
            vec![
                row("post-hoc", "A", -1, 0.8),
                row("post-hoc", "A", 0, 0.9),
                row("post-hoc", "B", 0, 0.7),
                row("baseline2", "A", 0, 0.6),
            ],
            vec![],
        );
        let a = &report.aggregates;
        assert_eq!(a.len(), 3);
        assert_eq!((a[0].paradigm.as_str(), a[0].week, a[0].n_courses), ("post-hoc", -1, 1));
        assert_eq!((a[1].week, a[1].n_courses), (0, 2));
        assert!((a[1].mean_auc - 0.8).abs() < 1e-15);
        assert_eq!(a[2].paradigm, "baseline2");
        assert_eq!(report.mean_over_weeks("baseline2"), Some(0.6));
    }

    #[test]
    fn empty_report_has_header_only_files() {
        let dir = tempfile::tempdir().unwrap();
        emit_report(&EvalReport::default(), dir.path()).unwrap();
        let rows = fs::read_to_string(dir.path().join(ROWS_FILE)).unwrap();
        assert_eq!(rows, "paradigm,course_id,week,auc,n_students,n_positives\n");
        let agg = fs::read_to_string(dir.path().join(AGGREGATE_FILE)).unwrap();
        assert_eq!(agg, "paradigm,week,mean_auc,sem,n_courses\n");
    }

    #[test]
    fn emission_is_byte_stable_and_consistent() {
        let report = EvalReport::from_rows(
            vec![
                row("in-situ", "A", -2, 0.61),
                row("in-situ", "B", -2, 0.733),
                row("in-situ", "C", -2, 0.5901),
                row("in-situ", "A", -1, 0.7),
            ],
            vec![SkippedCell {
                paradigm: "in-situ".into(),
                course_id: "D".into(),
                week: -1,
                reason: "single class".into(),
            }],
        );
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        emit_report(&report, d1.path()).unwrap();
        emit_report(&report, d2.path()).unwrap();
        for f in [ROWS_FILE, AGGREGATE_FILE, SUMMARY_FILE] {
            assert_eq!(
                fs::read(d1.path().join(f)).unwrap(),
                fs::read(d2.path().join(f)).unwrap()
            );
        }
        let back = read_rows_csv(&d1.path().join(ROWS_FILE)).unwrap();
        let again = EvalReport::from_rows(back, vec![]);
        for (a, b) in again.aggregates.iter().zip(&report.aggregates) {
            assert!((a.mean_auc - b.mean_auc).abs() <= 1e-12);
            assert_eq!(a.sem, b.sem);
        }
        let summary = fs::read_to_string(d1.path().join(SUMMARY_FILE)).unwrap();
        assert!(summary.contains("week -2"));
        assert!(summary.contains("skipped cells: 1"));
    }
}
