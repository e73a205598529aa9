//! Submission grading against a private answer file.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::{GraderSpec, Metric, TaskSpec};

const MAX_SUBMISSION_BYTES: u64 = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvalidReason {
    MissingSubmission,
    SchemaMismatch,
    IdMismatch,
    Nonfinite,
}

impl InvalidReason {
    pub fn as_str(self) -> &'static str {
        match self {
            InvalidReason::MissingSubmission => "missing_submission",
            InvalidReason::SchemaMismatch => "schema_mismatch",
            InvalidReason::IdMismatch => "id_mismatch",
            InvalidReason::Nonfinite => "nonfinite",
        }
    }
}

impl fmt::Display for InvalidReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradeResult {
    Valid(f64),
    Invalid(InvalidReason),
}

impl GradeResult {
    pub fn score(&self) -> Option<f64> {
        match self {
            GradeResult::Valid(s) => Some(*s),
            GradeResult::Invalid(_) => None,
        }
    }
}

/// Area under the ROC curve via the rank-sum statistic, ties averaged.
pub fn auc(labels: &[f64], scores: &[f64]) -> Option<f64> {
    let n = labels.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = avg;
        }
        i = j + 1;
    }
    let pos = labels.iter().filter(|&&y| y > 0.5).count();
    let neg = n - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let rank_sum: f64 = (0..n).filter(|&k| labels[k] > 0.5).map(|k| ranks[k]).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos as f64 * neg as f64))
}

pub fn rmse(truth: &[f64], pred: &[f64]) -> f64 {
    let se: f64 = truth.iter().zip(pred).map(|(t, p)| (t - p) * (t - p)).sum();
    (se / truth.len() as f64).sqrt()
}

/// Binary log loss with predictions clipped to `[1e-15, 1 - 1e-15]`.
pub fn logloss(truth: &[f64], pred: &[f64]) -> f64 {
    let eps = 1e-15;
    let s: f64 = truth
        .iter()
        .zip(pred)
        .map(|(y, p)| {
            let p = p.clamp(eps, 1.0 - eps);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    s / truth.len() as f64
}

fn same_label(a: &str, b: &str) -> bool {
    match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

pub fn accuracy(truth: &[String], pred: &[String]) -> f64 {
    let hits = truth
        .iter()
        .zip(pred)
        .filter(|(t, p)| same_label(t, p))
        .count();
    hits as f64 / truth.len() as f64
}

fn read_table(
    path: &Path,
    spec: &GraderSpec,
) -> std::result::Result<Vec<(String, String)>, InvalidReason> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|_| InvalidReason::SchemaMismatch)?;
    let headers = rdr
        .headers()
        .map_err(|_| InvalidReason::SchemaMismatch)?
        .clone();
    let id = headers.iter().position(|h| h == spec.id_column);
    let target = headers.iter().position(|h| h == spec.target_column);
    let (Some(id), Some(target)) = (id, target) else {
        return Err(InvalidReason::SchemaMismatch);
    };
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|_| InvalidReason::SchemaMismatch)?;
        match (rec.get(id), rec.get(target)) {
            (Some(i), Some(t)) => rows.push((i.to_string(), t.to_string())),
            _ => return Err(InvalidReason::SchemaMismatch),
        }
    }
    Ok(rows)
}

/// Loads `id -> target` from the answer file. Problems here are task errors.
pub fn load_answers(spec: &GraderSpec) -> Result<Vec<(String, String)>> {
    read_table(&spec.answer_path, spec).map_err(|r| Error::Task {
        task: spec.answer_path.display().to_string(),
        reason: format!("answer file unreadable: {r}"),
    })
}

/// Grades the submission file found in `workdir`.
pub fn grade(task: &TaskSpec, workdir: &Path) -> Result<GradeResult> {
    let answers = load_answers(&task.grader)?;
    let path = workdir.join(&task.submission_relpath);
    // A symlink could point the grader at files the guest cannot read.
    match fs::symlink_metadata(&path) {
        Ok(m) if m.is_file() && m.len() <= MAX_SUBMISSION_BYTES => {}
        Ok(m) if m.is_file() => return Ok(GradeResult::Invalid(InvalidReason::SchemaMismatch)),
        _ => return Ok(GradeResult::Invalid(InvalidReason::MissingSubmission)),
    }
    let rows = match read_table(&path, &task.grader) {
        Ok(r) => r,
        Err(reason) => return Ok(GradeResult::Invalid(reason)),
    };
    grade_rows(task.grader.metric, &answers, &rows)
}

/// Grades `(id, prediction)` rows against `(id, truth)` answers.
pub fn grade_rows(
    metric: Metric,
    answers: &[(String, String)],
    rows: &[(String, String)],
) -> Result<GradeResult> {
    if rows.len() != answers.len() {
        return Ok(GradeResult::Invalid(InvalidReason::IdMismatch));
    }
    let mut pred: HashMap<&str, &str> = HashMap::with_capacity(rows.len());
    for (id, v) in rows {
        if pred.insert(id.as_str(), v.as_str()).is_some() {
            return Ok(GradeResult::Invalid(InvalidReason::IdMismatch));
        }
    }
    let mut truth_s = Vec::with_capacity(answers.len());
    let mut pred_s = Vec::with_capacity(answers.len());
    for (id, t) in answers {
        match pred.get(id.as_str()) {
            Some(p) => {
                truth_s.push(t.clone());
                pred_s.push(p.to_string());
            }
            None => return Ok(GradeResult::Invalid(InvalidReason::IdMismatch)),
        }
    }
    if metric == Metric::Accuracy {
        if pred_s
            .iter()
            .any(|p| p.parse::<f64>().is_ok_and(|x| !x.is_finite()))
        {
            return Ok(GradeResult::Invalid(InvalidReason::Nonfinite));
        }
        return Ok(GradeResult::Valid(accuracy(&truth_s, &pred_s)));
    }
    let mut p = Vec::with_capacity(pred_s.len());
    for s in &pred_s {
        match s.parse::<f64>() {
            Ok(x) if x.is_finite() => p.push(x),
            _ => return Ok(GradeResult::Invalid(InvalidReason::Nonfinite)),
        }
    }
    let t: Vec<f64> = truth_s
        .iter()
        .map(|s| s.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Task {
            task: "grader".into(),
            reason: "non-numeric answer value".into(),
        })?;
    let score = match metric {
        Metric::Auc => auc(&t, &p).ok_or_else(|| Error::Task {
            task: "grader".into(),
            reason: "answers contain a single class".into(),
        })?,
        Metric::Rmse => rmse(&t, &p),
        Metric::Logloss => logloss(&t, &p),
        Metric::Accuracy => unreachable!(),
    };
    Ok(GradeResult::Valid(score))
}
