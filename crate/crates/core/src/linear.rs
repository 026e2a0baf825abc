//! L2-regularized logistic regression, hyperplane averaging and the two
//! baseline scorers.
//!
//! The training objective is
//!
//! ```text
//! (1/C) * 0.5 * |w|^2 + sum_i log(1 + exp(z_i)) - y_i z_i,   z_i = w.x_i + b
//! ```
//!
//! with an unregularized intercept. It is minimized by damped Newton steps
//! with Armijo backtracking until the gradient norm falls below
//! `tol_per_example * n`.

use std::fs;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{CourseData, LabelSet};
use crate::features::{
    build_matrix, days_since_last_action, fit_zscore, FeatureError, FeatureMatrix, FeatureSchema,
    NormStats,
};
use crate::matrix::{cholesky_solve, dot, norm, Matrix};

#[derive(Debug, Error)]
pub enum LinearError {
    #[error("training labels contain a single class")]
    SingleClass,
    #[error("loss became non-finite")]
    NonFiniteLoss,
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("no label for student `{0}`")]
    MissingLabel(String),
    #[error("cannot average an empty list of models")]
    EmptyList,
    #[error("regularization C must be positive and finite, got {0}")]
    BadRegularization(f64),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("{path}: {message}")]
    File { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Stop once `|grad| <= tol_per_example * n`.
    pub tol_per_example: f64,
    pub max_iter: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            tol_per_example: 1e-6,
            max_iter: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub schema_hash: u64,
    pub weights: Vec<f64>,
    pub intercept: f64,
    #[serde(rename = "C")]
    pub reg_c: f64,
    /// Normalization the model was trained under, if it carries one.
    pub norm: Option<NormStats>,
}

impl LinearModel {
    pub fn zeros(width: usize) -> Self {
        LinearModel {
            schema_hash: FeatureSchema::standard().hash(),
            weights: vec![0.0; width],
            intercept: 0.0,
            reg_c: 1.0,
            norm: None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), LinearError> {
        let file_err = |message: String| LinearError::File {
            path: path.display().to_string(),
            message,
        };
        let text = serde_json::to_string_pretty(self).map_err(|e| file_err(e.to_string()))?;
        fs::write(path, text + "\n").map_err(|e| file_err(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, LinearError> {
        let file_err = |message: String| LinearError::File {
            path: path.display().to_string(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| file_err(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| file_err(e.to_string()))
    }

    fn check(&self, x: &FeatureMatrix) -> Result<(), LinearError> {
        if x.width() != self.weights.len() || x.schema.hash() != self.schema_hash {
            return Err(LinearError::SchemaMismatch(format!(
                "model has {} weights (schema {:016x}), matrix has {} columns (schema {:016x})",
                self.weights.len(),
                self.schema_hash,
                x.width(),
                x.schema.hash()
            )));
        }
        Ok(())
    }

    /// Raw logits `w.x + b`.
    pub fn decision_function(&self, x: &FeatureMatrix) -> Result<Vec<f64>, LinearError> {
        self.check(x)?;
        Ok(x
            .values
            .iter_rows()
            .map(|r| dot(&self.weights, r) + self.intercept)
            .collect())
    }
}

/// Scores aligned with student ids; higher means more likely to certify.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredStudents {
    pub student_ids: Vec<String>,
    pub scores: Vec<f64>,
}

/// Logistic function without overflow for large `|z|`.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(z))`.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Regularized objective over the columns of `x`.
pub fn objective(x: &Matrix, y: &[f64], w: &[f64], b: f64, c: f64) -> f64 {
    let data: f64 = x
        .iter_rows()
        .zip(y)
        .map(|(r, &yi)| {
            let z = dot(w, r) + b;
            softplus(z) - yi * z
        })
        .sum();
    0.5 * dot(w, w) / c + data
}

/// Gradient of [`objective`] with respect to `(w, b)`.
pub fn gradient(x: &Matrix, y: &[f64], w: &[f64], b: f64, c: f64) -> (Vec<f64>, f64) {
    let mut gw: Vec<f64> = w.iter().map(|wj| wj / c).collect();
    let mut gb = 0.0;
    for (r, &yi) in x.iter_rows().zip(y) {
        let resid = sigmoid(dot(w, r) + b) - yi;
        for (g, xj) in gw.iter_mut().zip(r) {
            *g += resid * xj;
        }
        gb += resid;
    }
    (gw, gb)
}

fn hessian(x: &Matrix, w: &[f64], b: f64, c: f64) -> Matrix {
    let d = w.len();
    let mut h = Matrix::zeros(d + 1, d + 1);
    let mut aug = vec![1.0; d + 1];
    for r in x.iter_rows() {
        let p = sigmoid(dot(w, r) + b);
        let s = p * (1.0 - p);
        if s == 0.0 {
            continue;
        }
        aug[..d].copy_from_slice(r);
        for i in 0..=d {
            let si = s * aug[i];
            let row = h.row_mut(i);
            for j in 0..=i {
                row[j] += si * aug[j];
            }
        }
    }
    for i in 0..=d {
        for j in 0..i {
            h[(j, i)] = h[(i, j)];
        }
        if i < d {
            h[(i, i)] += 1.0 / c;
        }
    }
    h
}

/// Minimizes [`objective`] over `x`'s columns. Returns `(w, b)`.
pub fn fit_logistic(
    x: &Matrix,
    y: &[f64],
    c: f64,
    opt: &OptimizerConfig,
) -> Result<(Vec<f64>, f64), LinearError> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(LinearError::BadRegularization(c));
    }
    let n_pos = y.iter().filter(|&&v| v == 1.0).count();
    if n_pos == 0 || n_pos == y.len() {
        return Err(LinearError::SingleClass);
    }
    let d = x.cols();
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut loss = objective(x, y, &w, b, c);
    let tol = opt.tol_per_example * y.len() as f64;
    for _ in 0..opt.max_iter {
        if !loss.is_finite() {
            return Err(LinearError::NonFiniteLoss);
        }
        let (gw, gb) = gradient(x, y, &w, b, c);
        let mut g = gw;
        g.push(gb);
        if norm(&g) <= tol {
            break;
        }
        let h = hessian(x, &w, b, c);
        let neg_g: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut step = cholesky_solve(&h, &neg_g).unwrap_or_else(|| neg_g.clone());
        let mut slope = dot(&g, &step);
        if !(slope < 0.0) {
            step = neg_g;
            slope = dot(&g, &step);
        }
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let w_new: Vec<f64> = w.iter().zip(&step).map(|(wi, si)| wi + t * si).collect();
            let b_new = b + t * step[d];
            let loss_new = objective(x, y, &w_new, b_new, c);
            if loss_new <= loss + 1e-4 * t * slope {
                w = w_new;
                b = b_new;
                loss = loss_new;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // no descent possible at machine precision
            break;
        }
    }
    if !loss.is_finite() || w.iter().any(|v| !v.is_finite()) {
        return Err(LinearError::NonFiniteLoss);
    }
    Ok((w, b))
}

fn aligned_labels(x: &FeatureMatrix, y: &LabelSet) -> Result<Vec<f64>, LinearError> {
    x.student_ids
        .iter()
        .map(|id| {
            y.get(id)
                .map(f64::from)
                .ok_or_else(|| LinearError::MissingLabel(id.clone()))
        })
        .collect()
}

/// Trains on an already-normalized matrix. The returned model carries no
/// normalization; attach one with [`LinearModel::norm`] if needed.
pub fn train_logreg(
    x: &FeatureMatrix,
    y: &LabelSet,
    c: f64,
    opt: &OptimizerConfig,
) -> Result<LinearModel, LinearError> {
    let labels = aligned_labels(x, y)?;
    let (weights, intercept) = fit_logistic(&x.values, &labels, c, opt)?;
    Ok(LinearModel {
        schema_hash: x.schema.hash(),
        weights,
        intercept,
        reg_c: c,
        norm: None,
    })
}

/// Trains using only the columns where `mask` is true; other weights are
/// exactly zero.
pub fn train_logreg_masked(
    x: &FeatureMatrix,
    y: &LabelSet,
    c: f64,
    opt: &OptimizerConfig,
    mask: &[bool],
) -> Result<LinearModel, LinearError> {
    if mask.len() != x.width() {
        return Err(LinearError::SchemaMismatch(format!(
            "mask has {} entries, matrix {} columns",
            mask.len(),
            x.width()
        )));
    }
    let keep: Vec<usize> = (0..mask.len()).filter(|&j| mask[j]).collect();
    let sub = Matrix::from_rows(
        keep.len(),
        x.values
            .iter_rows()
            .map(|r| keep.iter().map(|&j| r[j]).collect::<Vec<_>>()),
    );
    let labels = aligned_labels(x, y)?;
    let (w_sub, intercept) = fit_logistic(&sub, &labels, c, opt)?;
    let mut weights = vec![0.0; x.width()];
    for (&j, w) in keep.iter().zip(w_sub) {
        weights[j] = w;
    }
    Ok(LinearModel {
        schema_hash: x.schema.hash(),
        weights,
        intercept,
        reg_c: c,
        norm: None,
    })
}

/// `sigmoid(w.x + b)` per row.
pub fn predict_proba(m: &LinearModel, x: &FeatureMatrix) -> Result<ScoredStudents, LinearError> {
    let scores = m.decision_function(x)?.into_iter().map(sigmoid).collect();
    Ok(ScoredStudents {
        student_ids: x.student_ids.clone(),
        scores,
    })
}

/// Pairwise sum over index-ascending halves.
fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n => pairwise_sum(&values[..n / 2]) + pairwise_sum(&values[n / 2..]),
    }
}

/// Order-independent mean: values are sorted before the pairwise sum, so
/// any permutation of the inputs gives the same bits.
fn stable_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    pairwise_sum(values) / values.len() as f64
}

/// Element-wise mean of weights and intercepts. The result carries no
/// normalization.
pub fn average_hyperplanes(models: &[LinearModel]) -> Result<LinearModel, LinearError> {
    let first = models.first().ok_or(LinearError::EmptyList)?;
    let width = first.weights.len();
    if let Some(m) = models
        .iter()
        .find(|m| m.weights.len() != width || m.schema_hash != first.schema_hash)
    {
        return Err(LinearError::SchemaMismatch(format!(
            "cannot average {}-weight model (schema {:016x}) with {}-weight model (schema {:016x})",
            m.weights.len(),
            m.schema_hash,
            width,
            first.schema_hash
        )));
    }
    let mut scratch = vec![0.0; models.len()];
    let mut column = |f: &dyn Fn(&LinearModel) -> f64| {
        for (s, m) in scratch.iter_mut().zip(models) {
            *s = f(m);
        }
        stable_mean(&mut scratch)
    };
    let weights = (0..width).map(|j| column(&|m| m.weights[j])).collect();
    let intercept = column(&|m| m.intercept);
    let reg_c = column(&|m| m.reg_c);
    Ok(LinearModel {
        schema_hash: first.schema_hash,
        weights,
        intercept,
        reg_c,
        norm: None,
    })
}

/// Demographics-only model: features are built at launch, z-scored on the
/// course, and only the 33 dummy columns are trained. The model carries its
/// normalization.
pub fn baseline_demographics(
    course: &CourseData,
    y: &LabelSet,
    c: f64,
    opt: &OptimizerConfig,
) -> Result<LinearModel, LinearError> {
    let raw = build_matrix(course, course.meta().launch_date)?;
    let stats = fit_zscore(&raw)?;
    let x = stats.apply(&raw)?;
    let mask = x.schema.demographic_mask();
    let mut model = train_logreg_masked(&x, y, c, opt, &mask)?;
    model.norm = Some(stats);
    Ok(model)
}

/// Scores a course with a model that carries its own normalization.
pub fn score_with_own_norm(
    model: &LinearModel,
    raw: &FeatureMatrix,
) -> Result<ScoredStudents, LinearError> {
    let x = match &model.norm {
        Some(stats) => stats.apply(raw)?,
        None => raw.clone(),
    };
    predict_proba(model, &x)
}

/// Negated days since last action; no training involved.
pub fn baseline_recency(course: &CourseData, as_of: NaiveDate) -> Result<ScoredStudents, LinearError> {
    let mut ids = Vec::with_capacity(course.n_students());
    let mut scores = Vec::with_capacity(course.n_students());
    for s in course.students() {
        scores.push(-days_since_last_action(course, &s.student_id, as_of)?);
        ids.push(s.student_id.clone());
    }
    Ok(ScoredStudents {
        student_ids: ids,
        scores,
    })
}
