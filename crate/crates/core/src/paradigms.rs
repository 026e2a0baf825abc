//! Training regimes and the weekly prediction schedule.
//!
//! Weeks are indexed relative to T100: week 0 is the T100 date and week
//! `-k` falls `7k` days earlier. A prediction at week `w` may only use
//! activity up to and including `week_date(w)`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex, OnceLock};

use chrono::{Duration, NaiveDate};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{derive_labels, CourseData, CourseMeta, LabelSet};
use crate::evaluate::{auc, raw_accuracy, EvalError, EvalReport, EvalRow, SkippedCell};
use crate::features::{build_matrix, fit_zscore, normalize, FeatureError, FeatureMatrix, NormKind};
use crate::linear::{
    average_hyperplanes, baseline_demographics, baseline_recency, predict_proba,
    score_with_own_norm, train_logreg, LinearError, LinearModel, OptimizerConfig, ScoredStudents,
};
use crate::seed::{derive_seed, name_key};

#[derive(Debug, Error)]
pub enum ParadigmError {
    #[error("{course_id}: week {week} falls before launch")]
    BeforeLaunch { course_id: String, week: i32 },
    #[error("{course_id}: week {week} falls after T100")]
    AfterT100 { course_id: String, week: i32 },
    #[error("{course_id}: proxy window for week {week} is outside launch..T100")]
    WindowOutOfRange { course_id: String, week: i32 },
    #[error("{course_id}: week {week} is not a prediction week for {kind}")]
    WeekNotEligible {
        course_id: String,
        kind: ParadigmKind,
        week: i32,
    },
    #[error("invalid paradigm spec: {0}")]
    SpecInvalid(String),
    #[error("{0}: a single class in the labels")]
    SingleClass(String),
    #[error("source course {course_id}: {message}")]
    Source { course_id: String, message: String },
    #[error(transparent)]
    Linear(LinearError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Eval(EvalError),
    #[error("thread pool: {0}")]
    Pool(String),
}

impl ParadigmError {
    fn linear(context: &str, e: LinearError) -> Self {
        match e {
            LinearError::SingleClass => ParadigmError::SingleClass(context.to_string()),
            other => ParadigmError::Linear(other),
        }
    }

    fn eval(context: &str, e: EvalError) -> Self {
        match e {
            EvalError::SingleClass => ParadigmError::SingleClass(context.to_string()),
            other => ParadigmError::Eval(other),
        }
    }
}

type Result<T> = std::result::Result<T, ParadigmError>;

/// Week offset from T100; 0 is T100 itself, negative values are earlier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WeekIndex(pub i32);

impl fmt::Display for WeekIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParadigmKind {
    PostHoc,
    SameField,
    MultiCourse,
    InSitu,
    Baseline1,
    Baseline2,
}

impl ParadigmKind {
    pub const ALL: [ParadigmKind; 6] = [
        ParadigmKind::PostHoc,
        ParadigmKind::SameField,
        ParadigmKind::MultiCourse,
        ParadigmKind::InSitu,
        ParadigmKind::Baseline1,
        ParadigmKind::Baseline2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParadigmKind::PostHoc => "post-hoc",
            ParadigmKind::SameField => "same-field",
            ParadigmKind::MultiCourse => "multi-course",
            ParadigmKind::InSitu => "in-situ",
            ParadigmKind::Baseline1 => "baseline1",
            ParadigmKind::Baseline2 => "baseline2",
        }
    }

    /// Days of clickstream that must have elapsed since launch.
    fn min_elapsed_days(self) -> i64 {
        match self {
            ParadigmKind::PostHoc | ParadigmKind::SameField | ParadigmKind::MultiCourse => 7,
            ParadigmKind::InSitu => 14,
            ParadigmKind::Baseline1 | ParadigmKind::Baseline2 => 0,
        }
    }

    fn has_sources(self) -> bool {
        matches!(self, ParadigmKind::SameField | ParadigmKind::MultiCourse)
    }
}

impl fmt::Display for ParadigmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ParadigmKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let key = s.to_ascii_lowercase().replace(['_', ' '], "-");
        ParadigmKind::ALL
            .into_iter()
            .find(|k| k.name() == key || k.name().replace('-', "") == key)
            .ok_or_else(|| {
                let names: Vec<&str> = ParadigmKind::ALL.iter().map(|k| k.name()).collect();
                format!("unknown paradigm `{s}` (expected one of {})", names.join(", "))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParadigmSpec {
    pub kind: ParadigmKind,
    pub target_course: String,
    /// Empty unless `kind` is SameField or MultiCourse.
    pub source_courses: Vec<String>,
}

fn find<'a>(corpus: &'a [CourseData], id: &str) -> Result<&'a CourseData> {
    corpus
        .iter()
        .find(|c| c.id() == id)
        .ok_or_else(|| ParadigmError::SpecInvalid(format!("course `{id}` is not in the corpus")))
}

/// The largest other course of the target's field; ties go to the
/// lexicographically smallest id.
pub fn same_field_source<'a>(corpus: &'a [CourseData], target: &CourseData) -> Option<&'a CourseData> {
    corpus
        .iter()
        .filter(|c| c.id() != target.id() && c.meta().field == target.meta().field)
        .min_by(|a, b| {
            b.n_students()
                .cmp(&a.n_students())
                .then_with(|| a.id().cmp(b.id()))
        })
}

impl ParadigmSpec {
    /// Builds the spec for `kind` on `target`, choosing sources from the corpus.
    pub fn resolve(corpus: &[CourseData], kind: ParadigmKind, target: &str) -> Result<Self> {
        let t = find(corpus, target)?;
        let source_courses = match kind {
            ParadigmKind::SameField => vec![same_field_source(corpus, t)
                .ok_or_else(|| {
                    ParadigmError::SpecInvalid(format!(
                        "no other {} course for {target}",
                        t.meta().field
                    ))
                })?
                .id()
                .to_string()],
            ParadigmKind::MultiCourse => {
                let ids: Vec<String> = corpus
                    .iter()
                    .filter(|c| c.id() != target)
                    .map(|c| c.id().to_string())
                    .collect();
                if ids.is_empty() {
                    return Err(ParadigmError::SpecInvalid(format!(
                        "no source courses besides {target}"
                    )));
                }
                ids
            }
            _ => Vec::new(),
        };
        Ok(ParadigmSpec {
            kind,
            target_course: target.to_string(),
            source_courses,
        })
    }

    pub fn validate(&self, corpus: &[CourseData]) -> Result<()> {
        let expected = ParadigmSpec::resolve(corpus, self.kind, &self.target_course)?;
        let mut got = self.source_courses.clone();
        got.sort();
        let mut want = expected.source_courses;
        want.sort();
        if got != want {
            return Err(ParadigmError::SpecInvalid(format!(
                "{} on {} needs sources [{}], got [{}]",
                self.kind,
                self.target_course,
                want.join(", "),
                got.join(", ")
            )));
        }
        Ok(())
    }
}

/// Persistence labels: 1 if the student had any day with `nevents > 0` in
/// the window `(week_date(w-1), week_date(w)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyLabelSet {
    pub course_id: String,
    pub week: WeekIndex,
    pub labels: BTreeMap<String, u8>,
}

impl ProxyLabelSet {
    pub fn as_label_set(&self) -> LabelSet {
        LabelSet {
            course_id: self.course_id.clone(),
            labels: self.labels.clone(),
        }
    }
}

/// `t100 + 7w` days.
pub fn week_date(meta: &CourseMeta, w: WeekIndex) -> Result<NaiveDate> {
    if w.0 > 0 {
        return Err(ParadigmError::AfterT100 {
            course_id: meta.course_id.clone(),
            week: w.0,
        });
    }
    let date = meta.t100_date + Duration::days(7 * i64::from(w.0));
    if date < meta.launch_date {
        return Err(ParadigmError::BeforeLaunch {
            course_id: meta.course_id.clone(),
            week: w.0,
        });
    }
    Ok(date)
}

/// Weeks, ascending, at which `kind` can predict on this course.
pub fn prediction_weeks(meta: &CourseMeta, kind: ParadigmKind) -> Vec<WeekIndex> {
    let span = (meta.t100_date - meta.launch_date).num_days();
    let earliest = -(span / 7);
    (earliest..=0)
        .map(|w| WeekIndex(w as i32))
        .filter(|&w| {
            let elapsed = span + 7 * i64::from(w.0);
            elapsed >= kind.min_elapsed_days()
        })
        .collect()
}

fn check_eligible(meta: &CourseMeta, kind: ParadigmKind, w: WeekIndex) -> Result<NaiveDate> {
    let date = week_date(meta, w)?;
    if !prediction_weeks(meta, kind).contains(&w) {
        return Err(ParadigmError::WeekNotEligible {
            course_id: meta.course_id.clone(),
            kind,
            week: w.0,
        });
    }
    Ok(date)
}

pub fn proxy_labels(course: &CourseData, w: WeekIndex) -> Result<ProxyLabelSet> {
    let meta = course.meta();
    let out_of_range = || ParadigmError::WindowOutOfRange {
        course_id: meta.course_id.clone(),
        week: w.0,
    };
    let start = week_date(meta, WeekIndex(w.0 - 1)).map_err(|_| out_of_range())?;
    let end = week_date(meta, w).map_err(|_| out_of_range())?;
    let labels = course
        .students()
        .iter()
        .map(|s| {
            let persisted = course
                .activity_of(&s.student_id)
                .iter()
                .any(|d| d.date > start && d.date <= end && d.counters.nevents() > 0.0);
            (s.student_id.clone(), u8::from(persisted))
        })
        .collect();
    Ok(ProxyLabelSet {
        course_id: meta.course_id.clone(),
        week: w,
        labels,
    })
}

/// How a single-source transfer model sees the target course.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransferNorm {
    /// z-scored with the source course's statistics.
    #[default]
    Source,
    /// z-scored with the target course's own statistics.
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(rename = "reg_C")]
    pub reg_c: f64,
    pub optimizer: OptimizerConfig,
    pub same_field_norm: TransferNorm,
    /// Fraction of each course held out from post-hoc training and scored.
    pub holdout: Option<f64>,
    pub seed: u64,
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            reg_c: 1.0,
            optimizer: OptimizerConfig::default(),
            same_field_norm: TransferNorm::Source,
            holdout: None,
            seed: 0,
            jobs: 1,
        }
    }
}

impl RunConfig {
    fn validate(&self) -> Result<()> {
        if !(self.reg_c > 0.0 && self.reg_c.is_finite()) {
            return Err(ParadigmError::SpecInvalid(format!(
                "C must be positive, got {}",
                self.reg_c
            )));
        }
        if let Some(f) = self.holdout {
            if !(f > 0.0 && f < 1.0) {
                return Err(ParadigmError::SpecInvalid(format!(
                    "holdout fraction {f} not in (0, 1)"
                )));
            }
        }
        Ok(())
    }
}

/// A course's own z-scored model at `as_of`, trained on its certification
/// labels. Carries its normalization.
fn course_model(course: &CourseData, as_of: NaiveDate, cfg: &RunConfig) -> Result<LinearModel> {
    let raw = build_matrix(course, as_of)?;
    let stats = fit_zscore(&raw)?;
    let x = stats.apply(&raw)?;
    let mut model = train_logreg(&x, &derive_labels(course), cfg.reg_c, &cfg.optimizer)
        .map_err(|e| ParadigmError::linear(course.id(), e))?;
    model.norm = Some(stats);
    Ok(model)
}

/// Date at which a source course supplies training data for target week `w`:
/// its own week `w`, moved later if that is before its first eligible week.
fn source_date(source: &CourseMeta, w: WeekIndex) -> Result<NaiveDate> {
    let weeks = prediction_weeks(source, ParadigmKind::PostHoc);
    let first = *weeks.first().ok_or_else(|| {
        ParadigmError::SpecInvalid(format!(
            "source {} has no week with a full week of data",
            source.course_id
        ))
    })?;
    week_date(source, w.max(first))
}

/// Models shared by every cell of an experiment.
type Slot = Arc<OnceLock<std::result::Result<Arc<LinearModel>, (bool, String)>>>;

/// Trained models keyed by (course, feature date); `None` is the
/// demographics baseline, which has no date.
#[derive(Default)]
struct ModelCache {
    slots: Mutex<HashMap<(String, Option<NaiveDate>), Slot>>,
}

impl ModelCache {
    fn get(&self, course: &CourseData, as_of: NaiveDate, cfg: &RunConfig) -> Result<Arc<LinearModel>> {
        self.get_or_train(course, Some(as_of), || course_model(course, as_of, cfg))
    }

    fn demographics(&self, course: &CourseData, cfg: &RunConfig) -> Result<Arc<LinearModel>> {
        self.get_or_train(course, None, || {
            baseline_demographics(course, &derive_labels(course), cfg.reg_c, &cfg.optimizer)
                .map_err(|e| ParadigmError::linear(course.id(), e))
        })
    }

    fn get_or_train(
        &self,
        course: &CourseData,
        key: Option<NaiveDate>,
        train: impl FnOnce() -> Result<LinearModel>,
    ) -> Result<Arc<LinearModel>> {
        let slot = {
            let mut slots = self.slots.lock().expect("cache lock poisoned");
            slots
                .entry((course.id().to_string(), key))
                .or_default()
                .clone()
        };
        let result = slot.get_or_init(|| {
            train().map(Arc::new).map_err(|e| {
                (matches!(e, ParadigmError::SingleClass(_)), e.to_string())
            })
        });
        match result {
            Ok(m) => Ok(m.clone()),
            Err((true, _)) => Err(ParadigmError::SingleClass(course.id().to_string())),
            Err((false, message)) => Err(ParadigmError::Source {
                course_id: course.id().to_string(),
                message: message.clone(),
            }),
        }
    }
}

fn z_scored_on_self(raw: &FeatureMatrix) -> Result<FeatureMatrix> {
    Ok(normalize(raw, NormKind::ZScore)?.1)
}

fn post_hoc(target: &CourseData, as_of: NaiveDate, w: WeekIndex, cfg: &RunConfig, cache: &ModelCache) -> Result<ScoredStudents> {
    let Some(fraction) = cfg.holdout else {
        let model = cache.get(target, as_of, cfg)?;
        let raw = build_matrix(target, as_of)?;
        return score_with_own_norm(&model, &raw).map_err(|e| ParadigmError::linear(target.id(), e));
    };
    let raw = build_matrix(target, as_of)?;
    let n = raw.n_rows();
    let mut order: Vec<usize> = (0..n).collect();
    let seed = derive_seed(cfg.seed, &[name_key(target.id()), w.0 as u64]);
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((n as f64 * fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let (test_idx, train_idx) = order.split_at(n_test);
    let mut test_idx = test_idx.to_vec();
    let mut train_idx = train_idx.to_vec();
    test_idx.sort_unstable();
    train_idx.sort_unstable();
    let train_raw = raw.select_rows(&train_idx);
    let stats = fit_zscore(&train_raw)?;
    let model = train_logreg(&stats.apply(&train_raw)?, &derive_labels(target), cfg.reg_c, &cfg.optimizer)
        .map_err(|e| ParadigmError::linear(target.id(), e))?;
    let test = stats.apply(&raw.select_rows(&test_idx))?;
    predict_proba(&model, &test).map_err(|e| ParadigmError::linear(target.id(), e))
}

/// Model transferred from other courses, scored on the target.
fn transfer(
    corpus: &[CourseData],
    spec: &ParadigmSpec,
    target: &CourseData,
    as_of: NaiveDate,
    w: WeekIndex,
    cfg: &RunConfig,
    cache: &ModelCache,
) -> Result<ScoredStudents> {
    let models = spec
        .source_courses
        .iter()
        .map(|id| {
            let source = find(corpus, id)?;
            cache.get(source, source_date(source.meta(), w)?, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let raw = build_matrix(target, as_of)?;
    let err = |e| ParadigmError::linear(target.id(), e);
    match (spec.kind, cfg.same_field_norm) {
        (ParadigmKind::SameField, TransferNorm::Source) => {
            score_with_own_norm(&models[0], &raw).map_err(err)
        }
        _ => {
            let owned: Vec<LinearModel> = models.iter().map(|m| (**m).clone()).collect();
            let averaged = average_hyperplanes(&owned).map_err(err)?;
            predict_proba(&averaged, &z_scored_on_self(&raw)?).map_err(err)
        }
    }
}

/// Proxy-label model for week `w`. Only ever handed a course whose grades
/// have been removed.
fn in_situ(blind: &BlindCourse, w: WeekIndex, cfg: &RunConfig) -> Result<ScoredStudents> {
    let course = &blind.0;
    let meta = course.meta();
    let proxy = proxy_labels(course, w)?;
    let prev = week_date(meta, WeekIndex(w.0 - 1))?;
    let now = week_date(meta, w)?;
    let (_, train) = normalize(&build_matrix(course, prev)?, NormKind::Percentile)?;
    let model = train_logreg(&train, &proxy.as_label_set(), cfg.reg_c, &cfg.optimizer)
        .map_err(|e| ParadigmError::linear(&format!("{} proxy labels", course.id()), e))?;
    let (_, test) = normalize(&build_matrix(course, now)?, NormKind::Percentile)?;
    predict_proba(&model, &test).map_err(|e| ParadigmError::linear(course.id(), e))
}

/// A course with every final grade removed.
pub struct BlindCourse(CourseData);

impl BlindCourse {
    pub fn new(course: &CourseData) -> Self {
        BlindCourse(
            course
                .with_final_grades(BTreeMap::new())
                .expect("an empty grade map is always valid"),
        )
    }
}

fn run_cell(
    corpus: &[CourseData],
    blind: Option<&BlindCourse>,
    spec: &ParadigmSpec,
    w: WeekIndex,
    cfg: &RunConfig,
    cache: &ModelCache,
) -> Result<ScoredStudents> {
    let target = find(corpus, &spec.target_course)?;
    let as_of = check_eligible(target.meta(), spec.kind, w)?;
    match spec.kind {
        ParadigmKind::PostHoc => post_hoc(target, as_of, w, cfg, cache),
        ParadigmKind::SameField | ParadigmKind::MultiCourse => {
            transfer(corpus, spec, target, as_of, w, cfg, cache)
        }
        ParadigmKind::InSitu => match blind {
            Some(b) => in_situ(b, w, cfg),
            None => in_situ(&BlindCourse::new(target), w, cfg),
        },
        ParadigmKind::Baseline1 => {
            let model = cache.demographics(target, cfg)?;
            score_with_own_norm(&model, &build_matrix(target, as_of)?)
                .map_err(|e| ParadigmError::linear(target.id(), e))
        }
        ParadigmKind::Baseline2 => {
            baseline_recency(target, as_of).map_err(|e| ParadigmError::linear(target.id(), e))
        }
    }
}

/// Scores the target course of `spec` at week `w`.
pub fn run_paradigm(
    corpus: &[CourseData],
    spec: &ParadigmSpec,
    w: WeekIndex,
    cfg: &RunConfig,
) -> Result<ScoredStudents> {
    cfg.validate()?;
    spec.validate(corpus)?;
    run_cell(corpus, None, spec, w, cfg, &ModelCache::default())
}

struct Cell {
    spec: ParadigmSpec,
    week: WeekIndex,
}

/// Every paradigm on every course at every eligible week, scored against
/// true certification labels. Rows are ordered by (paradigm as given,
/// course id, week) regardless of `cfg.jobs`.
pub fn run_experiment(
    corpus: &[CourseData],
    kinds: &[ParadigmKind],
    cfg: &RunConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(ParadigmError::SpecInvalid("empty corpus".into()));
    }
    let mut courses: Vec<&CourseData> = corpus.iter().collect();
    courses.sort_by(|a, b| a.id().cmp(b.id()));

    let mut cells = Vec::new();
    let mut skipped = Vec::new();
    for &kind in kinds {
        for course in &courses {
            let weeks = prediction_weeks(course.meta(), kind);
            match ParadigmSpec::resolve(corpus, kind, course.id()) {
                Ok(spec) => cells.extend(weeks.into_iter().map(|week| Cell {
                    spec: spec.clone(),
                    week,
                })),
                Err(ParadigmError::SpecInvalid(reason)) if kind.has_sources() => {
                    skipped.extend(weeks.into_iter().map(|week| SkippedCell {
                        paradigm: kind.name().to_string(),
                        course_id: course.id().to_string(),
                        week: week.0,
                        reason: reason.clone(),
                    }))
                }
                Err(e) => return Err(e),
            }
        }
    }

    let blind: HashMap<&str, BlindCourse> = if kinds.contains(&ParadigmKind::InSitu) {
        courses.iter().map(|c| (c.id(), BlindCourse::new(c))).collect()
    } else {
        HashMap::new()
    };
    let labels: HashMap<&str, LabelSet> = courses.iter().map(|c| (c.id(), derive_labels(c))).collect();
    let cache = ModelCache::default();

    let evaluate_cell = |cell: &Cell| -> Result<EvalRow> {
        let target = cell.spec.target_course.as_str();
        let scores = run_cell(
            corpus,
            blind.get(target),
            &cell.spec,
            cell.week,
            cfg,
            &cache,
        )?;
        let y = &labels[target];
        let context = format!("{target} certification labels");
        let auc = auc(&scores, y).map_err(|e| ParadigmError::eval(&context, e))?;
        let accuracy = (cell.spec.kind != ParadigmKind::Baseline2)
            .then(|| raw_accuracy(&scores, y, 0.5))
            .transpose()
            .map_err(|e| ParadigmError::eval(&context, e))?;
        let n_positives = scores
            .student_ids
            .iter()
            .filter(|id| y.get(id) == Some(1))
            .count();
        Ok(EvalRow {
            paradigm: cell.spec.kind.name().to_string(),
            course_id: target.to_string(),
            week: cell.week.0,
            auc,
            accuracy,
            n_students: scores.student_ids.len(),
            n_positives,
        })
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs.max(1))
        .build()
        .map_err(|e| ParadigmError::Pool(e.to_string()))?;
    let results: Vec<Result<EvalRow>> = pool.install(|| cells.par_iter().map(evaluate_cell).collect());

    let mut rows = Vec::new();
    for (cell, result) in cells.iter().zip(results) {
        match result {
            Ok(row) => rows.push(row),
            Err(ParadigmError::SingleClass(reason)) => skipped.push(SkippedCell {
                paradigm: cell.spec.kind.name().to_string(),
                course_id: cell.spec.target_course.clone(),
                week: cell.week.0,
                reason: format!("single class in {reason}"),
            }),
            Err(e) => return Err(e),
        }
    }
    let order = |p: &str| kinds.iter().position(|k| k.name() == p);
    skipped.sort_by(|a, b| {
        (order(&a.paradigm), &a.course_id, a.week).cmp(&(order(&b.paradigm), &b.course_id, b.week))
    });
    Ok(EvalReport::from_rows(rows, skipped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{
        synthesize_course, ActivityDay, Counters, Field, StudentDemographics, SynthConfig,
    };

    fn d(y: i32, m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, day).unwrap()
    }

    fn meta(id: &str, weeks: i64) -> CourseMeta {
        let launch = d(2016, 1, 4);
        CourseMeta {
            course_id: id.into(),
            launch_date: launch,
            end_date: launch + Duration::days(7 * weeks + 14),
            t100_date: launch + Duration::days(7 * weeks),
            cert_threshold: 0.5,
            field: Field::Stem,
        }
    }

    /// Students `s0..` with activity on the given days and grades.
    fn course(weeks: i64, students: &[(&[NaiveDate], f64)]) -> CourseData {
        let mut demo = Vec::new();
        let mut activity = Vec::new();
        let mut grades = BTreeMap::new();
        for (i, (days, grade)) in students.iter().enumerate() {
            let id = format!("s{i}");
            demo.push(StudentDemographics::anonymous(&id));
            for &date in *days {
                activity.push(ActivityDay {
                    student_id: id.clone(),
                    date,
                    counters: Counters::default().with("nevents", 3.0),
                });
            }
            grades.insert(id, *grade);
        }
        CourseData::new(meta("T", weeks), demo, activity, grades).unwrap()
    }

    fn synth(id: &str, field: Field, n: usize, seed: u64) -> CourseData {
        let cfg = SynthConfig {
            course_id: id.into(),
            field,
            n_students: n,
            ..SynthConfig::default()
        };
        synthesize_course(&cfg, seed).unwrap()
    }

    #[test]
    fn week_dates() {
        let m = meta("T", 8);
        assert_eq!(week_date(&m, WeekIndex(0)).unwrap(), m.t100_date);
        assert_eq!(week_date(&m, WeekIndex(-3)).unwrap(), m.t100_date - Duration::days(21));
        assert_eq!(week_date(&m, WeekIndex(-8)).unwrap(), m.launch_date);
        assert!(matches!(week_date(&m, WeekIndex(-9)), Err(ParadigmError::BeforeLaunch { .. })));
        assert!(matches!(week_date(&m, WeekIndex(1)), Err(ParadigmError::AfterT100 { .. })));
        for w in -7..=0 {
            let a = week_date(&m, WeekIndex(w - 1)).unwrap();
            let b = week_date(&m, WeekIndex(w)).unwrap();
            assert_eq!((b - a).num_days(), 7);
        }
    }

    #[test]
    fn eligible_weeks() {
        let m = meta("T", 8);
        let weeks = |k| prediction_weeks(&m, k).iter().map(|w| w.0).collect::<Vec<_>>();
        assert_eq!(weeks(ParadigmKind::Baseline2), (-8..=0).collect::<Vec<_>>());
        assert_eq!(weeks(ParadigmKind::PostHoc), (-7..=0).collect::<Vec<_>>());
        assert_eq!(weeks(ParadigmKind::InSitu), (-6..=0).collect::<Vec<_>>());

        let short = meta("S", 1);
        assert_eq!(prediction_weeks(&short, ParadigmKind::PostHoc), vec![WeekIndex(0)]);
        assert!(prediction_weeks(&short, ParadigmKind::InSitu).is_empty());
    }

    #[test]
    fn proxy_windows() {
        let m = meta("T", 8);
        let w = WeekIndex(-2);
        let end = week_date(&m, w).unwrap();
        let start = week_date(&m, WeekIndex(-3)).unwrap();
        let c = course(
            8,
            &[
                (&[end - Duration::days(3)], 0.0),
                (&[start], 0.0),
                (&[start + Duration::days(1)], 0.0),
                (&[end], 0.0),
                (&[end + Duration::days(1)], 0.0),
                (&[], 0.0),
            ],
        );
        let p = proxy_labels(&c, w).unwrap();
        let got: Vec<u8> = p.labels.values().copied().collect();
        assert_eq!(got, vec![1, 0, 1, 1, 0, 0]);

        let idle = course(8, &[(&[], 0.0), (&[], 1.0)]);
        assert!(proxy_labels(&idle, w).unwrap().labels.values().all(|&l| l == 0));
        assert!(matches!(
            proxy_labels(&c, WeekIndex(-8)),
            Err(ParadigmError::WindowOutOfRange { .. })
        ));
    }

    #[test]
    fn zero_nevents_is_not_persistence() {
        let m = meta("T", 8);
        let day = week_date(&m, WeekIndex(0)).unwrap();
        let c = CourseData::new(
            m,
            vec![StudentDemographics::anonymous("a")],
            vec![ActivityDay {
                student_id: "a".into(),
                date: day,
                counters: Counters::default().with("nvideo", 4.0),
            }],
            BTreeMap::new(),
        )
        .unwrap();
        assert_eq!(proxy_labels(&c, WeekIndex(0)).unwrap().labels["a"], 0);
    }

    #[test]
    fn same_field_picks_largest_then_smallest_id() {
        let corpus = vec![
            synth("B", Field::Hum, 30, 1),
            synth("A", Field::Hum, 30, 2),
            synth("C", Field::Hum, 20, 3),
            synth("Z", Field::Stem, 90, 4),
            synth("T", Field::Hum, 10, 5),
        ];
        let spec = ParadigmSpec::resolve(&corpus, ParadigmKind::SameField, "T").unwrap();
        assert_eq!(spec.source_courses, vec!["A"]);
        let multi = ParadigmSpec::resolve(&corpus, ParadigmKind::MultiCourse, "T").unwrap();
        assert_eq!(multi.source_courses.len(), 4);
        let bad = ParadigmSpec {
            source_courses: vec!["B".into()],
            ..spec
        };
        assert!(matches!(bad.validate(&corpus), Err(ParadigmError::SpecInvalid(_))));
        assert!(ParadigmSpec::resolve(&corpus, ParadigmKind::SameField, "Z").is_err());
    }

    #[test]
    fn post_hoc_separable_course_is_perfect() {
        let m = meta("T", 4);
        let t100 = m.t100_date;
        let busy: Vec<NaiveDate> = (0..28).map(|k| m.launch_date + Duration::days(k)).collect();
        let mut students: Vec<(&[NaiveDate], f64)> = Vec::new();
        for i in 0..20 {
            if i % 2 == 0 {
                students.push((&busy, 1.0));
            } else {
                students.push((&[], 0.0));
            }
        }
        let c = course(4, &students);
        let spec = ParadigmSpec::resolve(std::slice::from_ref(&c), ParadigmKind::PostHoc, "T").unwrap();
        let s = run_paradigm(std::slice::from_ref(&c), &spec, WeekIndex(0), &RunConfig::default()).unwrap();
        assert_eq!(auc(&s, &derive_labels(&c)).unwrap(), 1.0);
        assert_eq!(week_date(c.meta(), WeekIndex(0)).unwrap(), t100);
    }

    #[test]
    fn in_situ_ignores_certification() {
        let c = synth("T", Field::Stem, 300, 8);
        let corrupted = {
            let flipped = c
                .students()
                .iter()
                .enumerate()
                .map(|(i, s)| (s.student_id.clone(), if i % 3 == 0 { 1.0 } else { 0.0 }))
                .collect();
            c.with_final_grades(flipped).unwrap()
        };
        for w in prediction_weeks(c.meta(), ParadigmKind::InSitu) {
            let run = |course: &CourseData| {
                let corpus = std::slice::from_ref(course);
                let spec = ParadigmSpec::resolve(corpus, ParadigmKind::InSitu, "T").unwrap();
                run_paradigm(corpus, &spec, w, &RunConfig::default()).unwrap()
            };
            let a = run(&c);
            let b = run(&corrupted);
            assert_eq!(a.student_ids, b.student_ids);
            let bits = |s: &ScoredStudents| s.scores.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a), bits(&b));
        }
    }

    #[test]
    fn multi_course_with_one_source_matches_same_field() {
        let corpus = vec![synth("S", Field::Stem, 400, 1), synth("T", Field::Stem, 300, 2)];
        let cfg = RunConfig {
            same_field_norm: TransferNorm::Target,
            ..RunConfig::default()
        };
        for w in [WeekIndex(-4), WeekIndex(0)] {
            let same = ParadigmSpec::resolve(&corpus, ParadigmKind::SameField, "T").unwrap();
            let multi = ParadigmSpec::resolve(&corpus, ParadigmKind::MultiCourse, "T").unwrap();
            let a = run_paradigm(&corpus, &same, w, &cfg).unwrap();
            let b = run_paradigm(&corpus, &multi, w, &cfg).unwrap();
            assert_eq!(a, b);
        }
        let same = ParadigmSpec::resolve(&corpus, ParadigmKind::SameField, "T").unwrap();
        let src = run_paradigm(&corpus, &same, WeekIndex(0), &RunConfig::default()).unwrap();
        assert_eq!(src.student_ids.len(), 300);
    }

    #[test]
    fn ineligible_week_is_rejected() {
        let c = synth("T", Field::Stem, 50, 1);
        let corpus = std::slice::from_ref(&c);
        let spec = ParadigmSpec::resolve(corpus, ParadigmKind::InSitu, "T").unwrap();
        let first = prediction_weeks(c.meta(), ParadigmKind::PostHoc)[0];
        assert!(matches!(
            run_paradigm(corpus, &spec, first, &RunConfig::default()),
            Err(ParadigmError::WeekNotEligible { .. })
        ));
    }

    #[test]
    fn experiment_bookkeeping_and_determinism() {
        let corpus = vec![
            synth("A", Field::Stem, 250, 1),
            synth("B", Field::Stem, 200, 2),
            synth("C", Field::Hum, 200, 3),
        ];
        let kinds = ParadigmKind::ALL;
        let cfg = RunConfig::default();
        let r1 = run_experiment(&corpus, &kinds, &cfg).unwrap();
        let r4 = run_experiment(&corpus, &kinds, &RunConfig { jobs: 4, ..cfg.clone() }).unwrap();
        assert_eq!(r1, r4);
        let expected: usize = kinds
            .iter()
            .map(|&k| {
                corpus
                    .iter()
                    .map(|c| prediction_weeks(c.meta(), k).len())
                    .sum::<usize>()
            })
            .sum();
        assert_eq!(r1.rows.len() + r1.skipped.len(), expected);
        // C has no same-field partner
        assert!(r1
            .skipped
            .iter()
            .any(|s| s.paradigm == "same-field" && s.course_id == "C"));
        let keys: Vec<(usize, &str, i32)> = r1
            .rows
            .iter()
            .map(|r| {
                let k = kinds.iter().position(|k| k.name() == r.paradigm).unwrap();
                (k, r.course_id.as_str(), r.week)
            })
            .collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert!(r1.rows.iter().all(|r| (0.0..=1.0).contains(&r.auc) && r.n_positives <= r.n_students));
    }

    #[test]
    fn holdout_scores_only_held_out_students() {
        let c = synth("T", Field::Stem, 200, 4);
        let corpus = std::slice::from_ref(&c);
        let spec = ParadigmSpec::resolve(corpus, ParadigmKind::PostHoc, "T").unwrap();
        let cfg = RunConfig {
            holdout: Some(0.25),
            seed: 3,
            ..RunConfig::default()
        };
        let s = run_paradigm(corpus, &spec, WeekIndex(0), &cfg).unwrap();
        assert_eq!(s.student_ids.len(), 50);
        assert_eq!(s, run_paradigm(corpus, &spec, WeekIndex(0), &cfg).unwrap());
    }

    #[test]
    fn paradigm_names_parse() {
        for k in ParadigmKind::ALL {
            assert_eq!(k.name().parse::<ParadigmKind>().unwrap(), k);
        }
        assert_eq!("PostHoc".parse::<ParadigmKind>().unwrap(), ParadigmKind::PostHoc);
        assert!("oracle".parse::<ParadigmKind>().is_err());
    }
}
