//! Per-student feature vectors as of a given date.
//!
//! A row is the concatenation of four one-hot demographic blocks, the 31
//! clickstream counters summed over every day up to and including the as-of
//! date, the pre-course survey flag, and the number of days since the
//! student last produced an event.

mod norm;

use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    Continent, CourseData, Education, Gender, StudentDemographics, CLICKSTREAM_FEATURES,
    N_COUNTERS,
};
use crate::matrix::Matrix;

pub use norm::{
    apply_percentile, apply_zscore, fit_percentile, fit_zscore, normalize, NormKind, NormStats,
};

/// Reference year for converting year of birth into age.
pub const AGE_REFERENCE_YEAR: i32 = 2012;

pub const N_AGE: usize = 13;
pub const N_LOE: usize = 8;
pub const N_GENDER: usize = 4;
pub const N_CONTINENT: usize = 8;
pub const N_DEMOGRAPHIC: usize = N_AGE + N_LOE + N_GENDER + N_CONTINENT;
pub const N_FEATURES: usize = N_DEMOGRAPHIC + N_COUNTERS + 2;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("unknown student `{0}`")]
    UnknownStudent(String),
    #[error("as-of date {as_of} outside course dates [{launch}, {end}]")]
    AsOfOutOfRange {
        as_of: NaiveDate,
        launch: NaiveDate,
        end: NaiveDate,
    },
    #[error("cannot fit normalization on an empty matrix")]
    EmptyMatrix,
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Block {
    AgeDummies,
    LoeDummies,
    GenderDummies,
    ContinentDummies,
    ClickstreamCumulative,
    PrecourseSurvey,
    DaysSinceLastAction,
}

impl Block {
    pub fn is_demographic(self) -> bool {
        matches!(
            self,
            Block::AgeDummies | Block::LoeDummies | Block::GenderDummies | Block::ContinentDummies
        )
    }
}

/// Ordered feature names partitioned into blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    names: Vec<String>,
    blocks: Vec<(Block, Range<usize>)>,
}

fn age_bin_names() -> Vec<String> {
    let mut names = vec!["age_lt10".to_string()];
    names.extend((10..60).step_by(5).map(|lo| format!("age_{lo}_{}", lo + 5)));
    names.push("age_ge60".into());
    names.push("age_null".into());
    names
}

impl FeatureSchema {
    /// The 66-column layout used throughout the crate.
    pub fn standard() -> Arc<FeatureSchema> {
        static SCHEMA: OnceLock<Arc<FeatureSchema>> = OnceLock::new();
        SCHEMA
            .get_or_init(|| {
                let loe = [
                    "elementary",
                    "junior_high",
                    "high_school",
                    "associate",
                    "bachelor",
                    "master",
                    "professional",
                    "null",
                ];
                let gender = ["male", "female", "other", "null"];
                let continent = [
                    "europe",
                    "oceania",
                    "africa",
                    "asia",
                    "americas",
                    "north_america",
                    "south_america",
                    "null",
                ];
                let groups: Vec<(Block, Vec<String>)> = vec![
                    (Block::AgeDummies, age_bin_names()),
                    (
                        Block::LoeDummies,
                        loe.iter().map(|s| format!("loe_{s}")).collect(),
                    ),
                    (
                        Block::GenderDummies,
                        gender.iter().map(|s| format!("gender_{s}")).collect(),
                    ),
                    (
                        Block::ContinentDummies,
                        continent.iter().map(|s| format!("continent_{s}")).collect(),
                    ),
                    (
                        Block::ClickstreamCumulative,
                        CLICKSTREAM_FEATURES.iter().map(|s| s.to_string()).collect(),
                    ),
                    (Block::PrecourseSurvey, vec!["precourse_survey".into()]),
                    (
                        Block::DaysSinceLastAction,
                        vec!["days_since_last_action".into()],
                    ),
                ];
                let mut names = Vec::new();
                let mut blocks = Vec::new();
                for (block, group) in groups {
                    let start = names.len();
                    names.extend(group);
                    blocks.push((block, start..names.len()));
                }
                Arc::new(FeatureSchema { names, blocks })
            })
            .clone()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn width(&self) -> usize {
        self.names.len()
    }

    pub fn blocks(&self) -> &[(Block, Range<usize>)] {
        &self.blocks
    }

    pub fn block(&self, block: Block) -> Range<usize> {
        self.blocks
            .iter()
            .find(|(b, _)| *b == block)
            .map(|(_, r)| r.clone())
            .expect("every block is present")
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Columns belonging to the four demographic dummy blocks.
    pub fn demographic_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.width()];
        for (block, range) in &self.blocks {
            if block.is_demographic() {
                mask[range.clone()].iter_mut().for_each(|m| *m = true);
            }
        }
        mask
    }

    /// FNV-1a over the column names; identifies the layout in model files.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for name in &self.names {
            for b in name.bytes().chain(std::iter::once(0u8)) {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

/// Index of the age bin for `2012 - yob`; bins are half-open `[lo, lo+5)`.
fn age_bin(yob: Option<i32>) -> usize {
    match yob {
        None => N_AGE - 1,
        Some(y) => {
            let age = AGE_REFERENCE_YEAR - y;
            if age < 10 {
                0
            } else if age >= 60 {
                11
            } else {
                1 + ((age - 10) / 5) as usize
            }
        }
    }
}

fn slot<T: PartialEq>(value: Option<T>, all: &[T]) -> usize {
    value
        .and_then(|v| all.iter().position(|a| *a == v))
        .unwrap_or(all.len())
}

/// One-hot age(13), level of education(8), gender(4) and continent(8).
/// A missing answer sets the block's trailing null slot.
pub fn encode_demographics(d: &StudentDemographics) -> [f64; N_DEMOGRAPHIC] {
    let mut out = [0.0; N_DEMOGRAPHIC];
    let mut offset = 0;
    let hot = [
        (age_bin(d.yob), N_AGE),
        (slot(d.loe, &Education::ALL), N_LOE),
        (slot(d.gender, &Gender::ALL), N_GENDER),
        (slot(d.continent, &Continent::ALL), N_CONTINENT),
    ];
    for (index, size) in hot {
        out[offset + index] = 1.0;
        offset += size;
    }
    out
}

fn check_as_of(course: &CourseData, as_of: NaiveDate) -> Result<(), FeatureError> {
    let m = course.meta();
    if m.contains(as_of) {
        Ok(())
    } else {
        Err(FeatureError::AsOfOutOfRange {
            as_of,
            launch: m.launch_date,
            end: m.end_date,
        })
    }
}

fn known(course: &CourseData, student: &str) -> Result<(), FeatureError> {
    course
        .student(student)
        .map(|_| ())
        .ok_or_else(|| FeatureError::UnknownStudent(student.to_string()))
}

fn cumulative_unchecked(course: &CourseData, student: &str, as_of: NaiveDate) -> [f64; N_COUNTERS] {
    let mut sum = [0.0; N_COUNTERS];
    for day in course.activity_of(student).iter().take_while(|d| d.date <= as_of) {
        for (s, v) in sum.iter_mut().zip(day.counters.0.iter()) {
            *s += v;
        }
    }
    sum
}

fn recency_unchecked(course: &CourseData, student: &str, as_of: NaiveDate) -> f64 {
    let last = course
        .activity_of(student)
        .iter()
        .take_while(|d| d.date <= as_of)
        .filter(|d| d.counters.nevents() > 0.0)
        .map(|d| d.date)
        .last();
    let days = match last {
        Some(date) => (as_of - date).num_days(),
        None => (as_of - course.meta().launch_date).num_days() + 1,
    };
    days as f64
}

/// Sum of each counter over the student's activity on days `<= as_of`.
pub fn cumulative_clickstream(
    course: &CourseData,
    student: &str,
    as_of: NaiveDate,
) -> Result<[f64; N_COUNTERS], FeatureError> {
    check_as_of(course, as_of)?;
    known(course, student)?;
    Ok(cumulative_unchecked(course, student, as_of))
}

/// Whole days between `as_of` and the latest day `<= as_of` with at least one
/// event. A student with no such day gets `as_of - launch + 1`.
pub fn days_since_last_action(
    course: &CourseData,
    student: &str,
    as_of: NaiveDate,
) -> Result<f64, FeatureError> {
    check_as_of(course, as_of)?;
    known(course, student)?;
    Ok(recency_unchecked(course, student, as_of))
}

/// Students x features matrix with the schema it was built under.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub schema: Arc<FeatureSchema>,
    pub student_ids: Vec<String>,
    pub values: Matrix,
    pub as_of: NaiveDate,
}

impl FeatureMatrix {
    pub fn new(
        schema: Arc<FeatureSchema>,
        student_ids: Vec<String>,
        values: Matrix,
        as_of: NaiveDate,
    ) -> Result<Self, FeatureError> {
        if values.rows() != student_ids.len() || values.cols() != schema.width() {
            return Err(FeatureError::SchemaMismatch(format!(
                "{}x{} values for {} students and {} columns",
                values.rows(),
                values.cols(),
                student_ids.len(),
                schema.width()
            )));
        }
        Ok(FeatureMatrix {
            schema,
            student_ids,
            values,
            as_of,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.student_ids.len()
    }

    pub fn width(&self) -> usize {
        self.values.cols()
    }

    pub fn select_rows(&self, indices: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            schema: self.schema.clone(),
            student_ids: indices.iter().map(|&i| self.student_ids[i].clone()).collect(),
            values: self.values.select_rows(indices),
            as_of: self.as_of,
        }
    }

    /// Copy with every column outside `mask` set to zero.
    pub fn masked(&self, mask: &[bool]) -> FeatureMatrix {
        let mut out = self.clone();
        for i in 0..out.n_rows() {
            for (v, &keep) in out.values.row_mut(i).iter_mut().zip(mask) {
                if !keep {
                    *v = 0.0;
                }
            }
        }
        out
    }

    /// `student_id` followed by one column per feature.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("student_id");
        for name in self.schema.names() {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (id, row) in self.student_ids.iter().zip(self.values.iter_rows()) {
            out.push_str(id);
            for v in row {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), FeatureError> {
        let io_err = |source| FeatureError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = fs::File::create(path).map_err(io_err)?;
        f.write_all(self.to_csv_string().as_bytes()).map_err(io_err)
    }
}

/// One row per enrolled student, sorted by student id.
pub fn build_matrix(course: &CourseData, as_of: NaiveDate) -> Result<FeatureMatrix, FeatureError> {
    check_as_of(course, as_of)?;
    let schema = FeatureSchema::standard();
    let width = schema.width();
    let clicks = schema.block(Block::ClickstreamCumulative);
    let survey = schema.block(Block::PrecourseSurvey).start;
    let recency = schema.block(Block::DaysSinceLastAction).start;
    let mut values = Matrix::zeros(course.n_students(), width);
    let mut ids = Vec::with_capacity(course.n_students());
    for (i, s) in course.students().iter().enumerate() {
        let row = values.row_mut(i);
        row[..N_DEMOGRAPHIC].copy_from_slice(&encode_demographics(s));
        row[clicks.clone()].copy_from_slice(&cumulative_unchecked(course, &s.student_id, as_of));
        row[survey] = f64::from(u8::from(s.took_precourse_survey));
        row[recency] = recency_unchecked(course, &s.student_id, as_of);
        ids.push(s.student_id.clone());
    }
    FeatureMatrix::new(schema, ids, values, as_of)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ActivityDay, CourseMeta, Counters, Field};
    use std::collections::BTreeMap;

    fn date(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    fn course(nevents: &[(&str, &str, f64)]) -> CourseData {
        let meta = CourseMeta {
            course_id: "C".into(),
            launch_date: date("2016-01-01"),
            end_date: date("2016-02-29"),
            t100_date: date("2016-02-19"),
            cert_threshold: 0.7,
            field: Field::Hum,
        };
        let mut ids: Vec<&str> = nevents.iter().map(|(s, _, _)| *s).collect();
        ids.extend(["idle", "b"]);
        ids.sort();
        ids.dedup();
        CourseData::new(
            meta,
            ids.iter().map(|s| StudentDemographics::anonymous(*s)).collect(),
            nevents
                .iter()
                .map(|(s, d, n)| ActivityDay {
                    student_id: s.to_string(),
                    date: date(d),
                    counters: Counters::default().with("nevents", *n).with("nvideo", 1.0),
                })
                .collect(),
            BTreeMap::new(),
        )
        .unwrap()
    }

    fn demo(yob: Option<i32>) -> StudentDemographics {
        StudentDemographics {
            yob,
            ..StudentDemographics::anonymous("x")
        }
    }

    #[test]
    fn schema_layout() {
        let s = FeatureSchema::standard();
        assert_eq!(s.width(), 66);
        let sizes: Vec<usize> = s.blocks().iter().map(|(_, r)| r.len()).collect();
        assert_eq!(sizes, vec![13, 8, 4, 8, 31, 1, 1]);
        let mut names = s.names().to_vec();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 66);
        let clicks = s.block(Block::ClickstreamCumulative);
        assert_eq!(&s.names()[clicks], &CLICKSTREAM_FEATURES.map(String::from)[..]);
        assert_eq!(s.names()[3], "age_20_25");
    }

    #[test]
    fn age_from_year_of_birth() {
        let names = FeatureSchema::standard().names().to_vec();
        let hot = |yob| {
            let v = encode_demographics(&demo(yob));
            let idx: Vec<usize> = (0..N_AGE).filter(|&i| v[i] == 1.0).collect();
            assert_eq!(idx.len(), 1);
            names[idx[0]].clone()
        };
        // 2012 - 1990 = 22
        assert_eq!(hot(Some(1990)), "age_20_25");
        // 15 falls in [15, 20)
        assert_eq!(hot(Some(1997)), "age_15_20");
        assert_eq!(hot(Some(2003)), "age_lt10");
        assert_eq!(hot(Some(1952)), "age_ge60");
        assert_eq!(hot(Some(1953)), "age_55_60");
        assert_eq!(hot(None), "age_null");
    }

    #[test]
    fn all_null_demographics_hit_null_slots() {
        let v = encode_demographics(&StudentDemographics::anonymous("x"));
        let names = FeatureSchema::standard().names().to_vec();
        let hot: Vec<&str> = (0..N_DEMOGRAPHIC)
            .filter(|&i| v[i] == 1.0)
            .map(|i| names[i].as_str())
            .collect();
        assert_eq!(hot, ["age_null", "loe_null", "gender_null", "continent_null"]);
    }

    #[test]
    fn cumulative_sums_prefix_only() {
        let c = course(&[
            ("a", "2016-01-01", 1.0),
            ("a", "2016-01-02", 2.0),
            ("a", "2016-01-03", 3.0),
            ("b", "2016-01-02", 5.0),
            ("b", "2016-01-03", 0.0),
            ("b", "2016-01-04", 4.0),
        ]);
        let nev = |s, d| cumulative_clickstream(&c, s, date(d)).unwrap()[5];
        assert_eq!(nev("a", "2016-01-03"), 6.0);
        assert_eq!(nev("b", "2016-01-01"), 0.0);
        assert_eq!(nev("b", "2016-01-03"), 5.0);
        assert_eq!(nev("idle", "2016-01-20"), 0.0);
        assert!(matches!(
            cumulative_clickstream(&c, "nobody", date("2016-01-03")),
            Err(FeatureError::UnknownStudent(_))
        ));
    }

    #[test]
    fn recency_rules() {
        let c = course(&[
            ("a", "2016-01-05", 2.0),
            ("a", "2016-01-07", 0.0),
            ("b", "2016-01-10", 1.0),
        ]);
        let r = |s, d| days_since_last_action(&c, s, date(d)).unwrap();
        assert_eq!(r("b", "2016-01-10"), 0.0);
        assert_eq!(r("b", "2016-01-13"), 3.0);
        // a zero-event day is not an interaction
        assert_eq!(r("a", "2016-01-08"), 3.0);
        // never active, launch + 9
        assert_eq!(r("idle", "2016-01-10"), 10.0);
        assert_eq!(r("b", "2016-01-09"), 9.0);
    }

    #[test]
    fn build_matrix_shape_and_content() {
        let c = course(&[("a", "2016-01-01", 4.0)]);
        let m = build_matrix(&c, date("2016-01-01")).unwrap();
        assert_eq!(m.n_rows(), 3);
        assert_eq!(m.width(), 66);
        assert_eq!(m.student_ids, ["a", "b", "idle"]);
        let s = &m.schema;
        assert_eq!(m.values[(0, s.index_of("nevents").unwrap())], 4.0);
        assert_eq!(m.values[(0, s.index_of("days_since_last_action").unwrap())], 0.0);
        assert_eq!(m.values[(1, s.index_of("days_since_last_action").unwrap())], 1.0);
        assert_eq!(build_matrix(&c, date("2016-01-01")).unwrap(), m);
        assert!(build_matrix(&c, date("2015-12-31")).is_err());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let c = course(&[("a", "2016-01-01", 4.0)]);
        let text = build_matrix(&c, date("2016-01-02")).unwrap().to_csv_string();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("student_id,age_lt10,"));
        assert_eq!(lines[1].split(',').count(), 67);
    }
}
