//! Course, student and per-day activity data model.
//!
//! The layout mirrors the two tables the features are extracted from: a
//! per-student table (demographics, final grade) and a per-student-per-day
//! clickstream table with 31 counters. [`CourseData`] enforces the
//! cross-table invariants at construction and keeps activity indexed by
//! student so feature extraction is a linear scan.

mod io;
mod synth;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use io::{
    load_course, load_course_dir, write_course, ACTIVITY_FILE, DEMOGRAPHICS_FILE, GRADES_FILE,
    META_FILE,
};
pub use synth::{synthesize_corpus, synthesize_course, CorpusConfig, SynthConfig};

/// Names of the per-day clickstream counters, in file and feature order.
pub const CLICKSTREAM_FEATURES: [&str; 31] = [
    "avg_dt",
    "sdv_dt",
    "max_dt",
    "n_dt",
    "sum_dt",
    "nevents",
    "nprogcheck",
    "nshow_answer",
    "nvideo",
    "nproblem_check",
    "nforum",
    "ntranscript",
    "nseq_goto",
    "nseek_video",
    "npause_video",
    "nvideos_viewed",
    "nvideos_watched_sec",
    "nforum_reads",
    "nforum_posts",
    "nforum_threads",
    "nproblems_answered",
    "nproblems_attempted",
    "nproblems_multiplechoice",
    "nproblems_choice",
    "problems_numerical",
    "nproblems_option",
    "problems_custom",
    "nproblems_string",
    "problems_mixed",
    "nproblems_formula",
    "problems_other",
];

pub const N_COUNTERS: usize = CLICKSTREAM_FEATURES.len();

/// Index of `nevents` in [`CLICKSTREAM_FEATURES`].
pub const NEVENTS: usize = 5;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{file}: missing column `{column}`")]
    MissingColumn { file: String, column: String },
    #[error("{file}: row {row}, column `{column}`: bad date `{value}`")]
    BadDate {
        file: String,
        row: usize,
        column: String,
        value: String,
    },
    #[error("{file}: row {row}, column `{column}`: bad value `{value}`")]
    BadValue {
        file: String,
        row: usize,
        column: String,
        value: String,
    },
    #[error("{file}: row {row}, column `{column}`: negative counter {value}")]
    NegativeCounter {
        file: String,
        row: usize,
        column: String,
        value: f64,
    },
    #[error("{file}: row {row}: duplicate activity for student `{student}` on {date}")]
    DuplicateStudentDay {
        file: String,
        row: usize,
        student: String,
        date: NaiveDate,
    },
    #[error("duplicate student `{0}`")]
    DuplicateStudent(String),
    #[error("activity references unknown student `{0}`")]
    UnknownStudent(String),
    #[error("activity for `{student}` on {date} lies outside the course dates")]
    DateOutOfRange { student: String, date: NaiveDate },
    #[error("invalid course metadata: {0}")]
    BadMeta(String),
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("duplicate course id `{0}`")]
    DuplicateCourseId(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
}

/// Discipline a course belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Field {
    SocialSci,
    Hum,
    #[serde(rename = "STEM")]
    Stem,
    HealthSci,
}

impl Field {
    pub const ALL: [Field; 4] = [Field::SocialSci, Field::Hum, Field::Stem, Field::HealthSci];

    pub fn as_str(self) -> &'static str {
        match self {
            Field::SocialSci => "SocialSci",
            Field::Hum => "Hum",
            Field::Stem => "STEM",
            Field::HealthSci => "HealthSci",
        }
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Field {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "SocialSci" => Ok(Field::SocialSci),
            "Hum" => Ok(Field::Hum),
            "STEM" | "Stem" => Ok(Field::Stem),
            "HealthSci" => Ok(Field::HealthSci),
            other => Err(format!("unknown field `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CourseMeta {
    pub course_id: String,
    /// First day of instruction.
    pub launch_date: NaiveDate,
    pub end_date: NaiveDate,
    /// Earliest date at which full certification points can be attained.
    pub t100_date: NaiveDate,
    pub cert_threshold: f64,
    pub field: Field,
}

impl CourseMeta {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.course_id.is_empty() {
            return Err(DatasetError::BadMeta("empty course_id".into()));
        }
        if !(self.launch_date < self.t100_date && self.t100_date <= self.end_date) {
            return Err(DatasetError::BadMeta(format!(
                "{}: need launch < t100 <= end, got {} / {} / {}",
                self.course_id, self.launch_date, self.t100_date, self.end_date
            )));
        }
        if !(self.cert_threshold > 0.0 && self.cert_threshold <= 1.0) {
            return Err(DatasetError::BadMeta(format!(
                "{}: cert_threshold {} not in (0, 1]",
                self.course_id, self.cert_threshold
            )));
        }
        Ok(())
    }

    pub fn contains(&self, date: NaiveDate) -> bool {
        self.launch_date <= date && date <= self.end_date
    }
}

/// Self-reported level of education.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Education {
    Elementary,
    JuniorHigh,
    HighSchool,
    Associate,
    Bachelor,
    Master,
    Professional,
}

impl Education {
    pub const ALL: [Education; 7] = [
        Education::Elementary,
        Education::JuniorHigh,
        Education::HighSchool,
        Education::Associate,
        Education::Bachelor,
        Education::Master,
        Education::Professional,
    ];

    /// Code used in the demographics file (edX `LoE` codes).
    pub fn code(self) -> &'static str {
        match self {
            Education::Elementary => "el",
            Education::JuniorHigh => "jhs",
            Education::HighSchool => "hs",
            Education::Associate => "a",
            Education::Bachelor => "b",
            Education::Master => "m",
            Education::Professional => "p",
        }
    }

    /// Parses an edX code or spelled-out name. Anything else, including the
    /// doctorate codes `p_se`/`p_oth`, is treated as no response.
    pub fn parse(s: &str) -> Option<Education> {
        match s.trim().to_ascii_lowercase().as_str() {
            "el" | "elementary" => Some(Education::Elementary),
            "jhs" | "juniorhigh" | "junior_high" => Some(Education::JuniorHigh),
            "hs" | "highschool" | "high_school" => Some(Education::HighSchool),
            "a" | "associate" => Some(Education::Associate),
            "b" | "bachelor" => Some(Education::Bachelor),
            "m" | "master" => Some(Education::Master),
            "p" | "professional" => Some(Education::Professional),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Gender {
    Male,
    Female,
    Other,
}

impl Gender {
    pub const ALL: [Gender; 3] = [Gender::Male, Gender::Female, Gender::Other];

    pub fn code(self) -> &'static str {
        match self {
            Gender::Male => "m",
            Gender::Female => "f",
            Gender::Other => "o",
        }
    }

    pub fn parse(s: &str) -> Option<Gender> {
        match s.trim().to_ascii_lowercase().as_str() {
            "m" | "male" => Some(Gender::Male),
            "f" | "female" => Some(Gender::Female),
            "o" | "other" => Some(Gender::Other),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Continent {
    Europe,
    Oceania,
    Africa,
    Asia,
    Americas,
    NorthAmerica,
    SouthAmerica,
}

impl Continent {
    pub const ALL: [Continent; 7] = [
        Continent::Europe,
        Continent::Oceania,
        Continent::Africa,
        Continent::Asia,
        Continent::Americas,
        Continent::NorthAmerica,
        Continent::SouthAmerica,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Continent::Europe => "Europe",
            Continent::Oceania => "Oceania",
            Continent::Africa => "Africa",
            Continent::Asia => "Asia",
            Continent::Americas => "Americas",
            Continent::NorthAmerica => "North America",
            Continent::SouthAmerica => "South America",
        }
    }

    pub fn parse(s: &str) -> Option<Continent> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "europe" => Some(Continent::Europe),
            "oceania" => Some(Continent::Oceania),
            "africa" => Some(Continent::Africa),
            "asia" => Some(Continent::Asia),
            "americas" => Some(Continent::Americas),
            "northamerica" => Some(Continent::NorthAmerica),
            "southamerica" => Some(Continent::SouthAmerica),
            _ => None,
        }
    }
}

/// Per-student registration record. `None` means no response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentDemographics {
    pub student_id: String,
    pub yob: Option<i32>,
    pub loe: Option<Education>,
    pub gender: Option<Gender>,
    pub continent: Option<Continent>,
    pub took_precourse_survey: bool,
}

impl StudentDemographics {
    pub fn anonymous(student_id: impl Into<String>) -> Self {
        StudentDemographics {
            student_id: student_id.into(),
            yob: None,
            loe: None,
            gender: None,
            continent: None,
            took_precourse_survey: false,
        }
    }
}

/// The 31 per-day clickstream counters, indexed as [`CLICKSTREAM_FEATURES`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Counters(pub [f64; N_COUNTERS]);

impl Default for Counters {
    fn default() -> Self {
        Counters([0.0; N_COUNTERS])
    }
}

impl Counters {
    pub fn get(&self, name: &str) -> Option<f64> {
        CLICKSTREAM_FEATURES
            .iter()
            .position(|&n| n == name)
            .map(|i| self.0[i])
    }

    pub fn nevents(&self) -> f64 {
        self.0[NEVENTS]
    }

    pub fn with(mut self, name: &str, value: f64) -> Self {
        let i = CLICKSTREAM_FEATURES
            .iter()
            .position(|&n| n == name)
            .unwrap_or_else(|| panic!("unknown counter `{name}`"));
        self.0[i] = value;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityDay {
    pub student_id: String,
    pub date: NaiveDate,
    pub counters: Counters,
}

/// One course: metadata, enrolled students, their daily activity and final
/// grades. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct CourseData {
    meta: CourseMeta,
    students: Vec<StudentDemographics>,
    activity: Vec<ActivityDay>,
    final_grade: BTreeMap<String, f64>,
    index: HashMap<String, Range<usize>>,
}

impl CourseData {
    /// Validates and indexes a course. Students are sorted by id and activity
    /// by (student, date).
    pub fn new(
        meta: CourseMeta,
        mut students: Vec<StudentDemographics>,
        mut activity: Vec<ActivityDay>,
        final_grade: BTreeMap<String, f64>,
    ) -> Result<Self, DatasetError> {
        meta.validate()?;
        students.sort_by(|a, b| a.student_id.cmp(&b.student_id));
        for pair in students.windows(2) {
            if pair[0].student_id == pair[1].student_id {
                return Err(DatasetError::DuplicateStudent(pair[0].student_id.clone()));
            }
        }
        let known = |id: &str| {
            students
                .binary_search_by(|s| s.student_id.as_str().cmp(id))
                .is_ok()
        };
        for (row, day) in activity.iter().enumerate() {
            if !known(&day.student_id) {
                return Err(DatasetError::UnknownStudent(day.student_id.clone()));
            }
            if !meta.contains(day.date) {
                return Err(DatasetError::DateOutOfRange {
                    student: day.student_id.clone(),
                    date: day.date,
                });
            }
            for (k, &v) in day.counters.0.iter().enumerate() {
                if !(v >= 0.0) || !v.is_finite() {
                    return Err(DatasetError::NegativeCounter {
                        file: "activity".into(),
                        row: row + 1,
                        column: CLICKSTREAM_FEATURES[k].into(),
                        value: v,
                    });
                }
            }
        }
        activity.sort_by(|a, b| (&a.student_id, a.date).cmp(&(&b.student_id, b.date)));
        if let Some(i) = (1..activity.len()).find(|&i| {
            activity[i].student_id == activity[i - 1].student_id
                && activity[i].date == activity[i - 1].date
        }) {
            return Err(DatasetError::DuplicateStudentDay {
                file: "activity".into(),
                row: i + 1,
                student: activity[i].student_id.clone(),
                date: activity[i].date,
            });
        }
        let mut index = HashMap::new();
        let mut start = 0;
        for i in 1..=activity.len() {
            if i == activity.len() || activity[i].student_id != activity[start].student_id {
                index.insert(activity[start].student_id.clone(), start..i);
                start = i;
            }
        }
        for (id, &g) in &final_grade {
            if !(0.0..=1.0).contains(&g) {
                return Err(DatasetError::BadValue {
                    file: "grades".into(),
                    row: 0,
                    column: format!("final_grade[{id}]"),
                    value: g.to_string(),
                });
            }
        }
        Ok(CourseData {
            meta,
            students,
            activity,
            final_grade,
            index,
        })
    }

    pub fn meta(&self) -> &CourseMeta {
        &self.meta
    }

    pub fn id(&self) -> &str {
        &self.meta.course_id
    }

    /// Students sorted by id.
    pub fn students(&self) -> &[StudentDemographics] {
        &self.students
    }

    pub fn student(&self, id: &str) -> Option<&StudentDemographics> {
        self.students
            .binary_search_by(|s| s.student_id.as_str().cmp(id))
            .ok()
            .map(|i| &self.students[i])
    }

    pub fn n_students(&self) -> usize {
        self.students.len()
    }

    /// All activity, sorted by (student, date).
    pub fn activity(&self) -> &[ActivityDay] {
        &self.activity
    }

    /// Activity of one student sorted by date; empty for unknown or inactive students.
    pub fn activity_of(&self, student_id: &str) -> &[ActivityDay] {
        match self.index.get(student_id) {
            Some(r) => &self.activity[r.clone()],
            None => &[],
        }
    }

    pub fn final_grades(&self) -> &BTreeMap<String, f64> {
        &self.final_grade
    }

    /// Recorded grade, or 0 when the student has none.
    pub fn final_grade(&self, student_id: &str) -> f64 {
        self.final_grade.get(student_id).copied().unwrap_or(0.0)
    }

    /// Same course with a different set of final grades.
    pub fn with_final_grades(&self, grades: BTreeMap<String, f64>) -> Result<Self, DatasetError> {
        CourseData::new(
            self.meta.clone(),
            self.students.clone(),
            self.activity.clone(),
            grades,
        )
    }

    pub fn into_parts(
        self,
    ) -> (
        CourseMeta,
        Vec<StudentDemographics>,
        Vec<ActivityDay>,
        BTreeMap<String, f64>,
    ) {
        (self.meta, self.students, self.activity, self.final_grade)
    }
}

/// Binary outcome per student: `1` certified, `0` dropped out.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    pub course_id: String,
    pub labels: BTreeMap<String, u8>,
}

impl LabelSet {
    pub fn get(&self, student_id: &str) -> Option<u8> {
        self.labels.get(student_id).copied()
    }

    pub fn n_positive(&self) -> usize {
        self.labels.values().filter(|&&l| l == 1).count()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Certification labels: a student is positive iff their final grade reaches
/// the course threshold. Missing grades count as 0.
pub fn derive_labels(course: &CourseData) -> LabelSet {
    let threshold = course.meta.cert_threshold;
    let labels = course
        .students
        .iter()
        .map(|s| {
            let certified = course.final_grade(&s.student_id) >= threshold;
            (s.student_id.clone(), u8::from(certified))
        })
        .collect();
    LabelSet {
        course_id: course.meta.course_id.clone(),
        labels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn date(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    fn meta(threshold: f64) -> CourseMeta {
        CourseMeta {
            course_id: "C1".into(),
            launch_date: date("2016-01-04"),
            end_date: date("2016-03-28"),
            t100_date: date("2016-03-14"),
            cert_threshold: threshold,
            field: Field::Stem,
        }
    }

    fn course_with_grades(grades: &[(&str, f64)], students: &[&str]) -> CourseData {
        CourseData::new(
            meta(0.7),
            students.iter().map(|s| StudentDemographics::anonymous(*s)).collect(),
            vec![],
            grades.iter().map(|(s, g)| (s.to_string(), *g)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn threshold_is_inclusive() {
        let c = course_with_grades(&[("a", 0.70), ("b", 0.69)], &["a", "b", "c"]);
        let l = derive_labels(&c);
        assert_eq!(l.get("a"), Some(1));
        assert_eq!(l.get("b"), Some(0));
        // absent from grades
        assert_eq!(l.get("c"), Some(0));
    }

    #[test]
    fn rejects_bad_meta() {
        let mut m = meta(0.7);
        m.t100_date = m.launch_date;
        assert!(matches!(m.validate(), Err(DatasetError::BadMeta(_))));
        let m = meta(0.0);
        assert!(matches!(m.validate(), Err(DatasetError::BadMeta(_))));
        let m = meta(1.0);
        assert!(m.validate().is_ok());
    }

    #[test]
    fn rejects_unknown_student_and_duplicates() {
        let day = |s: &str, d: &str| ActivityDay {
            student_id: s.into(),
            date: date(d),
            counters: Counters::default(),
        };
        let err = CourseData::new(
            meta(0.7),
            vec![StudentDemographics::anonymous("a")],
            vec![day("zz", "2016-01-05")],
            BTreeMap::new(),
        )
        .unwrap_err();
        assert!(matches!(err, DatasetError::UnknownStudent(_)));

        let err = CourseData::new(
            meta(0.7),
            vec![StudentDemographics::anonymous("a")],
            vec![day("a", "2016-01-05"), day("a", "2016-01-05")],
            BTreeMap::new(),
        )
        .unwrap_err();
        assert!(matches!(err, DatasetError::DuplicateStudentDay { .. }));

        let err = CourseData::new(
            meta(0.7),
            vec![StudentDemographics::anonymous("a")],
            vec![day("a", "2015-12-31")],
            BTreeMap::new(),
        )
        .unwrap_err();
        assert!(matches!(err, DatasetError::DateOutOfRange { .. }));
    }

    #[test]
    fn activity_is_indexed_per_student() {
        let day = |s: &str, d: &str, n: f64| ActivityDay {
            student_id: s.into(),
            date: date(d),
            counters: Counters::default().with("nevents", n),
        };
        let c = CourseData::new(
            meta(0.7),
            vec![
                StudentDemographics::anonymous("b"),
                StudentDemographics::anonymous("a"),
                StudentDemographics::anonymous("c"),
            ],
            vec![
                day("b", "2016-01-07", 2.0),
                day("a", "2016-01-06", 1.0),
                day("b", "2016-01-05", 3.0),
            ],
            BTreeMap::new(),
        )
        .unwrap();
        assert_eq!(c.students()[0].student_id, "a");
        let b = c.activity_of("b");
        assert_eq!(b.len(), 2);
        assert!(b[0].date < b[1].date);
        assert!(c.activity_of("c").is_empty());
    }

    #[test]
    fn enum_codes_parse_back() {
        for e in Education::ALL {
            assert_eq!(Education::parse(e.code()), Some(e));
        }
        assert_eq!(Education::parse("p_se"), None);
        for g in Gender::ALL {
            assert_eq!(Gender::parse(g.code()), Some(g));
        }
        for c in Continent::ALL {
            assert_eq!(Continent::parse(c.name()), Some(c));
        }
        for f in Field::ALL {
            assert_eq!(f.as_str().parse::<Field>(), Ok(f));
        }
    }
}
