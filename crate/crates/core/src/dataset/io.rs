//! CSV ingestion and emission for the four per-course tables.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use chrono::NaiveDate;

use super::{
    ActivityDay, Continent, CourseData, CourseMeta, Counters, DatasetError, Education, Gender,
    StudentDemographics, CLICKSTREAM_FEATURES, N_COUNTERS,
};

pub const META_FILE: &str = "course_meta.csv";
pub const DEMOGRAPHICS_FILE: &str = "demographics.csv";
pub const ACTIVITY_FILE: &str = "activity.csv";
pub const GRADES_FILE: &str = "grades.csv";

const DATE_FORMAT: &str = "%Y-%m-%d";

/// A CSV table addressed by column name.
struct Table {
    path: String,
    header: csv::StringRecord,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    fn read(path: &Path) -> Result<Table, DatasetError> {
        let display = path.display().to_string();
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|source| DatasetError::Csv {
                path: display.clone(),
                source,
            })?;
        let header = reader
            .headers()
            .map_err(|source| DatasetError::Csv {
                path: display.clone(),
                source,
            })?
            .clone();
        let rows = reader
            .records()
            .collect::<Result<Vec<_>, _>>()
            .map_err(|source| DatasetError::Csv {
                path: display.clone(),
                source,
            })?;
        Ok(Table {
            path: display,
            header,
            rows,
        })
    }

    fn column(&self, name: &str) -> Result<usize, DatasetError> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DatasetError::MissingColumn {
                file: self.path.clone(),
                column: name.to_string(),
            })
    }

    /// 1-based line number of a data row in the file (the header is line 1).
    fn line(&self, i: usize) -> usize {
        self.rows[i]
            .position()
            .map(|p| p.line() as usize)
            .unwrap_or(i + 2)
    }

    fn date(&self, i: usize, col: usize) -> Result<NaiveDate, DatasetError> {
        let value = &self.rows[i][col];
        NaiveDate::parse_from_str(value, DATE_FORMAT).map_err(|_| DatasetError::BadDate {
            file: self.path.clone(),
            row: self.line(i),
            column: self.header[col].to_string(),
            value: value.to_string(),
        })
    }

    fn number(&self, i: usize, col: usize) -> Result<f64, DatasetError> {
        let value = &self.rows[i][col];
        value
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| DatasetError::BadValue {
                file: self.path.clone(),
                row: self.line(i),
                column: self.header[col].to_string(),
                value: value.to_string(),
            })
    }

    fn bad_value(&self, i: usize, col: usize) -> DatasetError {
        DatasetError::BadValue {
            file: self.path.clone(),
            row: self.line(i),
            column: self.header[col].to_string(),
            value: self.rows[i][col].to_string(),
        }
    }
}

fn read_meta(path: &Path) -> Result<CourseMeta, DatasetError> {
    let t = Table::read(path)?;
    let id = t.column("course_id")?;
    let launch = t.column("launch_date")?;
    let end = t.column("end_date")?;
    let t100 = t.column("t100_date")?;
    let threshold = t.column("cert_threshold")?;
    let field = t.column("field")?;
    if t.rows.len() != 1 {
        return Err(DatasetError::BadMeta(format!(
            "{}: expected exactly one course row, found {}",
            t.path,
            t.rows.len()
        )));
    }
    let meta = CourseMeta {
        course_id: t.rows[0][id].to_string(),
        launch_date: t.date(0, launch)?,
        end_date: t.date(0, end)?,
        t100_date: t.date(0, t100)?,
        cert_threshold: t.number(0, threshold)?,
        field: t.rows[0][field].parse().map_err(|_| t.bad_value(0, field))?,
    };
    meta.validate()?;
    Ok(meta)
}

fn parse_yob(s: &str) -> Option<i32> {
    let v: f64 = s.parse().ok()?;
    (v.is_finite() && v.fract() == 0.0 && v.abs() < 1e5).then_some(v as i32)
}

fn read_demographics(path: &Path) -> Result<Vec<StudentDemographics>, DatasetError> {
    let t = Table::read(path)?;
    let id = t.column("student_id")?;
    let yob = t.column("yob")?;
    let loe = t.column("loe")?;
    let gender = t.column("gender")?;
    let continent = t.column("continent")?;
    let survey = t.column("precourse_survey")?;
    (0..t.rows.len())
        .map(|i| {
            let row = &t.rows[i];
            let took_precourse_survey = match &row[survey] {
                "" | "0" => false,
                "1" => true,
                _ => return Err(t.bad_value(i, survey)),
            };
            Ok(StudentDemographics {
                student_id: row[id].to_string(),
                yob: parse_yob(&row[yob]),
                loe: Education::parse(&row[loe]),
                gender: Gender::parse(&row[gender]),
                continent: Continent::parse(&row[continent]),
                took_precourse_survey,
            })
        })
        .collect()
}

fn read_activity(path: &Path) -> Result<Vec<ActivityDay>, DatasetError> {
    let t = Table::read(path)?;
    let id = t.column("student_id")?;
    let date = t.column("date")?;
    let counter_cols = CLICKSTREAM_FEATURES
        .iter()
        .map(|name| t.column(name))
        .collect::<Result<Vec<_>, _>>()?;
    let mut seen = HashSet::with_capacity(t.rows.len());
    let mut days = Vec::with_capacity(t.rows.len());
    for i in 0..t.rows.len() {
        let student_id = t.rows[i][id].to_string();
        let day = t.date(i, date)?;
        let mut counters = [0.0; N_COUNTERS];
        for (k, &col) in counter_cols.iter().enumerate() {
            let v = t.number(i, col)?;
            if v < 0.0 {
                return Err(DatasetError::NegativeCounter {
                    file: t.path.clone(),
                    row: t.line(i),
                    column: CLICKSTREAM_FEATURES[k].to_string(),
                    value: v,
                });
            }
            counters[k] = v;
        }
        if !seen.insert((student_id.clone(), day)) {
            return Err(DatasetError::DuplicateStudentDay {
                file: t.path.clone(),
                row: t.line(i),
                student: student_id,
                date: day,
            });
        }
        days.push(ActivityDay {
            student_id,
            date: day,
            counters: Counters(counters),
        });
    }
    Ok(days)
}

fn read_grades(path: &Path) -> Result<BTreeMap<String, f64>, DatasetError> {
    let t = Table::read(path)?;
    let id = t.column("student_id")?;
    let grade = t.column("final_grade")?;
    let mut grades = BTreeMap::new();
    for i in 0..t.rows.len() {
        let g = t.number(i, grade)?;
        if !(0.0..=1.0).contains(&g) {
            return Err(t.bad_value(i, grade));
        }
        grades.insert(t.rows[i][id].to_string(), g);
    }
    Ok(grades)
}

/// Reads one course from its four CSV tables.
pub fn load_course(
    meta_path: &Path,
    demographics_path: &Path,
    activity_path: &Path,
    grades_path: &Path,
) -> Result<CourseData, DatasetError> {
    let meta = read_meta(meta_path)?;
    let students = read_demographics(demographics_path)?;
    let activity = read_activity(activity_path)?;
    let grades = read_grades(grades_path)?;
    CourseData::new(meta, students, activity, grades)
}

/// Reads a course directory laid out as written by [`write_course`].
pub fn load_course_dir(dir: &Path) -> Result<CourseData, DatasetError> {
    load_course(
        &dir.join(META_FILE),
        &dir.join(DEMOGRAPHICS_FILE),
        &dir.join(ACTIVITY_FILE),
        &dir.join(GRADES_FILE),
    )
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>, DatasetError> {
    csv::Writer::from_path(path).map_err(|source| DatasetError::Csv {
        path: path.display().to_string(),
        source,
    })
}

fn write_rows<I>(path: &Path, header: &[&str], rows: I) -> Result<(), DatasetError>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let csv_err = |source| DatasetError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut w = writer(path)?;
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Writes the four tables into `dir` (created if absent). Rows are emitted
/// in the course's canonical order, so output is byte-stable.
pub fn write_course(course: &CourseData, dir: &Path) -> Result<(), DatasetError> {
    fs::create_dir_all(dir).map_err(|source| DatasetError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let m = course.meta();
    write_rows(
        &dir.join(META_FILE),
        &[
            "course_id",
            "launch_date",
            "end_date",
            "t100_date",
            "cert_threshold",
            "field",
        ],
        [vec![
            m.course_id.clone(),
            m.launch_date.format(DATE_FORMAT).to_string(),
            m.end_date.format(DATE_FORMAT).to_string(),
            m.t100_date.format(DATE_FORMAT).to_string(),
            m.cert_threshold.to_string(),
            m.field.to_string(),
        ]],
    )?;
    write_rows(
        &dir.join(DEMOGRAPHICS_FILE),
        &[
            "student_id",
            "yob",
            "loe",
            "gender",
            "continent",
            "precourse_survey",
        ],
        course.students().iter().map(|s| {
            vec![
                s.student_id.clone(),
                s.yob.map(|y| y.to_string()).unwrap_or_default(),
                s.loe.map(|e| e.code().to_string()).unwrap_or_default(),
                s.gender.map(|g| g.code().to_string()).unwrap_or_default(),
                s.continent.map(|c| c.name().to_string()).unwrap_or_default(),
                u8::from(s.took_precourse_survey).to_string(),
            ]
        }),
    )?;
    let mut header = vec!["student_id", "date"];
    header.extend(CLICKSTREAM_FEATURES);
    write_rows(
        &dir.join(ACTIVITY_FILE),
        &header,
        course.activity().iter().map(|d| {
            let mut row = Vec::with_capacity(N_COUNTERS + 2);
            row.push(d.student_id.clone());
            row.push(d.date.format(DATE_FORMAT).to_string());
            row.extend(d.counters.0.iter().map(|v| v.to_string()));
            row
        }),
    )?;
    write_rows(
        &dir.join(GRADES_FILE),
        &["student_id", "final_grade"],
        course
            .final_grades()
            .iter()
            .map(|(id, g)| vec![id.clone(), g.to_string()]),
    )
}
