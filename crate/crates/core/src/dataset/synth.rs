//! Seeded synthetic MOOC generator.
//!
//! Each student draws an initial engagement from a Beta distribution, nudged
//! on the logit scale by a weak demographic effect. Engagement decays
//! geometrically with per-day random shocks. A day is active with
//! probability equal to the current engagement; active days emit Poisson
//! counters scaled by engagement. Problems are released weekly up to
//! T100; on an active day the student works off part of the open backlog,
//! and the final grade is the fraction of all problems answered correctly.
//! Certification therefore requires persisting until the last release and
//! enough ability, which shows up in answer checks and reveals.

use std::collections::{BTreeMap, HashSet};

use chrono::{Days, NaiveDate};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Binomial, Distribution, Exp1, Gamma, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::{
    ActivityDay, Continent, CourseData, CourseMeta, Counters, DatasetError, Education, Field,
    Gender, StudentDemographics, N_COUNTERS,
};
use crate::seed::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub course_id: String,
    pub field: Field,
    pub n_students: usize,
    pub launch_date: NaiveDate,
    /// Weeks from launch to T100.
    pub weeks_to_t100: u32,
    /// Weeks the course stays open after T100.
    pub weeks_after_t100: u32,
    pub cert_threshold: f64,
    /// Beta(alpha, beta) shape of initial engagement.
    pub engagement_alpha: f64,
    pub engagement_beta: f64,
    /// Mean per-day engagement decay rate; 0 keeps engagement constant.
    pub daily_decay: f64,
    pub problems_per_week: u32,
    /// Scale of the demographic shift on the engagement logit.
    pub demographic_effect: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            course_id: "SYN101x".into(),
            field: Field::Stem,
            n_students: 2000,
            launch_date: NaiveDate::from_ymd_opt(2016, 1, 11).expect("valid date"),
            weeks_to_t100: 8,
            weeks_after_t100: 2,
            cert_threshold: 0.7,
            engagement_alpha: 1.2,
            engagement_beta: 1.8,
            daily_decay: 0.08,
            problems_per_week: 10,
            demographic_effect: 0.35,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |msg: String| Err(DatasetError::BadConfig(format!("{}: {msg}", self.course_id)));
        if self.course_id.is_empty() {
            return Err(DatasetError::BadConfig("empty course_id".into()));
        }
        if self.weeks_to_t100 == 0 {
            return bad("weeks_to_t100 must be positive".into());
        }
        if self.problems_per_week == 0 {
            return bad("problems_per_week must be positive".into());
        }
        if !(self.engagement_alpha > 0.0 && self.engagement_beta > 0.0) {
            return bad("engagement shape parameters must be positive".into());
        }
        if !(self.daily_decay >= 0.0 && self.daily_decay.is_finite()) {
            return bad(format!("daily_decay {} must be >= 0", self.daily_decay));
        }
        if !(self.cert_threshold > 0.0 && self.cert_threshold <= 1.0) {
            return bad(format!("cert_threshold {} not in (0, 1]", self.cert_threshold));
        }
        if !self.demographic_effect.is_finite() {
            return bad("demographic_effect must be finite".into());
        }
        self.t100_date()?;
        self.end_date()?;
        Ok(())
    }

    fn t100_date(&self) -> Result<NaiveDate, DatasetError> {
        self.launch_date
            .checked_add_days(Days::new(7 * u64::from(self.weeks_to_t100)))
            .ok_or_else(|| DatasetError::BadConfig("t100 date overflows".into()))
    }

    fn end_date(&self) -> Result<NaiveDate, DatasetError> {
        self.t100_date()?
            .checked_add_days(Days::new(7 * u64::from(self.weeks_after_t100)))
            .ok_or_else(|| DatasetError::BadConfig("end date overflows".into()))
    }

    pub fn meta(&self) -> Result<CourseMeta, DatasetError> {
        Ok(CourseMeta {
            course_id: self.course_id.clone(),
            launch_date: self.launch_date,
            end_date: self.end_date()?,
            t100_date: self.t100_date()?,
            cert_threshold: self.cert_threshold,
            field: self.field,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub courses: Vec<SynthConfig>,
}

impl CorpusConfig {
    /// Eight courses, two per field, 2000 to 3400 students each, with
    /// differing lengths, thresholds and decay rates.
    pub fn standard() -> Self {
        let rows: [(&str, Field, usize, u32, f64, f64, f64, f64); 8] = [
            ("SOC1x", Field::SocialSci, 3400, 8, 0.70, 0.080, 1.2, 1.8),
            ("SOC2x", Field::SocialSci, 2200, 7, 0.65, 0.090, 1.1, 2.0),
            ("HUM1x", Field::Hum, 2600, 9, 0.70, 0.070, 1.0, 2.2),
            ("HUM2x", Field::Hum, 2000, 8, 0.75, 0.080, 1.3, 1.7),
            ("STEM1x", Field::Stem, 3000, 10, 0.70, 0.060, 1.0, 2.0),
            ("STEM2x", Field::Stem, 2400, 8, 0.80, 0.075, 1.4, 1.6),
            ("HLT1x", Field::HealthSci, 2800, 9, 0.65, 0.070, 1.2, 2.0),
            ("HLT2x", Field::HealthSci, 2100, 7, 0.70, 0.100, 1.5, 1.5),
        ];
        let base = SynthConfig::default();
        let courses = rows
            .iter()
            .enumerate()
            .map(|(i, &(id, field, n, weeks, thr, decay, a, b))| SynthConfig {
                course_id: id.into(),
                field,
                n_students: n,
                launch_date: base
                    .launch_date
                    .checked_add_days(Days::new(7 * i as u64))
                    .expect("valid date"),
                weeks_to_t100: weeks,
                cert_threshold: thr,
                daily_decay: decay,
                engagement_alpha: a,
                engagement_beta: b,
                ..base.clone()
            })
            .collect();
        CorpusConfig { courses }
    }

    /// Four small courses, two in each of two fields, so every paradigm
    /// has a source.
    pub fn quick() -> Self {
        let mut courses: Vec<SynthConfig> = [Field::Stem, Field::Stem, Field::Hum, Field::Hum]
            .iter()
            .enumerate()
            .map(|(i, &field)| SynthConfig {
                course_id: format!("Q{}-{}", i + 1, field),
                field,
                n_students: 400,
                weeks_to_t100: 5 + i as u32 % 2,
                ..SynthConfig::default()
            })
            .collect();
        courses[1].daily_decay = 0.04;
        courses[3].cert_threshold = 0.6;
        CorpusConfig { courses }
    }
}

fn poisson<R: Rng>(rng: &mut R, lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 0.0;
    }
    Poisson::new(lambda).expect("positive rate").sample(rng)
}

fn gamma<R: Rng>(rng: &mut R, shape: f64, scale: f64) -> f64 {
    Gamma::new(shape, scale).expect("positive parameters").sample(rng)
}

fn binomial<R: Rng>(rng: &mut R, n: u64, p: f64) -> u64 {
    if n == 0 {
        return 0;
    }
    Binomial::new(n, p.clamp(0.0, 1.0))
        .expect("valid probability")
        .sample(rng)
}

/// Draws an index from unnormalized weights.
fn categorical<R: Rng>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-9, 1.0 - 1e-9);
    (p / (1.0 - p)).ln()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

struct Demographics {
    record: StudentDemographics,
    /// Additive shift on the engagement logit, roughly centred at zero.
    shift: f64,
}

fn draw_demographics<R: Rng>(rng: &mut R, student_id: String) -> Demographics {
    let mut shift = 0.0;
    let yob = if rng.gen_bool(0.08) {
        None
    } else {
        let age: f64 = Normal::new(30.0, 10.0).expect("valid normal").sample(rng);
        let age = age.clamp(12.0, 75.0).round();
        shift += (age - 30.0) / 25.0;
        Some(2012 - age as i32)
    };
    // el, jhs, hs, a, b, m, p
    const LOE_WEIGHTS: [f64; 7] = [0.02, 0.03, 0.22, 0.07, 0.34, 0.24, 0.08];
    const LOE_SHIFT: [f64; 7] = [-1.0, -0.8, -0.4, -0.1, 0.2, 0.4, 0.5];
    let loe = if rng.gen_bool(0.1) {
        shift -= 0.3;
        None
    } else {
        let i = categorical(rng, &LOE_WEIGHTS);
        shift += LOE_SHIFT[i];
        Some(Education::ALL[i])
    };
    let gender = if rng.gen_bool(0.08) {
        None
    } else {
        let i = categorical(rng, &[0.56, 0.42, 0.02]);
        shift += [0.0, 0.15, 0.0][i];
        Some(Gender::ALL[i])
    };
    const CONTINENT_WEIGHTS: [f64; 7] = [0.24, 0.03, 0.08, 0.22, 0.02, 0.30, 0.11];
    const CONTINENT_SHIFT: [f64; 7] = [0.2, 0.2, -0.3, 0.0, 0.0, 0.1, -0.1];
    let continent = if rng.gen_bool(0.1) {
        None
    } else {
        let i = categorical(rng, &CONTINENT_WEIGHTS);
        shift += CONTINENT_SHIFT[i];
        Some(Continent::ALL[i])
    };
    Demographics {
        record: StudentDemographics {
            student_id,
            yob,
            loe,
            gender,
            continent,
            took_precourse_survey: false,
        },
        shift,
    }
}

/// Problem-type split of answered problems.
const PROBLEM_TYPES: [(usize, f64); 9] = [
    (22, 0.40), // nproblems_multiplechoice
    (23, 0.15), // nproblems_choice
    (24, 0.15), // problems_numerical
    (25, 0.08), // nproblems_option
    (26, 0.05), // problems_custom
    (27, 0.05), // nproblems_string
    (28, 0.04), // problems_mixed
    (29, 0.05), // nproblems_formula
    (30, 0.03), // problems_other
];

fn active_day_counters<R: Rng>(rng: &mut R, e: f64, ability: f64, attempts: u64) -> Counters {
    let a = attempts as f64;
    let mut c = [0.0; N_COUNTERS];
    let sessions = 1.0 + poisson(rng, 2.0 * e);
    let sum_dt = gamma(rng, 2.0 * sessions, 150.0 + 600.0 * e);
    let avg_dt = sum_dt / sessions;
    let spread: f64 = rng.gen();
    c[0] = avg_dt;
    c[1] = if sessions > 1.0 { 0.5 * avg_dt * spread } else { 0.0 };
    c[2] = sum_dt.min(avg_dt * (1.0 + spread));
    c[3] = sessions;
    c[4] = sum_dt;
    c[5] = 1.0 + poisson(rng, 30.0 * e + 3.0 * a);
    c[6] = poisson(rng, 0.3 * e);
    c[7] = poisson(rng, (1.0 - ability) * a);
    c[8] = poisson(rng, 6.0 * e);
    // weaker students re-check answers more often
    c[9] = a + poisson(rng, 2.0 * (1.0 - ability) * a);
    c[10] = poisson(rng, 1.5 * e);
    c[11] = poisson(rng, 0.5 * e);
    c[12] = poisson(rng, 4.0 * e);
    c[13] = poisson(rng, 2.0 * e);
    c[14] = poisson(rng, 3.0 * e);
    c[15] = poisson(rng, 2.0 * e);
    c[16] = if c[15] > 0.0 {
        gamma(rng, 2.0 * c[15], 150.0)
    } else {
        0.0
    };
    c[17] = poisson(rng, 1.2 * e);
    c[18] = poisson(rng, 0.1 * e);
    c[19] = poisson(rng, 0.03 * e);
    c[20] = a;
    c[21] = a;
    // sequential binomial split into problem types
    let mut remaining = attempts;
    let mut mass_left = 1.0;
    for (k, &(col, p)) in PROBLEM_TYPES.iter().enumerate() {
        let n = if k + 1 == PROBLEM_TYPES.len() {
            remaining
        } else {
            binomial(rng, remaining, p / mass_left)
        };
        c[col] = n as f64;
        remaining -= n;
        mass_left -= p;
    }
    Counters(c)
}

/// Generates one course. Output depends only on `(config, seed)`.
pub fn synthesize_course(config: &SynthConfig, seed: u64) -> Result<CourseData, DatasetError> {
    config.validate()?;
    let meta = config.meta()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let engagement_dist = Beta::new(config.engagement_alpha, config.engagement_beta)
        .map_err(|e| DatasetError::BadConfig(format!("{}: {e}", config.course_id)))?;
    let ability_dist = Beta::new(3.0, 2.0).expect("valid beta");
    let heterogeneity = Gamma::new(2.0, 0.5).expect("valid gamma");

    let n_days = (meta.end_date - meta.launch_date).num_days() + 1;
    let total_problems = u64::from(config.problems_per_week) * u64::from(config.weeks_to_t100);
    let width = (config.n_students.max(1) - 1).to_string().len().max(5);

    let mut students = Vec::with_capacity(config.n_students);
    let mut activity = Vec::new();
    let mut grades = BTreeMap::new();
    for i in 0..config.n_students {
        let student_id = format!("{}-s{:0width$}", config.course_id, i);
        let demo = draw_demographics(&mut rng, student_id.clone());
        let e0: f64 = engagement_dist.sample(&mut rng);
        let mut e = sigmoid(logit(e0) + config.demographic_effect * demo.shift);
        let mut record = demo.record;
        record.took_precourse_survey = rng.gen_bool((0.15 + 0.5 * e).min(1.0));
        students.push(record);

        let ability = 0.5 + 0.5 * ability_dist.sample(&mut rng);
        let decay = config.daily_decay * heterogeneity.sample(&mut rng);
        let mut answered = 0u64;
        let mut correct = 0u64;
        for day in 0..n_days {
            let released = (u64::from(config.problems_per_week) * (day as u64 / 7 + 1))
                .min(total_problems);
            if rng.gen_bool(e.clamp(0.0, 1.0)) {
                let backlog = released - answered;
                let attempts = binomial(&mut rng, backlog, 0.3 + 0.7 * e);
                answered += attempts;
                correct += binomial(&mut rng, attempts, ability);
                activity.push(ActivityDay {
                    student_id: student_id.clone(),
                    date: meta.launch_date + Days::new(day as u64),
                    counters: active_day_counters(&mut rng, e, ability, attempts),
                });
            }
            let shock: f64 = Exp1.sample(&mut rng);
            e *= (-decay * shock).exp();
        }
        grades.insert(student_id, correct as f64 / total_problems as f64);
    }
    CourseData::new(meta, students, activity, grades)
}

/// Generates independent courses, each seeded from `seed` and its position.
pub fn synthesize_corpus(config: &CorpusConfig, seed: u64) -> Result<Vec<CourseData>, DatasetError> {
    let mut seen = HashSet::new();
    for c in &config.courses {
        if !seen.insert(c.course_id.as_str()) {
            return Err(DatasetError::DuplicateCourseId(c.course_id.clone()));
        }
    }
    config
        .courses
        .iter()
        .enumerate()
        .map(|(i, c)| synthesize_course(c, derive_seed(seed, &[i as u64])))
        .collect()
}
