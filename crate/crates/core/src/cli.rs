//! `dropoutlab` command-line front end.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors
//! (bad flags, malformed manifests, unknown paradigm names).

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    derive_labels, load_course_dir, synthesize_corpus, write_course, CorpusConfig, CourseData,
};
use crate::deepnet::{grow_and_train, CourseSplit, DeepError, GrowthPlan, SgdConfig, SweepReport};
use crate::evaluate::{emit_report, read_rows_csv, EvalReport};
use crate::features::{build_matrix, fit_percentile, fit_zscore, FeatureMatrix, NormStats};
use crate::linear::{train_logreg, OptimizerConfig};
use crate::paradigms::{run_experiment, week_date, ParadigmKind, RunConfig, TransferNorm, WeekIndex};
use crate::seed::derive_seed;

pub const SEED_ENV: &str = "DROPOUTLAB_SEED";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const BEST_MODEL_FILE: &str = "best_model.json";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "dropoutlab", version, about = "MOOC dropout prediction experiments on synthetic clickstream data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus, one directory of CSV tables per course.
    Synth(SynthArgs),
    /// Extract (and optionally normalize) the feature matrix of one course.
    Features(FeaturesArgs),
    /// Train a logistic-regression model on one course's certification labels.
    Train(TrainArgs),
    /// Run every paradigm of a manifest and write the evaluation report.
    Run(RunArgs),
    /// Grow a feed-forward network through the width and depth sweeps.
    Grow(GrowArgs),
    /// Rebuild aggregate and summary files from a rows CSV.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Quick,
    Standard,
}

impl Preset {
    fn config(self) -> CorpusConfig {
        match self {
            Preset::Quick => CorpusConfig::quick(),
            Preset::Standard => CorpusConfig::standard(),
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Corpus configuration (JSON); overrides --preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in corpus used when no --config is given.
    #[arg(long, value_enum, default_value_t = Preset::Quick)]
    pub preset: Preset,
    #[arg(long, env = SEED_ENV, default_value_t = 42)]
    pub seed: u64,
    /// Output directory; one subdirectory per course.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NormArg {
    None,
    Zscore,
    Percentile,
}

#[derive(Debug, Args)]
pub struct CourseDate {
    /// Course directory as written by `synth`.
    #[arg(long)]
    pub course: PathBuf,
    /// Week relative to T100 (0 = T100, -3 = three weeks earlier).
    #[arg(long, default_value_t = 0, allow_negative_numbers = true, conflicts_with = "as_of")]
    pub week: i32,
    /// Explicit cut-off date (YYYY-MM-DD) instead of --week.
    #[arg(long)]
    pub as_of: Option<NaiveDate>,
}

impl CourseDate {
    fn load(&self) -> CliResult<(CourseData, NaiveDate)> {
        let course = load_course_dir(&self.course).map_err(CliError::runtime)?;
        let date = match self.as_of {
            Some(d) => d,
            None => week_date(course.meta(), WeekIndex(self.week)).map_err(|e| CliError::Usage(e.to_string()))?,
        };
        Ok((course, date))
    }
}

#[derive(Debug, Args)]
pub struct FeaturesArgs {
    #[command(flatten)]
    pub at: CourseDate,
    #[arg(long, value_enum, default_value_t = NormArg::None)]
    pub norm: NormArg,
    /// Feature matrix CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Where to save the fitted normalization statistics (JSON).
    #[arg(long)]
    pub stats_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub at: CourseDate,
    /// Inverse L2 regularization strength.
    #[arg(long, default_value_t = 1.0)]
    pub reg_c: f64,
    /// Model file (JSON).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Experiment manifest (JSON).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Worker threads; output is identical for any value.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    pub jobs: u32,
}

#[derive(Debug, Args)]
pub struct GrowArgs {
    #[command(flatten)]
    pub at: CourseDate,
    /// Fraction of students held out for test metrics.
    #[arg(long, default_value_t = 0.5)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 2)]
    pub width_min: usize,
    #[arg(long, default_value_t = 15)]
    pub width_max: usize,
    #[arg(long, default_value_t = 2)]
    pub depth_min: usize,
    #[arg(long, default_value_t = 10)]
    pub depth_max: usize,
    /// Hidden width used for the depth sweep.
    #[arg(long, default_value_t = 5)]
    pub fixed_width: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    pub epochs: u64,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    pub minibatch: u64,
    /// Per-minibatch learning-rate annealing: lr / (1 + anneal)^k.
    #[arg(long, default_value_t = 1e-3)]
    pub anneal: f64,
    #[arg(long, default_value_t = 0.0)]
    pub momentum: f64,
    /// Weight each class's loss by n / (2 n_class).
    #[arg(long)]
    pub class_weighting: bool,
    #[arg(long, env = SEED_ENV, default_value_t = 42)]
    pub seed: u64,
    /// Write 0 for train_seconds so the report is byte-reproducible.
    #[arg(long)]
    pub no_timing: bool,
    /// Output directory for the sweep CSV and best model.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// rows.csv written by `run`.
    #[arg(long)]
    pub rows: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Declarative description of one experiment. Relative paths are resolved
/// against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub master_seed: u64,
    /// Corpus configuration to synthesize from; alternatively `corpus_dir`.
    #[serde(default)]
    pub corpus_config_path: Option<PathBuf>,
    /// Directory of course directories to load instead of synthesizing.
    #[serde(default)]
    pub corpus_dir: Option<PathBuf>,
    pub paradigms: Vec<String>,
    #[serde(rename = "reg_C", default = "default_c")]
    pub reg_c: f64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub growth_plan: Option<GrowthPlan>,
    #[serde(default)]
    pub holdout: Option<f64>,
    #[serde(default)]
    pub same_field_norm: TransferNorm,
}

fn default_c() -> f64 {
    1.0
}

impl RunManifest {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        let mut m: RunManifest = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        m.corpus_config_path.as_mut().map(resolve);
        m.corpus_dir.as_mut().map(resolve);
        resolve(&mut m.output_dir);
        Ok(m)
    }

    pub fn kinds(&self) -> CliResult<Vec<ParadigmKind>> {
        if self.paradigms.is_empty() {
            return Err(CliError::Usage("manifest lists no paradigms".into()));
        }
        self.paradigms
            .iter()
            .map(|p| p.parse().map_err(CliError::Usage))
            .collect()
    }

    fn corpus(&self) -> CliResult<Vec<CourseData>> {
        match (&self.corpus_config_path, &self.corpus_dir) {
            (Some(cfg), None) => synthesize_corpus(&read_corpus_config(cfg)?, self.master_seed)
                .map_err(CliError::runtime),
            (None, Some(dir)) => load_corpus_dir(dir),
            _ => Err(CliError::Usage(
                "manifest needs exactly one of corpus_config_path and corpus_dir".into(),
            )),
        }
    }
}

fn read_corpus_config(path: &Path) -> CliResult<CorpusConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Runtime(format!("bad config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Runtime(format!("bad config {}: {e}", path.display())))
}

/// Loads every subdirectory that holds a course, in name order.
pub fn load_corpus_dir(dir: &Path) -> CliResult<Vec<CourseData>> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(crate::dataset::META_FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::Runtime(format!("{}: no course directories", dir.display())));
    }
    dirs.iter()
        .map(|d| load_course_dir(d).map_err(CliError::runtime))
        .collect()
}

fn write_file(path: &Path, text: &str) -> CliResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::Runtime(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

pub fn cmd_synth(args: &SynthArgs) -> CliResult {
    let config = match &args.config {
        Some(p) => read_corpus_config(p)?,
        None => args.preset.config(),
    };
    let corpus = synthesize_corpus(&config, args.seed).map_err(CliError::runtime)?;
    for course in &corpus {
        write_course(course, &args.out.join(course.id())).map_err(CliError::runtime)?;
    }
    println!("wrote {} courses to {}", corpus.len(), args.out.display());
    Ok(())
}

fn normalize_with(m: &FeatureMatrix, norm: NormArg) -> CliResult<(Option<NormStats>, FeatureMatrix)> {
    let stats = match norm {
        NormArg::None => return Ok((None, m.clone())),
        NormArg::Zscore => fit_zscore(m),
        NormArg::Percentile => fit_percentile(m),
    }
    .map_err(CliError::runtime)?;
    let out = stats.apply(m).map_err(CliError::runtime)?;
    Ok((Some(stats), out))
}

pub fn cmd_features(args: &FeaturesArgs) -> CliResult {
    let (course, as_of) = args.at.load()?;
    let raw = build_matrix(&course, as_of).map_err(CliError::runtime)?;
    let (stats, x) = normalize_with(&raw, args.norm)?;
    write_file(&args.out, &x.to_csv_string())?;
    match (stats, &args.stats_out) {
        (Some(s), Some(p)) => s.save(p).map_err(CliError::runtime)?,
        (None, Some(_)) => return Err(CliError::Usage("--stats-out needs --norm".into())),
        _ => {}
    }
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> CliResult {
    if !(args.reg_c > 0.0 && args.reg_c.is_finite()) {
        return Err(CliError::Usage(format!("--reg-c must be positive, got {}", args.reg_c)));
    }
    let (course, as_of) = args.at.load()?;
    let raw = build_matrix(&course, as_of).map_err(CliError::runtime)?;
    let stats = fit_zscore(&raw).map_err(CliError::runtime)?;
    let x = stats.apply(&raw).map_err(CliError::runtime)?;
    let mut model = train_logreg(&x, &derive_labels(&course), args.reg_c, &OptimizerConfig::default())
        .map_err(CliError::runtime)?;
    model.norm = Some(stats);
    model.save(&args.out).map_err(CliError::runtime)
}

pub fn cmd_run(args: &RunArgs) -> CliResult {
    let manifest = RunManifest::load(&args.manifest)?;
    let kinds = manifest.kinds()?;
    let corpus = manifest.corpus()?;
    let cfg = RunConfig {
        reg_c: manifest.reg_c,
        holdout: manifest.holdout,
        same_field_norm: manifest.same_field_norm,
        seed: manifest.master_seed,
        jobs: args.jobs as usize,
        ..RunConfig::default()
    };
    let report = run_experiment(&corpus, &kinds, &cfg).map_err(CliError::runtime)?;
    emit_report(&report, &manifest.output_dir).map_err(CliError::runtime)?;
    if let Some(plan) = &manifest.growth_plan {
        let mut courses: Vec<&CourseData> = corpus.iter().collect();
        courses.sort_by(|a, b| a.id().cmp(b.id()));
        let target = courses[0];
        let sgd = SgdConfig {
            seed: derive_seed(manifest.master_seed, &[1]),
            ..SgdConfig::default()
        };
        let as_of = target.meta().t100_date;
        let report = grow_course(target, as_of, 0.5, plan, &sgd, grow_split_seed(sgd.seed))?.without_timing();
        write_file(&manifest.output_dir.join(SWEEP_FILE), &report.to_csv())?;
        report
            .best
            .save(&manifest.output_dir.join(BEST_MODEL_FILE))
            .map_err(CliError::runtime)?;
    }
    print!("{}", report.summary_table());
    Ok(())
}

/// Splits students into train/test, z-scores on train and runs the sweep.
fn grow_course(
    course: &CourseData,
    as_of: NaiveDate,
    test_fraction: f64,
    plan: &GrowthPlan,
    sgd: &SgdConfig,
    split_seed: u64,
) -> CliResult<SweepReport> {
    plan.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    sgd.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let data = CourseSplit::new(course, as_of, test_fraction, split_seed).map_err(|e| match e {
        DeepError::BadPlan(m) => CliError::Usage(m),
        other => CliError::runtime(other),
    })?;
    grow_and_train(data.train_split(), data.test_split(), plan, sgd).map_err(CliError::runtime)
}

/// Seed of the student shuffle used by `grow` with master seed `seed`.
pub fn grow_split_seed(seed: u64) -> u64 {
    derive_seed(seed, &[0])
}

pub fn cmd_grow(args: &GrowArgs) -> CliResult {
    let range = |lo: usize, hi: usize| -> Vec<usize> { (lo..=hi).collect() };
    let plan = GrowthPlan {
        width_sweep: range(args.width_min, args.width_max),
        depth_sweep: range(args.depth_min, args.depth_max),
        fixed_width: args.fixed_width,
    };
    let sgd = SgdConfig {
        learning_rate: args.lr,
        epochs: args.epochs as usize,
        minibatch_size: args.minibatch as usize,
        anneal_factor: args.anneal,
        momentum: args.momentum,
        seed: args.seed,
        class_weighting: args.class_weighting,
    };
    let (course, as_of) = args.at.load()?;
    let mut report = grow_course(&course, as_of, args.test_fraction, &plan, &sgd, grow_split_seed(args.seed))?;
    if args.no_timing {
        report = report.without_timing();
    }
    write_file(&args.out.join(SWEEP_FILE), &report.to_csv())?;
    report
        .best
        .save(&args.out.join(BEST_MODEL_FILE))
        .map_err(CliError::runtime)?;
    let best = &report.rows[report.best_row];
    println!(
        "{} cells; best {} w={} h={} auc={:.4}",
        report.rows.len(),
        best.phase.as_str(),
        best.w,
        best.h,
        best.auc
    );
    Ok(())
}

pub fn cmd_report(args: &ReportArgs) -> CliResult {
    let rows = read_rows_csv(&args.rows).map_err(CliError::runtime)?;
    let report = EvalReport::from_rows(rows, Vec::new());
    emit_report(&report, &args.out).map_err(CliError::runtime)?;
    print!("{}", report.summary_table());
    Ok(())
}

pub fn dispatch(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Features(a) => cmd_features(a),
        Command::Train(a) => cmd_train(a),
        Command::Run(a) => cmd_run(a),
        Command::Grow(a) => cmd_grow(a),
        Command::Report(a) => cmd_report(a),
    }
}

pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(&cli) {
        Ok(()) => {
            let _ = std::io::stdout().flush();
            ExitCode::SUCCESS
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
