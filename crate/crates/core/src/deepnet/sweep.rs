//! Width-then-depth growth sweep. Every cell trains with its own seed,
//! `derive_seed(cfg.seed, [phase, w, h])`, so any cell can be replayed by
//! re-running the chain that leads to it.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{init_mlp, init_softmax, net2deeper, net2wider, train_sgd, DeepError, MlpModel, SgdConfig};
use crate::evaluate::{accuracy_from_slices, auc_from_slices};
use crate::matrix::Matrix;
use crate::seed::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrowthPlan {
    pub width_sweep: Vec<usize>,
    pub depth_sweep: Vec<usize>,
    pub fixed_width: usize,
}

impl Default for GrowthPlan {
    fn default() -> Self {
        GrowthPlan {
            width_sweep: (2..=15).collect(),
            depth_sweep: (2..=10).collect(),
            fixed_width: 5,
        }
    }
}

fn strictly_increasing(v: &[usize]) -> bool {
    v.windows(2).all(|p| p[0] < p[1])
}

impl GrowthPlan {
    pub fn validate(&self) -> Result<(), DeepError> {
        let bad = |m: String| Err(DeepError::BadPlan(m));
        if self.width_sweep.is_empty() {
            return bad("width sweep is empty".into());
        }
        if !strictly_increasing(&self.width_sweep) || !strictly_increasing(&self.depth_sweep) {
            return bad("sweeps must be strictly increasing".into());
        }
        if self.width_sweep[0] == 0 {
            return bad("widths must be positive".into());
        }
        if self.depth_sweep.first().is_some_and(|&h| h < 2) {
            return bad("depth sweep starts at 2 hidden layers".into());
        }
        if !self.depth_sweep.is_empty() && !self.width_sweep.contains(&self.fixed_width) {
            return bad(format!(
                "fixed width {} is not in the width sweep",
                self.fixed_width
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Zero hidden layers.
    Linear,
    Width,
    Depth,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Linear => "linear",
            Phase::Width => "width",
            Phase::Depth => "depth",
        }
    }

    fn code(self) -> u64 {
        match self {
            Phase::Linear => 0,
            Phase::Width => 1,
            Phase::Depth => 2,
        }
    }
}

impl FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(Phase::Linear),
            "width" => Ok(Phase::Width),
            "depth" => Ok(Phase::Depth),
            other => Err(format!("unknown phase `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub phase: Phase,
    /// Hidden width; 0 for the linear row.
    pub w: usize,
    /// Number of hidden layers.
    pub h: usize,
    pub auc: f64,
    pub accuracy: f64,
    pub train_seconds: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Highest test AUC; earliest row on ties.
    pub best: MlpModel,
    pub best_row: usize,
}

pub const SWEEP_HEADER: &str = "phase,w,h,auc,accuracy,train_seconds,seed";

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(SWEEP_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.phase.as_str(),
                r.w,
                r.h,
                r.auc,
                r.accuracy,
                r.train_seconds,
                r.seed
            );
        }
        out
    }

    /// Zeroes wall-clock fields so output depends only on the inputs.
    pub fn without_timing(mut self) -> Self {
        self.rows.iter_mut().for_each(|r| r.train_seconds = 0.0);
        self
    }

    pub fn row(&self, phase: Phase, w: usize, h: usize) -> Option<&SweepRow> {
        self.rows
            .iter()
            .find(|r| r.phase == phase && r.w == w && r.h == h)
    }
}

/// Features and labels for one side of the split.
#[derive(Debug, Clone, Copy)]
pub struct Split<'a> {
    pub x: &'a Matrix,
    pub y: &'a [bool],
}

struct Chain<'a> {
    train: Split<'a>,
    test: Split<'a>,
    cfg: &'a SgdConfig,
    rows: Vec<SweepRow>,
    best: Option<(f64, usize, MlpModel)>,
}

impl Chain<'_> {
    fn cell(
        &mut self,
        phase: Phase,
        w: usize,
        h: usize,
        build: impl FnOnce(u64) -> Result<MlpModel, DeepError>,
    ) -> Result<MlpModel, DeepError> {
        let seed = derive_seed(self.cfg.seed, &[phase.code(), w as u64, h as u64]);
        let start = Instant::now();
        let model = build(seed)?;
        let cfg = SgdConfig {
            seed,
            ..self.cfg.clone()
        };
        let model = train_sgd(model, self.train.x, self.train.y, &cfg)?;
        let train_seconds = start.elapsed().as_secs_f64();
        let scores = model.positive_scores(self.test.x);
        let auc = auc_from_slices(&scores, self.test.y).map_err(|_| DeepError::SingleClass)?;
        let accuracy = accuracy_from_slices(&scores, self.test.y, 0.5);
        if self.best.as_ref().is_none_or(|(a, _, _)| auc > *a) {
            self.best = Some((auc, self.rows.len(), model.clone()));
        }
        self.rows.push(SweepRow {
            phase,
            w,
            h,
            auc,
            accuracy,
            train_seconds,
            seed,
        });
        Ok(model)
    }

    fn run(
        mut self,
        linear: bool,
        widths: &[usize],
        depths: &[usize],
        fixed_width: usize,
    ) -> Result<SweepReport, DeepError> {
        let d = self.train.x.cols();
        if self.test.x.cols() != d {
            return Err(DeepError::SchemaMismatch(
                "train and test widths differ".into(),
            ));
        }
        if linear {
            self.cell(Phase::Linear, 0, 0, |s| init_softmax(d, s))?;
        }
        let mut current: Option<MlpModel> = None;
        let mut teacher: Option<MlpModel> = None;
        for &w in widths {
            let prev = current.take();
            let model = self.cell(Phase::Width, w, 1, |s| match prev {
                None => init_mlp(d, &[w], s),
                Some(p) => net2wider(&p, 1, w, s),
            })?;
            if w == fixed_width {
                teacher = Some(model.clone());
            }
            current = Some(model);
        }
        if !depths.is_empty() {
            let mut current = teacher.ok_or_else(|| {
                DeepError::BadPlan(format!("fixed width {fixed_width} never trained"))
            })?;
            for &h in depths {
                let prev = current;
                current = self.cell(Phase::Depth, fixed_width, h, |_| {
                    let mut m = prev;
                    while m.n_hidden() < h {
                        m = net2deeper(&m, m.n_hidden())?;
                    }
                    Ok(m)
                })?;
            }
        }
        let (_, best_row, best) = self
            .best
            .ok_or_else(|| DeepError::BadPlan("no cells to run".into()))?;
        Ok(SweepReport {
            rows: self.rows,
            best,
            best_row,
        })
    }
}

/// Linear row, then the width sweep at one hidden layer (each step widened
/// from the previous trained net), then the depth sweep starting from the
/// trained net at `plan.fixed_width`.
pub fn grow_and_train(
    train: Split<'_>,
    test: Split<'_>,
    plan: &GrowthPlan,
    cfg: &SgdConfig,
) -> Result<SweepReport, DeepError> {
    plan.validate()?;
    cfg.validate()?;
    let chain = Chain {
        train,
        test,
        cfg,
        rows: Vec::new(),
        best: None,
    };
    chain.run(true, &plan.width_sweep, &plan.depth_sweep, plan.fixed_width)
}

/// Re-runs only the part of the sweep needed to reach one cell.
pub fn replay_cell(
    train: Split<'_>,
    test: Split<'_>,
    plan: &GrowthPlan,
    cfg: &SgdConfig,
    phase: Phase,
    w: usize,
    h: usize,
) -> Result<SweepRow, DeepError> {
    plan.validate()?;
    cfg.validate()?;
    let chain = Chain {
        train,
        test,
        cfg,
        rows: Vec::new(),
        best: None,
    };
    let upto = |sweep: &[usize], last: usize| -> Vec<usize> {
        sweep.iter().copied().filter(|&v| v <= last).collect()
    };
    let missing = || DeepError::BadPlan(format!("no {} cell at w={w}, h={h}", phase.as_str()));
    let report = match phase {
        Phase::Linear if (w, h) == (0, 0) => chain.run(true, &[], &[], plan.fixed_width)?,
        Phase::Width if h == 1 && plan.width_sweep.contains(&w) => {
            chain.run(false, &upto(&plan.width_sweep, w), &[], plan.fixed_width)?
        }
        Phase::Depth if w == plan.fixed_width && plan.depth_sweep.contains(&h) => chain.run(
            false,
            &upto(&plan.width_sweep, w),
            &upto(&plan.depth_sweep, h),
            plan.fixed_width,
        )?,
        _ => return Err(missing()),
    };
    report.row(phase, w, h).cloned().ok_or_else(missing)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Two noisy rings: label is whether the point lies inside radius 1.
    fn rings(n: usize, seed: u64) -> (Matrix, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let a: f64 = rng.gen_range(-1.6..1.6);
            let b: f64 = rng.gen_range(-1.6..1.6);
            data.extend([a, b, rng.gen_range(-1.0..1.0)]);
            y.push(a * a + b * b < 1.0);
        }
        (Matrix::from_vec(n, 3, data), y)
    }

    fn small_plan() -> GrowthPlan {
        GrowthPlan {
            width_sweep: vec![2, 3, 4],
            depth_sweep: vec![2, 3],
            fixed_width: 3,
        }
    }

    #[test]
    fn plan_defaults_and_validation() {
        let p = GrowthPlan::default();
        assert_eq!(p.width_sweep, (2..=15).collect::<Vec<_>>());
        assert_eq!(p.depth_sweep, (2..=10).collect::<Vec<_>>());
        assert_eq!(p.fixed_width, 5);
        assert!(p.validate().is_ok());
        for bad in [
            GrowthPlan { width_sweep: vec![3, 2], ..GrowthPlan::default() },
            GrowthPlan { depth_sweep: vec![2, 2], ..GrowthPlan::default() },
            GrowthPlan { depth_sweep: vec![1, 2], ..GrowthPlan::default() },
            GrowthPlan { fixed_width: 40, ..GrowthPlan::default() },
            GrowthPlan { width_sweep: vec![], ..GrowthPlan::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn sweep_bookkeeping_and_replay() {
        let (xt, yt) = rings(300, 1);
        let (xs, ys) = rings(200, 2);
        let train = Split { x: &xt, y: &yt };
        let test = Split { x: &xs, y: &ys };
        let plan = small_plan();
        let cfg = SgdConfig {
            seed: 7,
            epochs: 5,
            ..SgdConfig::default()
        };
        let report = grow_and_train(train, test, &plan, &cfg).unwrap();
        assert_eq!(report.rows.len(), 1 + 3 + 2);
        let cells: Vec<(Phase, usize, usize)> =
            report.rows.iter().map(|r| (r.phase, r.w, r.h)).collect();
        assert_eq!(
            cells,
            vec![
                (Phase::Linear, 0, 0),
                (Phase::Width, 2, 1),
                (Phase::Width, 3, 1),
                (Phase::Width, 4, 1),
                (Phase::Depth, 3, 2),
                (Phase::Depth, 3, 3),
            ]
        );
        let best = report.rows[report.best_row].auc;
        assert!(report.rows.iter().all(|r| r.auc <= best));
        assert_eq!(report.best.positive_scores(&xs).len(), 200);

        for r in &report.rows {
            let again = replay_cell(train, test, &plan, &cfg, r.phase, r.w, r.h).unwrap();
            assert_eq!((again.auc, again.accuracy, again.seed), (r.auc, r.accuracy, r.seed));
        }
        assert!(replay_cell(train, test, &plan, &cfg, Phase::Depth, 4, 2).is_err());

        let csv = report.clone().without_timing().to_csv();
        assert!(csv.starts_with("phase,w,h,auc,accuracy,train_seconds,seed\n"));
        assert_eq!(csv.lines().count(), 7);
        let again = grow_and_train(train, test, &plan, &cfg).unwrap().without_timing();
        assert_eq!(again.to_csv(), csv);
    }

    #[test]
    fn hidden_layers_beat_linear_on_rings() {
        let (xt, yt) = rings(600, 3);
        let (xs, ys) = rings(400, 4);
        let plan = GrowthPlan {
            width_sweep: vec![4, 8],
            depth_sweep: vec![],
            fixed_width: 4,
        };
        let cfg = SgdConfig {
            seed: 1,
            epochs: 60,
            ..SgdConfig::default()
        };
        let r = grow_and_train(Split { x: &xt, y: &yt }, Split { x: &xs, y: &ys }, &plan, &cfg).unwrap();
        let linear = r.rows[0].auc;
        let deep = r.rows[1..].iter().map(|r| r.auc).fold(0.0, f64::max);
        assert!(deep > linear + 0.1, "linear {linear}, deep {deep}");
    }
}
