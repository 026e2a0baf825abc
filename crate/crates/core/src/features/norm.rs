//! Normalization fitted on training rows and applied to any matrix with the
//! same schema.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Block, FeatureError, FeatureMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NormKind {
    ZScore,
    Percentile,
}

impl FromStr for NormKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "zscore" => Ok(NormKind::ZScore),
            "percentile" => Ok(NormKind::Percentile),
            other => Err(format!("unknown normalization `{other}`")),
        }
    }
}

/// Statistics of a fitted normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum NormStats {
    /// Per-column mean and population standard deviation.
    ZScore { mean: Vec<f64>, std: Vec<f64> },
    /// Sorted training values for each transformed column; other columns
    /// pass through.
    Percentile {
        width: usize,
        columns: Vec<usize>,
        reference: Vec<Vec<f64>>,
    },
}

impl NormStats {
    pub fn kind(&self) -> NormKind {
        match self {
            NormStats::ZScore { .. } => NormKind::ZScore,
            NormStats::Percentile { .. } => NormKind::Percentile,
        }
    }

    pub fn width(&self) -> usize {
        match self {
            NormStats::ZScore { mean, .. } => mean.len(),
            NormStats::Percentile { width, .. } => *width,
        }
    }

    pub fn apply(&self, m: &FeatureMatrix) -> Result<FeatureMatrix, FeatureError> {
        match self.kind() {
            NormKind::ZScore => apply_zscore(m, self),
            NormKind::Percentile => apply_percentile(m, self),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), FeatureError> {
        let text = serde_json::to_string_pretty(self).map_err(|source| FeatureError::Json {
            path: path.display().to_string(),
            source,
        })?;
        fs::write(path, text + "\n").map_err(|source| FeatureError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, FeatureError> {
        let text = fs::read_to_string(path).map_err(|source| FeatureError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| FeatureError::Json {
            path: path.display().to_string(),
            source,
        })
    }
}

fn check_width(m: &FeatureMatrix, stats: &NormStats) -> Result<(), FeatureError> {
    if m.width() == stats.width() {
        Ok(())
    } else {
        Err(FeatureError::SchemaMismatch(format!(
            "matrix has {} columns, normalization expects {}",
            m.width(),
            stats.width()
        )))
    }
}

pub fn fit_zscore(train: &FeatureMatrix) -> Result<NormStats, FeatureError> {
    let n = train.n_rows();
    if n == 0 {
        return Err(FeatureError::EmptyMatrix);
    }
    let width = train.width();
    let mut mean = vec![0.0; width];
    for row in train.values.iter_rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; width];
    for row in train.values.iter_rows() {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.into_iter().map(|s| (s / n as f64).sqrt()).collect();
    Ok(NormStats::ZScore { mean, std })
}

/// `(v - mean) / std`, or 0 where the training column was constant.
pub fn apply_zscore(m: &FeatureMatrix, stats: &NormStats) -> Result<FeatureMatrix, FeatureError> {
    let NormStats::ZScore { mean, std } = stats else {
        return Err(FeatureError::SchemaMismatch(
            "expected z-score statistics".into(),
        ));
    };
    check_width(m, stats)?;
    let mut out = m.clone();
    for i in 0..out.n_rows() {
        for ((v, mu), sd) in out.values.row_mut(i).iter_mut().zip(mean).zip(std) {
            *v = if *sd > 0.0 { (*v - mu) / sd } else { 0.0 };
        }
    }
    Ok(out)
}

/// Stores sorted training values for the clickstream block and
/// `days_since_last_action`.
pub fn fit_percentile(train: &FeatureMatrix) -> Result<NormStats, FeatureError> {
    if train.n_rows() == 0 {
        return Err(FeatureError::EmptyMatrix);
    }
    let schema = &train.schema;
    let columns: Vec<usize> = schema
        .block(Block::ClickstreamCumulative)
        .chain(schema.block(Block::DaysSinceLastAction))
        .collect();
    let reference = columns
        .iter()
        .map(|&j| {
            let mut col: Vec<f64> = train.values.column(j).collect();
            col.sort_by(f64::total_cmp);
            col
        })
        .collect();
    Ok(NormStats::Percentile {
        width: train.width(),
        columns,
        reference,
    })
}

/// Mid-rank percentile of `value` within sorted `reference`:
/// `(#less + 0.5 * #equal) / n`.
pub fn mid_rank(reference: &[f64], value: f64) -> f64 {
    let less = reference.partition_point(|&r| r < value);
    let less_or_equal = reference.partition_point(|&r| r <= value);
    (less as f64 + 0.5 * (less_or_equal - less) as f64) / reference.len() as f64
}

pub fn apply_percentile(
    m: &FeatureMatrix,
    stats: &NormStats,
) -> Result<FeatureMatrix, FeatureError> {
    let NormStats::Percentile {
        columns, reference, ..
    } = stats
    else {
        return Err(FeatureError::SchemaMismatch(
            "expected percentile statistics".into(),
        ));
    };
    check_width(m, stats)?;
    let mut out = m.clone();
    for i in 0..out.n_rows() {
        let row = out.values.row_mut(i);
        for (&j, refs) in columns.iter().zip(reference) {
            row[j] = mid_rank(refs, row[j]);
        }
    }
    Ok(out)
}

/// Fits on `m` and applies to `m`.
pub fn normalize(m: &FeatureMatrix, kind: NormKind) -> Result<(NormStats, FeatureMatrix), FeatureError> {
    let stats = match kind {
        NormKind::ZScore => fit_zscore(m)?,
        NormKind::Percentile => fit_percentile(m)?,
    };
    let out = stats.apply(m)?;
    Ok((stats, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureSchema;
    use crate::matrix::Matrix;
    use chrono::NaiveDate;

    /// Matrix whose first column takes `col` and all others zero.
    fn with_column(j: usize, col: &[f64]) -> FeatureMatrix {
        let schema = FeatureSchema::standard();
        let mut values = Matrix::zeros(col.len(), schema.width());
        for (i, &v) in col.iter().enumerate() {
            values[(i, j)] = v;
        }
        FeatureMatrix::new(
            schema,
            (0..col.len()).map(|i| format!("s{i}")).collect(),
            values,
            NaiveDate::from_ymd_opt(2016, 1, 1).unwrap(),
        )
        .unwrap()
    }

    fn nevents() -> usize {
        FeatureSchema::standard().index_of("nevents").unwrap()
    }

    #[test]
    fn zscore_population_std() {
        let m = with_column(0, &[1.0, 2.0, 3.0]);
        let NormStats::ZScore { mean, std } = fit_zscore(&m).unwrap() else {
            panic!()
        };
        assert_eq!(mean[0], 2.0);
        assert_eq!(std[0], (2.0f64 / 3.0).sqrt());
        assert_eq!(std[1], 0.0);
    }

    #[test]
    fn zscore_degenerate_columns() {
        let m = with_column(0, &[5.0, 5.0]);
        let stats = fit_zscore(&m).unwrap();
        let NormStats::ZScore { mean, std } = &stats else { panic!() };
        assert_eq!((mean[0], std[0]), (5.0, 0.0));
        let z = apply_zscore(&m, &stats).unwrap();
        assert!(z.values.as_slice().iter().all(|&v| v == 0.0));

        let single = with_column(0, &[3.0]);
        let NormStats::ZScore { std, .. } = fit_zscore(&single).unwrap() else {
            panic!()
        };
        assert!(std.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn zscore_identity_and_extrapolation() {
        let m = with_column(0, &[1.0, 4.0, 9.0, 16.0]);
        let stats = fit_zscore(&m).unwrap();
        let z = apply_zscore(&m, &stats).unwrap();
        let col: Vec<f64> = z.values.column(0).collect();
        let mean = col.iter().sum::<f64>() / 4.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-12);

        let far = with_column(0, &[1000.0]);
        let zf = apply_zscore(&far, &stats).unwrap();
        assert!(zf.values[(0, 0)] > 10.0 && zf.values[(0, 0)].is_finite());
    }

    #[test]
    fn empty_matrix_is_rejected() {
        let m = with_column(0, &[]);
        assert!(matches!(fit_zscore(&m), Err(FeatureError::EmptyMatrix)));
        assert!(matches!(fit_percentile(&m), Err(FeatureError::EmptyMatrix)));
    }

    #[test]
    fn percentile_reference_is_sorted_with_duplicates() {
        let j = nevents();
        for (input, expected) in [
            (vec![10.0, 20.0, 30.0], vec![10.0, 20.0, 30.0]),
            (vec![30.0, 10.0, 20.0], vec![10.0, 20.0, 30.0]),
            (vec![5.0, 5.0, 7.0], vec![5.0, 5.0, 7.0]),
        ] {
            let stats = fit_percentile(&with_column(j, &input)).unwrap();
            let NormStats::Percentile {
                columns, reference, ..
            } = stats
            else {
                panic!()
            };
            let k = columns.iter().position(|&c| c == j).unwrap();
            assert_eq!(reference[k], expected);
            assert_eq!(columns.len(), 32);
        }
    }

    #[test]
    fn mid_rank_values() {
        assert_eq!(mid_rank(&[10.0, 20.0, 30.0], 20.0), 0.5);
        assert_eq!(mid_rank(&[10.0, 20.0, 30.0], 5.0), 0.0);
        assert_eq!(mid_rank(&[10.0, 20.0, 30.0], 35.0), 1.0);
        assert_eq!(mid_rank(&[4.0, 4.0, 4.0], 4.0), 0.5);
    }

    #[test]
    fn percentile_leaves_dummies_alone() {
        let m = with_column(0, &[1.0, 0.0, 1.0]);
        let stats = fit_percentile(&m).unwrap();
        let p = apply_percentile(&m, &stats).unwrap();
        assert_eq!(p.values.column(0).collect::<Vec<_>>(), vec![1.0, 0.0, 1.0]);
    }

    #[test]
    fn kind_mismatch_is_an_error() {
        let m = with_column(0, &[1.0, 2.0]);
        let z = fit_zscore(&m).unwrap();
        assert!(apply_percentile(&m, &z).is_err());
        let p = fit_percentile(&m).unwrap();
        assert!(apply_zscore(&m, &p).is_err());
    }

    #[test]
    fn stats_round_trip_through_json() {
        let m = with_column(nevents(), &[3.0, 1.0, 2.0]);
        for stats in [fit_zscore(&m).unwrap(), fit_percentile(&m).unwrap()] {
            let text = serde_json::to_string(&stats).unwrap();
            assert!(text.contains("\"kind\""));
            let back: NormStats = serde_json::from_str(&text).unwrap();
            assert_eq!(back, stats);
        }
    }
}
