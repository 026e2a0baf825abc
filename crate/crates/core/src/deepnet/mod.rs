//! Fully-connected feed-forward classifier: ReLU hidden layers, two-way
//! softmax output, trained by annealed minibatch SGD and grown with
//! function-preserving widening and deepening.

mod net2net;
mod sgd;
mod sweep;

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use chrono::NaiveDate;
use rand::seq::SliceRandom;

use crate::dataset::{derive_labels, CourseData, LabelSet};
use crate::features::{build_matrix, fit_zscore, FeatureError, FeatureMatrix};
use crate::matrix::{dot, Matrix};

pub use net2net::{net2deeper, net2wider};
pub use sgd::{annealed_rate, train_sgd, SgdConfig, SgdTrainer};
pub use sweep::{grow_and_train, replay_cell, GrowthPlan, Phase, Split, SweepReport, SweepRow, SWEEP_HEADER};

pub const N_CLASSES: usize = 2;

#[derive(Debug, Error)]
pub enum DeepError {
    #[error("bad shape: {0}")]
    BadShape(String),
    #[error("bad layer: {0}")]
    BadLayer(String),
    #[error("cannot shrink layer from {from} to {to} units")]
    ShrinkNotAllowed { from: usize, to: usize },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("training labels contain a single class")]
    SingleClass,
    #[error("loss became non-finite")]
    NonFiniteLoss,
    #[error("bad growth plan: {0}")]
    BadPlan(String),
    #[error("no label for student `{0}`")]
    MissingLabel(String),
    #[error("{path}: {message}")]
    File { path: String, message: String },
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

/// `activation = relu(weights * input + bias)` for hidden layers; the last
/// layer's output goes through softmax.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out x in`, row-major.
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Layer {
            weights: Matrix::zeros(outputs, inputs),
            bias: vec![0.0; outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows()
    }

    fn apply(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weights
                .iter_rows()
                .zip(&self.bias)
                .map(|(r, b)| dot(r, input) + b),
        );
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub layers: Vec<Layer>,
}

fn glorot_layer<R: Rng>(rng: &mut R, inputs: usize, outputs: usize) -> Layer {
    let a = (6.0 / (inputs + outputs) as f64).sqrt();
    let mut layer = Layer::zeros(inputs, outputs);
    for w in layer.weights.as_mut_slice() {
        *w = rng.gen_range(-a..a);
    }
    layer
}

fn init_layers(input_dim: usize, widths: &[usize], seed: u64) -> Result<MlpModel, DeepError> {
    if input_dim == 0 {
        return Err(DeepError::BadShape("input dimension must be positive".into()));
    }
    if let Some(w) = widths.iter().find(|&&w| w == 0) {
        return Err(DeepError::BadShape(format!("layer width {w}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dims = vec![input_dim];
    dims.extend_from_slice(widths);
    dims.push(N_CLASSES);
    let layers = dims
        .windows(2)
        .map(|d| glorot_layer(&mut rng, d[0], d[1]))
        .collect();
    Ok(MlpModel { layers })
}

/// Network with one ReLU hidden layer per entry of `widths`. Weights are
/// uniform in `+-sqrt(6 / (fan_in + fan_out))`, biases zero.
pub fn init_mlp(input_dim: usize, widths: &[usize], seed: u64) -> Result<MlpModel, DeepError> {
    if widths.is_empty() {
        return Err(DeepError::BadShape("at least one hidden layer required".into()));
    }
    init_layers(input_dim, widths, seed)
}

/// Zero-hidden-layer softmax classifier: a single `input -> 2` layer.
pub fn init_softmax(input_dim: usize, seed: u64) -> Result<MlpModel, DeepError> {
    init_layers(input_dim, &[], seed)
}

/// Numerically stable softmax of `logits` written into `out`.
pub fn softmax(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

impl MlpModel {
    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn n_hidden(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.n_hidden()]
            .iter()
            .map(Layer::outputs)
            .collect()
    }

    /// Checks that layer shapes chain and every parameter is finite.
    pub fn validate(&self) -> Result<(), DeepError> {
        if self.layers.is_empty() {
            return Err(DeepError::BadShape("no layers".into()));
        }
        for (k, pair) in self.layers.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(DeepError::BadShape(format!(
                    "layer {k} emits {} values, layer {} takes {}",
                    pair[0].outputs(),
                    k + 1,
                    pair[1].inputs()
                )));
            }
        }
        if self.layers.last().map(Layer::outputs) != Some(N_CLASSES) {
            return Err(DeepError::BadShape("output layer must have 2 units".into()));
        }
        if self
            .layers
            .iter()
            .any(|l| !l.weights.is_finite() || l.bias.iter().any(|b| !b.is_finite()))
        {
            return Err(DeepError::BadShape("non-finite parameter".into()));
        }
        Ok(())
    }

    /// Output-layer logits for one input.
    pub fn logits(&self, input: &[f64]) -> Vec<f64> {
        let mut a = input.to_vec();
        let mut z = Vec::new();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            layer.apply(&a, &mut z);
            if k < last {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            std::mem::swap(&mut a, &mut z);
        }
        a
    }

    /// Class probabilities, one row per input row.
    pub fn forward_rows(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), N_CLASSES);
        for (i, row) in x.iter_rows().enumerate() {
            softmax(&self.logits(row), out.row_mut(i));
        }
        out
    }

    /// Probability of class 1 (certified) per row.
    pub fn positive_scores(&self, x: &Matrix) -> Vec<f64> {
        self.forward_rows(x).column(1).collect()
    }

    /// Weighted mean cross-entropy over `rows` and its gradient, laid out
    /// like the model. `weights` is per example; `None` means all ones.
    pub fn loss_and_gradient(
        &self,
        x: &Matrix,
        y: &[bool],
        rows: &[usize],
        weights: Option<&[f64]>,
    ) -> (f64, MlpModel) {
        let mut grad = MlpModel {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.inputs(), l.outputs()))
                .collect(),
        };
        let n_layers = self.layers.len();
        let mut loss = 0.0;
        let mut activations: Vec<Vec<f64>> = vec![Vec::new(); n_layers + 1];
        let mut delta = Vec::new();
        let mut prev_delta = Vec::new();
        let mut probs = [0.0; N_CLASSES];
        for &i in rows {
            let wi = weights.map_or(1.0, |w| w[i]);
            activations[0].clear();
            activations[0].extend_from_slice(x.row(i));
            for k in 0..n_layers {
                let (done, rest) = activations.split_at_mut(k + 1);
                self.layers[k].apply(&done[k], &mut rest[0]);
                if k + 1 < n_layers {
                    rest[0].iter_mut().for_each(|v| *v = v.max(0.0));
                }
            }
            let logits = &activations[n_layers];
            let target = usize::from(y[i]);
            loss += wi * (log_sum_exp(logits) - logits[target]);
            softmax(logits, &mut probs);
            delta.clear();
            delta.extend((0..N_CLASSES).map(|c| wi * (probs[c] - f64::from(u8::from(c == target)))));
            for k in (0..n_layers).rev() {
                let input = &activations[k];
                let g = &mut grad.layers[k];
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    g.bias[o] += d;
                    for (gw, a) in g.weights.row_mut(o).iter_mut().zip(input) {
                        *gw += d * a;
                    }
                }
                if k == 0 {
                    break;
                }
                let w = &self.layers[k].weights;
                prev_delta.clear();
                prev_delta.resize(w.cols(), 0.0);
                for (o, &d) in delta.iter().enumerate() {
                    for (p, wv) in prev_delta.iter_mut().zip(w.row(o)) {
                        *p += d * wv;
                    }
                }
                // relu' at the pre-activation; post-activation > 0 iff pre > 0
                for (p, &a) in prev_delta.iter_mut().zip(input) {
                    if a <= 0.0 {
                        *p = 0.0;
                    }
                }
                std::mem::swap(&mut delta, &mut prev_delta);
            }
        }
        let scale = 1.0 / rows.len().max(1) as f64;
        for l in &mut grad.layers {
            l.weights.as_mut_slice().iter_mut().for_each(|v| *v *= scale);
            l.bias.iter_mut().for_each(|v| *v *= scale);
        }
        (loss * scale, grad)
    }

    /// All parameters, layer by layer, weights (row-major) then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) {
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            for w in l.weights.as_mut_slice() {
                *w = it.next().expect("parameter vector too short");
            }
            for b in &mut l.bias {
                *b = it.next().expect("parameter vector too short");
            }
        }
        assert!(it.next().is_none(), "parameter vector too long");
    }

    pub fn save(&self, path: &Path) -> Result<(), DeepError> {
        let doc = ModelFile {
            input_dim: self.input_dim(),
            hidden_activation: "relu".into(),
            output_activation: "softmax".into(),
            layers: self.layers.clone(),
        };
        let err = |message: String| DeepError::File {
            path: path.display().to_string(),
            message,
        };
        let text = serde_json::to_string_pretty(&doc).map_err(|e| err(e.to_string()))?;
        fs::write(path, text + "\n").map_err(|e| err(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, DeepError> {
        let err = |message: String| DeepError::File {
            path: path.display().to_string(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let doc: ModelFile = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        let model = MlpModel { layers: doc.layers };
        model.validate()?;
        if model.input_dim() != doc.input_dim {
            return Err(err("input_dim disagrees with first layer".into()));
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    input_dim: usize,
    hidden_activation: String,
    output_activation: String,
    layers: Vec<Layer>,
}

/// Class probabilities for a feature matrix.
pub fn forward(m: &MlpModel, x: &FeatureMatrix) -> Result<Matrix, DeepError> {
    if x.width() != m.input_dim() {
        return Err(DeepError::SchemaMismatch(format!(
            "network takes {} inputs, matrix has {} columns",
            m.input_dim(),
            x.width()
        )));
    }
    Ok(m.forward_rows(&x.values))
}

/// Labels aligned with the matrix rows.
pub fn aligned_labels(x: &FeatureMatrix, y: &LabelSet) -> Result<Vec<bool>, DeepError> {
    x.student_ids
        .iter()
        .map(|id| {
            y.get(id)
                .map(|l| l == 1)
                .ok_or_else(|| DeepError::MissingLabel(id.clone()))
        })
        .collect()
}

/// A course split into z-scored train and test rows with certification
/// labels; statistics come from the train rows only.
#[derive(Debug, Clone)]
pub struct CourseSplit {
    pub train: FeatureMatrix,
    pub test: FeatureMatrix,
    pub y_train: Vec<bool>,
    pub y_test: Vec<bool>,
}

impl CourseSplit {
    /// Shuffles students with `seed` and holds out `test_fraction` of them.
    pub fn new(
        course: &CourseData,
        as_of: NaiveDate,
        test_fraction: f64,
        seed: u64,
    ) -> Result<Self, DeepError> {
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(DeepError::BadPlan(format!(
                "test fraction {test_fraction} not in (0, 1)"
            )));
        }
        let raw = build_matrix(course, as_of)?;
        let n = raw.n_rows();
        if n < 2 {
            return Err(DeepError::BadShape(format!("{n} students cannot be split")));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
        let mut test_idx = order[..n_test].to_vec();
        let mut train_idx = order[n_test..].to_vec();
        test_idx.sort_unstable();
        train_idx.sort_unstable();
        let train_raw = raw.select_rows(&train_idx);
        let stats = fit_zscore(&train_raw)?;
        let train = stats.apply(&train_raw)?;
        let test = stats.apply(&raw.select_rows(&test_idx))?;
        let labels = derive_labels(course);
        Ok(CourseSplit {
            y_train: aligned_labels(&train, &labels)?,
            y_test: aligned_labels(&test, &labels)?,
            train,
            test,
        })
    }

    pub fn train_split(&self) -> Split<'_> {
        Split {
            x: &self.train.values,
            y: &self.y_train,
        }
    }

    pub fn test_split(&self) -> Split<'_> {
        Split {
            x: &self.test.values,
            y: &self.y_test,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
    }

    #[test]
    fn init_shapes() {
        let m = init_mlp(66, &[2], 1).unwrap();
        assert_eq!(m.layers.len(), 2);
        assert_eq!((m.layers[0].inputs(), m.layers[0].outputs()), (66, 2));
        assert_eq!((m.layers[1].inputs(), m.layers[1].outputs()), (2, 2));
        assert!(m.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
        assert_eq!(init_mlp(66, &[2], 1).unwrap(), m);
        assert_ne!(init_mlp(66, &[2], 2).unwrap(), m);
        assert!(matches!(init_mlp(66, &[], 1), Err(DeepError::BadShape(_))));
        assert!(matches!(init_mlp(66, &[3, 0], 1), Err(DeepError::BadShape(_))));
        let s = init_softmax(66, 1).unwrap();
        assert_eq!(s.n_hidden(), 0);
        let a = (6.0f64 / 68.0).sqrt();
        assert!(s.layers[0].weights.as_slice().iter().all(|w| w.abs() < a));
    }

    #[test]
    fn zero_network_is_a_coin() {
        let mut m = init_mlp(4, &[3, 3], 0).unwrap();
        m.set_params(&vec![0.0; m.params().len()]);
        let p = m.forward_rows(&random_matrix(5, 4, 1));
        assert!(p.as_slice().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn rows_sum_to_one_and_shift_invariance() {
        for seed in 0..20 {
            let m = init_mlp(6, &[5, 4], seed).unwrap();
            let x = random_matrix(30, 6, seed + 100);
            let p = m.forward_rows(&x);
            for r in p.iter_rows() {
                assert!((r[0] + r[1] - 1.0).abs() <= 1e-12);
                assert!(r.iter().all(|&v| v > 0.0 && v < 1.0));
            }
            let mut shifted = m.clone();
            let last = shifted.layers.last_mut().unwrap();
            last.bias.iter_mut().for_each(|b| *b += 3.25);
            let q = shifted.forward_rows(&x);
            for (a, b) in p.as_slice().iter().zip(q.as_slice()) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn softmax_handles_extreme_logits() {
        let mut out = [0.0; 2];
        softmax(&[1000.0, -1000.0], &mut out);
        assert_eq!(out, [1.0, 0.0]);
        softmax(&[800.0, 800.0], &mut out);
        assert_eq!(out, [0.5, 0.5]);
    }

    #[test]
    fn params_round_trip() {
        let m = init_mlp(3, &[4, 2], 5).unwrap();
        let mut z = m.clone();
        z.set_params(&vec![0.0; m.params().len()]);
        z.set_params(&m.params());
        assert_eq!(z, m);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..10u64 {
            // random biases keep pre-activations off the ReLU kink at 0
            let mut m = init_mlp(5, &[4, 3], seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 900);
            let p: Vec<f64> = m.params().iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
            m.set_params(&p);
            let x = random_matrix(8, 5, seed + 50);
            let y: Vec<bool> = (0..8).map(|i| (i + seed as usize).is_multiple_of(3)).collect();
            let rows: Vec<usize> = (0..8).collect();
            let (_, g) = m.loss_and_gradient(&x, &y, &rows, None);
            let analytic = g.params();
            let theta = m.params();
            let h = 1e-6;
            let numeric: Vec<f64> = (0..theta.len())
                .map(|j| {
                    let mut p = m.clone();
                    let mut t = theta.clone();
                    t[j] += h;
                    p.set_params(&t);
                    let up = p.loss_and_gradient(&x, &y, &rows, None).0;
                    t[j] -= 2.0 * h;
                    p.set_params(&t);
                    let down = p.loss_and_gradient(&x, &y, &rows, None).0;
                    (up - down) / (2.0 * h)
                })
                .collect();
            let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt()
                + numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!(diff / scale <= 1e-4, "seed {seed}: relative error {}", diff / scale);
        }
    }

    #[test]
    fn model_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        let m = init_mlp(4, &[3], 9).unwrap();
        m.save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"rows\"") && text.contains("\"softmax\""));
        assert_eq!(MlpModel::load(&path).unwrap(), m);
    }

    #[test]
    fn validate_catches_broken_chains() {
        let mut m = init_mlp(4, &[3], 9).unwrap();
        assert!(m.validate().is_ok());
        m.layers[1] = Layer::zeros(5, 2);
        assert!(m.validate().is_err());
    }
}
