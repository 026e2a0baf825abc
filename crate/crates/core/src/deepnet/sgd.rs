use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DeepError, MlpModel};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub anneal_factor: f64,
    pub momentum: f64,
    pub seed: u64,
    pub class_weighting: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.1,
            epochs: 20,
            minibatch_size: 10,
            anneal_factor: 1e-3,
            momentum: 0.0,
            seed: 0,
            class_weighting: false,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<(), DeepError> {
        let bad = |m: &str| Err(DeepError::BadPlan(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.minibatch_size == 0 {
            return bad("minibatch size must be at least 1");
        }
        if !(self.anneal_factor > -1.0 && self.anneal_factor.is_finite()) {
            return bad("anneal factor must exceed -1");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Learning rate after `k` minibatch updates: `lr0 * (1 + anneal)^-k`.
pub fn annealed_rate(lr0: f64, anneal: f64, k: u64) -> f64 {
    lr0 * (1.0 + anneal).powf(-(k as f64))
}

/// Minibatch SGD with a step counter that survives across `train` calls
/// on the same trainer.
#[derive(Debug, Clone)]
pub struct SgdTrainer {
    cfg: SgdConfig,
    steps: u64,
}

impl SgdTrainer {
    pub fn new(cfg: SgdConfig) -> Result<Self, DeepError> {
        cfg.validate()?;
        Ok(SgdTrainer { cfg, steps: 0 })
    }

    /// Minibatch updates applied so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Rate the next update will use.
    pub fn current_learning_rate(&self) -> f64 {
        annealed_rate(self.cfg.learning_rate, self.cfg.anneal_factor, self.steps)
    }

    pub fn train(&mut self, mut m: MlpModel, x: &Matrix, y: &[bool]) -> Result<MlpModel, DeepError> {
        m.validate()?;
        if x.rows() != y.len() {
            return Err(DeepError::BadShape(format!(
                "{} rows but {} labels",
                x.rows(),
                y.len()
            )));
        }
        if x.cols() != m.input_dim() {
            return Err(DeepError::SchemaMismatch(format!(
                "network takes {} inputs, matrix has {} columns",
                m.input_dim(),
                x.cols()
            )));
        }
        let n_pos = y.iter().filter(|&&v| v).count();
        let n = y.len();
        if n_pos == 0 || n_pos == n {
            return Err(DeepError::SingleClass);
        }
        let weights: Option<Vec<f64>> = self.cfg.class_weighting.then(|| {
            let w_pos = n as f64 / (2.0 * n_pos as f64);
            let w_neg = n as f64 / (2.0 * (n - n_pos) as f64);
            y.iter().map(|&v| if v { w_pos } else { w_neg }).collect()
        });

        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let mut order: Vec<usize> = (0..n).collect();
        let mut theta = m.params();
        let mut velocity = vec![0.0; theta.len()];
        for _ in 0..self.cfg.epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(self.cfg.minibatch_size) {
                let (loss, grad) = m.loss_and_gradient(x, y, batch, weights.as_deref());
                if !loss.is_finite() {
                    return Err(DeepError::NonFiniteLoss);
                }
                let lr = self.current_learning_rate();
                for ((t, v), g) in theta.iter_mut().zip(&mut velocity).zip(grad.params()) {
                    *v = self.cfg.momentum * *v - lr * g;
                    *t += *v;
                }
                m.set_params(&theta);
                self.steps += 1;
            }
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(DeepError::NonFiniteLoss);
        }
        Ok(m)
    }
}

/// Trains `m` from a fresh trainer.
pub fn train_sgd(m: MlpModel, x: &Matrix, y: &[bool], cfg: &SgdConfig) -> Result<MlpModel, DeepError> {
    SgdTrainer::new(cfg.clone())?.train(m, x, y)
}
