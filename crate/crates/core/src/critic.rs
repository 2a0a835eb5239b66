//! Sequence-level value model used as the REINFORCE baseline.
//!
//! Features are either hashed token counts of prompt and solution
//! (L2-normalized, fixed dimension) or an embedding supplied by the policy.
//! Only the regression head is trained.

use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{combine, fnv1a64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activated value.
    fn derivative(self, activated: f64) -> f64 {
        match self {
            Activation::Relu => {
                if activated > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - activated * activated,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Linear,
    #[default]
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    #[default]
    Hashed,
    /// Use the policy's embedding when present, hashed features otherwise.
    Embedding,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriticConfig {
    pub feature_dim: usize,
    pub head: HeadKind,
    /// Hidden width of the MLP head.
    pub hidden_dim: usize,
    pub activation: Activation,
    pub features: FeatureSource,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for CriticConfig {
    fn default() -> Self {
        CriticConfig {
            feature_dim: 512,
            head: HeadKind::Mlp,
            hidden_dim: 256,
            activation: Activation::Relu,
            features: FeatureSource::Hashed,
            learning_rate: 1e-6,
            seed: 0,
        }
    }
}

impl CriticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::Config("critic feature_dim must be positive".into()));
        }
        if self.head == HeadKind::Mlp && self.hidden_dim == 0 {
            return Err(Error::Config("critic hidden_dim must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("critic learning_rate must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Head {
    Linear {
        w: Vec<f64>,
        b: f64,
    },
    Mlp {
        /// Input-major: row `i` holds the weights from input `i` to every
        /// hidden unit.
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: f64,
    },
}

/// One regression example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticTarget {
    pub prompt: String,
    pub solution: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticModel {
    config: CriticConfig,
    head: Head,
}

impl CriticModel {
    /// Hidden weights are drawn uniformly in `±1/sqrt(fan_in)`; the output
    /// layer starts at zero so a fresh critic predicts 0 everywhere.
    pub fn new(config: CriticConfig) -> Result<Self> {
        config.validate()?;
        let d = config.feature_dim;
        let head = match config.head {
            HeadKind::Linear => Head::Linear {
                w: vec![0.0; d],
                b: 0.0,
            },
            HeadKind::Mlp => {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                let bound = 1.0 / (d as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound);
                Head::Mlp {
                    w1: (0..config.hidden_dim * d).map(|_| dist.sample(&mut rng)).collect(),
                    b1: vec![0.0; config.hidden_dim],
                    w2: vec![0.0; config.hidden_dim],
                    b2: 0.0,
                }
            }
        };
        Ok(CriticModel { config, head })
    }

    pub fn config(&self) -> &CriticConfig {
        &self.config
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    /// Feature vector for one input.
    pub fn features(&self, prompt: &str, solution: &str, embedding: Option<&[f64]>) -> Result<Vec<f64>> {
        if let (FeatureSource::Embedding, Some(e)) = (self.config.features, embedding) {
            if e.len() != self.config.feature_dim {
                return Err(Error::Critic(format!(
                    "embedding has dimension {}, critic expects {}",
                    e.len(),
                    self.config.feature_dim
                )));
            }
            if e.iter().any(|x| !x.is_finite()) {
                return Err(Error::Critic("embedding contains non-finite values".into()));
            }
            return Ok(e.to_vec());
        }
        Ok(hashed_features(prompt, solution, self.config.feature_dim))
    }

    /// Predicted total reward.
    pub fn score(&self, prompt: &str, solution: &str) -> f64 {
        let x = hashed_features(prompt, solution, self.config.feature_dim);
        self.forward(&sparse(x)).0
    }

    pub fn score_with(&self, prompt: &str, solution: &str, embedding: Option<&[f64]>) -> Result<f64> {
        let x = self.features(prompt, solution, embedding)?;
        Ok(self.forward(&sparse(x)).0)
    }

    fn forward(&self, x: &[(usize, f64)]) -> (f64, Vec<f64>) {
        match &self.head {
            Head::Linear { w, b } => (x.iter().map(|&(i, v)| w[i] * v).sum::<f64>() + b, Vec::new()),
            Head::Mlp { w1, b1, w2, b2 } => {
                let h = b1.len();
                let mut hidden = b1.clone();
                for &(i, v) in x {
                    axpy(&mut hidden, v, &w1[i * h..(i + 1) * h]);
                }
                hidden.iter_mut().for_each(|z| *z = self.config.activation.apply(*z));
                (dot(w2, &hidden) + b2, hidden)
            }
        }
    }

    fn sparse_features(&self, t: &CriticTarget) -> Result<Vec<(usize, f64)>> {
        Ok(sparse(self.features(&t.prompt, &t.solution, t.embedding.as_deref())?))
    }

    /// Mean squared error over `batch` at the current parameters.
    pub fn loss(&self, batch: &[CriticTarget]) -> Result<f64> {
        check_batch(batch)?;
        let mut total = 0.0;
        for t in batch {
            let err = self.forward(&self.sparse_features(t)?).0 - t.reward;
            total += err * err;
        }
        Ok(total / batch.len() as f64)
    }

    /// One gradient descent step on the batch-mean squared error with the
    /// configured learning rate. Returns the loss before the step.
    pub fn update(&mut self, batch: &[CriticTarget]) -> Result<f64> {
        check_batch(batch)?;
        let lr = self.config.learning_rate;
        let n = batch.len() as f64;
        let inputs: Vec<Vec<(usize, f64)>> = batch.iter().map(|t| self.sparse_features(t)).collect::<Result<_>>()?;
        let mut loss = 0.0;
        // Per example: output-layer gradient scale and, for the MLP, the
        // hidden activations and hidden-layer gradient scales, all taken at
        // the pre-step parameters.
        let mut steps: Vec<(f64, Vec<f64>, Vec<f64>)> = Vec::with_capacity(batch.len());
        for (x, t) in inputs.iter().zip(batch) {
            let (pred, hidden) = self.forward(x);
            let err = pred - t.reward;
            loss += err * err;
            let g = 2.0 * err / n;
            let gh = match &self.head {
                Head::Linear { .. } => Vec::new(),
                Head::Mlp { w2, .. } => hidden
                    .iter()
                    .zip(w2)
                    .map(|(h, w)| g * w * self.config.activation.derivative(*h))
                    .collect(),
            };
            steps.push((g, hidden, gh));
        }
        match &mut self.head {
            Head::Linear { w, b } => {
                for (x, (g, _, _)) in inputs.iter().zip(&steps) {
                    for &(i, v) in x {
                        w[i] -= lr * g * v;
                    }
                    *b -= lr * g;
                }
            }
            Head::Mlp { w1, b1, w2, b2 } => {
                let h = b1.len();
                for (x, (g, hidden, gh)) in inputs.iter().zip(&steps) {
                    axpy(w2, -lr * g, hidden);
                    *b2 -= lr * g;
                    if gh.iter().all(|v| *v == 0.0) {
                        continue;
                    }
                    for &(i, v) in x {
                        axpy(&mut w1[i * h..(i + 1) * h], -lr * v, gh);
                    }
                    axpy(b1, -lr, gh);
                }
            }
        }
        Ok(loss / n)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("critic.json");
        fs::write(&path, serde_json::to_vec(self)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("critic.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let model: CriticModel = serde_json::from_str(&text)?;
        model.config.validate()?;
        Ok(model)
    }
}

/// `A = r - V`.
pub fn advantage(reward: f64, baseline: f64) -> f64 {
    reward - baseline
}

fn check_batch(batch: &[CriticTarget]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Critic("critic batch is empty".into()));
    }
    if let Some((i, t)) = batch.iter().enumerate().find(|(_, t)| !t.reward.is_finite()) {
        return Err(Error::Critic(format!("item {i}: non-finite reward {}", t.reward)));
    }
    Ok(())
}

/// Identifier, number and single-symbol tokens.
fn lex(text: &str) -> impl Iterator<Item = &str> {
    let mut rest = text;
    std::iter::from_fn(move || {
        rest = rest.trim_start();
        let first = rest.chars().next()?;
        let len = if first.is_alphanumeric() || first == '_' {
            rest.find(|c: char| !(c.is_alphanumeric() || c == '_')).unwrap_or(rest.len())
        } else {
            first.len_utf8()
        };
        let (tok, tail) = rest.split_at(len);
        rest = tail;
        Some(tok)
    })
}

/// Token counts of prompt and solution hashed into separate namespaces of a
/// `dim`-wide vector, scaled to unit length.
pub fn hashed_features(prompt: &str, solution: &str, dim: usize) -> Vec<f64> {
    let mut x = vec![0.0; dim];
    for (salt, text) in [(1u64, prompt), (2u64, solution)] {
        for tok in lex(text) {
            x[(combine(salt, fnv1a64(tok.as_bytes())) % dim as u64) as usize] += 1.0;
        }
    }
    let norm = dot(&x, &x).sqrt();
    if norm > 0.0 {
        x.iter_mut().for_each(|v| *v /= norm);
    }
    x
}

fn sparse(x: Vec<f64>) -> Vec<(usize, f64)> {
    x.into_iter().enumerate().filter(|(_, v)| *v != 0.0).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn target(p: &str, s: &str, r: f64) -> CriticTarget {
        CriticTarget {
            prompt: p.into(),
            solution: s.into(),
            embedding: None,
            reward: r,
        }
    }

    #[test]
    fn fresh_critic_scores_zero() {
        for head in [HeadKind::Linear, HeadKind::Mlp] {
            let c = CriticModel::new(CriticConfig {
                head,
                ..CriticConfig::default()
            })
            .unwrap();
            assert_eq!(c.score("def f(a):", "    return a"), 0.0);
            assert_eq!(c.score("", ""), 0.0);
        }
    }

    #[test]
    fn advantage_values() {
        assert_eq!(advantage(50.0, 50.0), 0.0);
        assert_eq!(advantage(25.0, 10.0), 15.0);
        assert_eq!(advantage(-10.0, 0.0), -10.0);
    }

    #[test]
    fn features_are_unit_length() {
        let x = hashed_features("write a function", "return a+b", 64);
        assert!((dot(&x, &x) - 1.0).abs() < 1e-12);
        assert_eq!(hashed_features("", "", 8), vec![0.0; 8]);
    }

    #[test]
    fn lexer_splits_symbols() {
        let toks: Vec<&str> = lex("return a_1+b  *2").collect();
        assert_eq!(toks, ["return", "a_1", "+", "b", "*", "2"]);
    }

    #[test]
    fn constant_targets_are_learned() {
        for (head, lr) in [(HeadKind::Linear, 0.3), (HeadKind::Mlp, 0.02)] {
            let mut c = CriticModel::new(CriticConfig {
                head,
                learning_rate: lr,
                feature_dim: 64,
                hidden_dim: 32,
                ..CriticConfig::default()
            })
            .unwrap();
            let batch: Vec<_> = ["a", "b + a", "return 1", "x * y * z"]
                .iter()
                .map(|s| target("p", s, 50.0))
                .collect();
            for _ in 0..2000 {
                c.update(&batch).unwrap();
            }
            for t in &batch {
                let v = c.score(&t.prompt, &t.solution);
                assert!((v - 50.0).abs() < 0.5, "{head:?}: {v}");
            }
            assert!((c.score("q", "unseen") - 50.0).abs() < 50.0);
        }
    }

    #[test]
    fn exact_fit_has_zero_loss_and_no_step() {
        let mut c = CriticModel::new(CriticConfig {
            head: HeadKind::Linear,
            learning_rate: 0.5,
            ..CriticConfig::default()
        })
        .unwrap();
        let batch = vec![target("p", "a", 0.0), target("p", "b", 0.0)];
        let before = c.clone();
        assert_eq!(c.update(&batch).unwrap(), 0.0);
        assert_eq!(c, before);
    }

    #[test]
    fn tanh_head_trains() {
        let mut c = CriticModel::new(CriticConfig {
            activation: Activation::Tanh,
            learning_rate: 0.05,
            feature_dim: 32,
            hidden_dim: 16,
            ..CriticConfig::default()
        })
        .unwrap();
        let batch = vec![target("p", "a", 1.0), target("p", "b", -1.0)];
        let first = c.update(&batch).unwrap();
        for _ in 0..300 {
            c.update(&batch).unwrap();
        }
        assert!(c.loss(&batch).unwrap() < first);
    }

    #[test]
    fn non_finite_reward_rejected() {
        let mut c = CriticModel::new(CriticConfig::default()).unwrap();
        let before = c.clone();
        assert!(c.update(&[target("p", "a", 1.0), target("p", "b", f64::INFINITY)]).is_err());
        assert!(c.update(&[]).is_err());
        assert_eq!(c, before);
    }

    #[test]
    fn embedding_features() {
        let c = CriticModel::new(CriticConfig {
            features: FeatureSource::Embedding,
            feature_dim: 3,
            head: HeadKind::Linear,
            ..CriticConfig::default()
        })
        .unwrap();
        assert_eq!(c.features("p", "s", Some(&[1.0, 2.0, 3.0])).unwrap(), vec![1.0, 2.0, 3.0]);
        assert!(c.features("p", "s", Some(&[1.0])).is_err());
        assert_eq!(c.features("p", "s", None).unwrap(), hashed_features("p", "s", 3));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = CriticModel::new(CriticConfig {
            learning_rate: 0.1,
            feature_dim: 16,
            hidden_dim: 8,
            ..CriticConfig::default()
        })
        .unwrap();
        c.update(&[target("p", "a", 3.0)]).unwrap();
        c.save(dir.path()).unwrap();
        let d = CriticModel::load(dir.path()).unwrap();
        assert_eq!(c, d);
        assert_eq!(c.score("p", "a").to_bits(), d.score("p", "a").to_bits());
    }
}
