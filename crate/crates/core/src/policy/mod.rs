//! The policy capability: sampling, scoring, advantage-weighted updates and a
//! frozen reference snapshot.
//!
//! Two implementations ship: [`ToyPolicy`], a tabular log-linear character
//! model with analytic gradients, and [`ExternalPolicy`], a client for the
//! line-delimited wire protocol in [`protocol`] that lets a real language
//! model run in another process.

pub mod protocol;
mod toy;

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reward::RewardRecord;

pub use protocol::ExternalPolicy;
pub use toy::{ToyParams, ToyPolicy, ToyPolicyConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DecodingMode {
    #[default]
    Nucleus,
    Greedy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodingParams {
    pub top_p: f64,
    pub temperature: f64,
    pub max_len: usize,
    pub mode: DecodingMode,
}

impl Default for DecodingParams {
    fn default() -> Self {
        DecodingParams {
            top_p: 0.8,
            temperature: 0.95,
            max_len: 512,
            mode: DecodingMode::Nucleus,
        }
    }
}

impl DecodingParams {
    pub fn greedy(self) -> Self {
        DecodingParams {
            mode: DecodingMode::Greedy,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p must lie in (0, 1], got {}", self.top_p)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Generated,
    Buffer,
}

/// A completion as produced or scored by a policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub text: String,
    pub tokens: Vec<u32>,
    pub logp_policy: Vec<f64>,
    pub logp_reference: Vec<f64>,
    /// Final-token representation, when the policy exposes one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

impl Sample {
    pub fn sequence_logp(&self) -> f64 {
        self.logp_policy.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub problem_id: String,
    pub prompt: String,
    pub tokens: Vec<u32>,
    /// Decoded completion.
    pub text: String,
    pub logp_policy: Vec<f64>,
    pub logp_reference: Vec<f64>,
    pub origin: Origin,
    pub reward: Option<RewardRecord>,
    pub advantage: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn from_sample(problem_id: &str, prompt: &str, sample: Sample, origin: Origin) -> Self {
        Trajectory {
            problem_id: problem_id.to_string(),
            prompt: prompt.to_string(),
            tokens: sample.tokens,
            text: sample.text,
            logp_policy: sample.logp_policy,
            logp_reference: sample.logp_reference,
            origin,
            reward: None,
            advantage: None,
            embedding: sample.embedding,
        }
    }
}

/// One element of an update batch: maximize `weight * advantage * log pi(completion | prompt)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateItem {
    pub prompt: String,
    pub completion: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<u32>>,
    pub advantage: f64,
    pub weight: f64,
}

pub trait Policy: Send {
    /// Short backend name for run metadata.
    fn backend(&self) -> String;

    /// Draws `n` completions. `seed` fixes the draw.
    fn sample(&mut self, prompt: &str, n: usize, params: &DecodingParams, seed: u64) -> Result<Vec<Sample>>;

    /// Per-token log-probabilities of `completion` under the current and the
    /// reference parameters. When `tokens` is given it is scored verbatim;
    /// otherwise the completion is tokenized and terminated.
    fn score(&mut self, prompt: &str, completion: &str, tokens: Option<&[u32]>) -> Result<Sample>;

    /// One gradient ascent step on `sum_i w_i * A_i * log pi(completion_i)`.
    /// Returns the objective before the step.
    fn apply_update(&mut self, batch: &[UpdateItem], learning_rate: f64) -> Result<f64>;

    fn freeze_reference(&mut self) -> Result<()>;

    fn reference_frozen(&self) -> bool;

    /// Writes a checkpoint into `dir`.
    fn save(&mut self, dir: &Path) -> Result<()>;

    fn greedy(&mut self, prompt: &str, params: &DecodingParams) -> Result<Sample> {
        let params = params.greedy();
        let mut out = self.sample(prompt, 1, &params, 0)?;
        out.pop().ok_or_else(|| Error::Policy("greedy decoding returned nothing".into()))
    }
}

/// Samples `n` trajectories for one problem.
pub fn sample_batch(
    policy: &mut dyn Policy,
    problem_id: &str,
    prompt: &str,
    n: usize,
    params: &DecodingParams,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    params.validate()?;
    let samples = policy.sample(prompt, n, params, seed)?;
    if samples.len() != n {
        return Err(Error::Policy(format!("asked for {n} samples, got {}", samples.len())));
    }
    let mut out = Vec::with_capacity(n);
    for s in samples {
        if s.tokens.len() != s.logp_policy.len() || s.tokens.len() != s.logp_reference.len() {
            return Err(Error::Policy("sample has mismatched token and log-probability tracks".into()));
        }
        if s.tokens.len() > params.max_len {
            return Err(Error::Policy(format!("sample exceeds max_len {}", params.max_len)));
        }
        out.push(Trajectory::from_sample(problem_id, prompt, s, Origin::Generated));
    }
    Ok(out)
}

pub(crate) fn check_update_batch(batch: &[UpdateItem], learning_rate: f64) -> Result<()> {
    if !learning_rate.is_finite() || learning_rate < 0.0 {
        return Err(Error::Policy(format!("invalid learning rate {learning_rate}")));
    }
    for (i, item) in batch.iter().enumerate() {
        if !item.advantage.is_finite() {
            return Err(Error::Policy(format!("item {i}: non-finite advantage {}", item.advantage)));
        }
        if !item.weight.is_finite() || item.weight < 0.0 {
            return Err(Error::Policy(format!("item {i}: invalid weight {}", item.weight)));
        }
    }
    Ok(())
}

/// Keeps the smallest set of most probable entries whose mass reaches
/// `top_p` (ties resolved by index order) and renormalizes it.
pub fn nucleus_filter(distribution: &[f64], top_p: f64) -> Result<Vec<f64>> {
    if !(top_p > 0.0) || top_p > 1.0 || top_p.is_nan() {
        return Err(Error::Policy(format!("top_p must lie in (0, 1], got {top_p}")));
    }
    if top_p >= 1.0 {
        return Ok(distribution.to_vec());
    }
    let mut order: Vec<usize> = (0..distribution.len()).collect();
    order.sort_by(|&a, &b| distribution[b].total_cmp(&distribution[a]));
    let mut kept = vec![0.0; distribution.len()];
    let mut mass = 0.0;
    for &i in &order {
        kept[i] = distribution[i];
        mass += distribution[i];
        if mass >= top_p - NUCLEUS_EPS {
            break;
        }
    }
    if mass <= 0.0 {
        return Err(Error::Policy("distribution has no mass".into()));
    }
    Ok(kept.into_iter().map(|p| p / mass).collect())
}

const NUCLEUS_EPS: f64 = 1e-12;

pub(crate) fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// Index of the largest entry; the lowest index wins ties.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn draw(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}
