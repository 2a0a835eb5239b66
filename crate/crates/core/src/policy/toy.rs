use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{argmax, check_update_batch, draw, log_softmax, nucleus_filter, softmax, DecodingMode, DecodingParams, Policy, Sample, UpdateItem};
use crate::error::{Error, Result};
use crate::util::{combine, fnv1a64};

/// Characters the built-in toy problems are written in.
pub const TOY_ALPHABET: &str = " retunab+-*1";

const BOS: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyPolicyConfig {
    /// Symbols of the character vocabulary; end-of-sequence is added on top.
    pub vocabulary: String,
    pub context_window: usize,
    pub backoff_buckets: usize,
    /// Standard deviation of the initial backoff logits; zero gives a uniform
    /// policy.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for ToyPolicyConfig {
    fn default() -> Self {
        ToyPolicyConfig {
            vocabulary: TOY_ALPHABET.to_string(),
            context_window: 3,
            backoff_buckets: 1024,
            init_scale: 0.0,
            seed: 0,
        }
    }
}

/// Log-linear parameters. The logits at a position are
/// `exact[hash(prompt, last k tokens)] + backoff[hash(last k tokens) % buckets]`,
/// with an absent exact entry contributing zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ToyParams {
    pub exact: BTreeMap<u64, Vec<f64>>,
    pub backoff: Vec<f64>,
}

impl ToyParams {
    fn add_scaled(&mut self, other: &ToyParams, scale: f64) {
        for (k, g) in &other.exact {
            if g.iter().all(|x| *x == 0.0) {
                continue;
            }
            let entry = self.exact.entry(*k).or_insert_with(|| vec![0.0; g.len()]);
            for (w, d) in entry.iter_mut().zip(g) {
                *w += scale * d;
            }
        }
        for (w, d) in self.backoff.iter_mut().zip(&other.backoff) {
            *w += scale * d;
        }
    }

    /// All parameters in a fixed order: exact entries by key, then backoff.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.exact.values().flatten().copied().collect();
        out.extend_from_slice(&self.backoff);
        out
    }

    pub fn set_flat(&mut self, index: usize, value: f64) {
        let mut i = index;
        for v in self.exact.values_mut() {
            if i < v.len() {
                v[i] = value;
                return;
            }
            i -= v.len();
        }
        self.backoff[i] = value;
    }
}

pub struct ToyPolicy {
    config: ToyPolicyConfig,
    symbols: Vec<char>,
    index: HashMap<char, u32>,
    params: ToyParams,
    reference: Option<ToyParams>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    config: ToyPolicyConfig,
    params: ToyParams,
    reference: Option<ToyParams>,
}

#[derive(Clone, Copy)]
struct Position {
    exact: u64,
    bucket: usize,
}

impl ToyPolicy {
    pub fn new(config: ToyPolicyConfig) -> Result<Self> {
        let symbols: Vec<char> = config.vocabulary.chars().collect();
        if symbols.is_empty() {
            return Err(Error::Policy("toy policy vocabulary is empty".into()));
        }
        let mut index = HashMap::new();
        for (i, c) in symbols.iter().enumerate() {
            if index.insert(*c, i as u32).is_some() {
                return Err(Error::Policy(format!("duplicate vocabulary symbol {c:?}")));
            }
        }
        if config.backoff_buckets == 0 {
            return Err(Error::Policy("backoff_buckets must be positive".into()));
        }
        let v = symbols.len() + 1;
        let mut backoff = vec![0.0; config.backoff_buckets * v];
        if config.init_scale > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            for w in backoff.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *w = config.init_scale * z;
            }
        }
        Ok(ToyPolicy {
            config,
            symbols,
            index,
            params: ToyParams {
                exact: BTreeMap::new(),
                backoff,
            },
            reference: None,
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("policy.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        let mut policy = ToyPolicy::new(ckpt.config)?;
        if ckpt.params.backoff.len() != policy.params.backoff.len() {
            return Err(Error::Policy("checkpoint backoff table has the wrong size".into()));
        }
        policy.params = ckpt.params;
        policy.reference = ckpt.reference;
        Ok(policy)
    }

    pub fn config(&self) -> &ToyPolicyConfig {
        &self.config
    }

    /// Vocabulary size including end-of-sequence.
    pub fn vocab_size(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn eos(&self) -> u32 {
        self.symbols.len() as u32
    }

    pub fn params(&self) -> &ToyParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ToyParams {
        &mut self.params
    }

    pub fn reference(&self) -> Option<&ToyParams> {
        self.reference.as_ref()
    }

    /// Character tokens of `text` followed by end-of-sequence.
    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        let mut out = Vec::with_capacity(text.len() + 1);
        for c in text.chars() {
            let id = self
                .index
                .get(&c)
                .ok_or_else(|| Error::Policy(format!("symbol {c:?} is not in the toy vocabulary")))?;
            out.push(*id);
        }
        out.push(self.eos());
        Ok(out)
    }

    pub fn detokenize(&self, tokens: &[u32]) -> String {
        tokens
            .iter()
            .filter_map(|t| self.symbols.get(*t as usize))
            .collect()
    }

    fn positions(&self, prompt: &str, tokens: &[u32]) -> Vec<Position> {
        let prompt_key = fnv1a64(prompt.as_bytes());
        (0..=tokens.len()).map(|t| self.position(prompt_key, &tokens[..t])).collect()
    }

    fn position(&self, prompt_key: u64, history: &[u32]) -> Position {
        let k = self.config.context_window;
        let mut gram = 0x51_7c_c1_b7_27_22_0a_95u64;
        for j in 0..k {
            let tok = if history.len() + j >= k {
                history[history.len() + j - k]
            } else {
                BOS
            };
            gram = combine(gram, u64::from(tok));
        }
        Position {
            exact: combine(prompt_key, gram),
            bucket: (combine(self.config.seed, gram) % self.config.backoff_buckets as u64) as usize,
        }
    }

    fn logits(&self, params: &ToyParams, pos: Position) -> Vec<f64> {
        let v = self.vocab_size();
        let mut logits = params.backoff[pos.bucket * v..(pos.bucket + 1) * v].to_vec();
        if let Some(exact) = params.exact.get(&pos.exact) {
            for (l, e) in logits.iter_mut().zip(exact) {
                *l += e;
            }
        }
        logits
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        let v = self.vocab_size() as u32;
        if let Some(bad) = tokens.iter().find(|t| **t >= v) {
            return Err(Error::Policy(format!("token id {bad} outside the vocabulary")));
        }
        Ok(())
    }

    fn resolve_tokens(&self, item: &UpdateItem) -> Result<Vec<u32>> {
        match &item.tokens {
            Some(t) => {
                self.check_tokens(t)?;
                Ok(t.clone())
            }
            None => self.tokenize(&item.completion),
        }
    }

    fn sequence_logps(&self, params: &ToyParams, prompt: &str, tokens: &[u32]) -> Vec<f64> {
        let positions = self.positions(prompt, tokens);
        tokens
            .iter()
            .zip(&positions)
            .map(|(tok, pos)| log_softmax(&self.logits(params, *pos))[*tok as usize])
            .collect()
    }

    /// `sum_i w_i * A_i * log pi(completion_i | prompt_i)` at the current parameters.
    pub fn objective(&self, batch: &[UpdateItem]) -> Result<f64> {
        let mut total = 0.0;
        for item in batch {
            let tokens = self.resolve_tokens(item)?;
            let logp: f64 = self.sequence_logps(&self.params, &item.prompt, &tokens).iter().sum();
            total += item.weight * item.advantage * logp;
        }
        Ok(total)
    }

    /// Analytic gradient of [`ToyPolicy::objective`]. Each position adds
    /// `coef * (onehot(token) - softmax(logits))` to both the exact and the
    /// backoff row it reads from.
    pub fn gradient(&self, batch: &[UpdateItem]) -> Result<ToyParams> {
        let v = self.vocab_size();
        let mut grad = ToyParams {
            exact: BTreeMap::new(),
            backoff: vec![0.0; self.params.backoff.len()],
        };
        for item in batch {
            let coef = item.weight * item.advantage;
            let tokens = self.resolve_tokens(item)?;
            let positions = self.positions(&item.prompt, &tokens);
            for (tok, pos) in tokens.iter().zip(&positions) {
                let probs = softmax(&self.logits(&self.params, *pos));
                let row = grad.exact.entry(pos.exact).or_insert_with(|| vec![0.0; v]);
                for (j, p) in probs.iter().enumerate() {
                    let g = coef * (if j == *tok as usize { 1.0 } else { 0.0 } - p);
                    row[j] += g;
                    grad.backoff[pos.bucket * v + j] += g;
                }
            }
        }
        Ok(grad)
    }

    /// Inserts zero exact rows for every context the batch touches, so that
    /// [`ToyParams::flatten`] exposes them.
    pub fn materialize(&mut self, batch: &[UpdateItem]) -> Result<()> {
        let v = self.vocab_size();
        for item in batch {
            let tokens = self.resolve_tokens(item)?;
            for pos in self.positions(&item.prompt, &tokens).into_iter().take(tokens.len()) {
                self.params.exact.entry(pos.exact).or_insert_with(|| vec![0.0; v]);
            }
        }
        Ok(())
    }

    fn generate(&self, prompt: &str, params: &DecodingParams, rng: &mut ChaCha8Rng) -> Result<Sample> {
        let reference = self.reference.as_ref().unwrap_or(&self.params);
        let prompt_key = fnv1a64(prompt.as_bytes());
        let eos = self.eos();
        let mut tokens = Vec::new();
        let mut logp_policy = Vec::new();
        let mut logp_reference = Vec::new();
        while tokens.len() < params.max_len {
            let pos = self.position(prompt_key, &tokens);
            let logits = self.logits(&self.params, pos);
            let tok = match params.mode {
                DecodingMode::Greedy => argmax(&logits),
                DecodingMode::Nucleus => {
                    let scaled: Vec<f64> = logits.iter().map(|l| l / params.temperature).collect();
                    let probs = nucleus_filter(&softmax(&scaled), params.top_p)?;
                    draw(&probs, rng)
                }
            };
            logp_policy.push(log_softmax(&logits)[tok]);
            logp_reference.push(log_softmax(&self.logits(reference, pos))[tok]);
            tokens.push(tok as u32);
            if tok as u32 == eos {
                break;
            }
        }
        Ok(Sample {
            text: self.detokenize(&tokens),
            tokens,
            logp_policy,
            logp_reference,
            embedding: None,
        })
    }
}

impl Policy for ToyPolicy {
    fn backend(&self) -> String {
        "toy".into()
    }

    fn sample(&mut self, prompt: &str, n: usize, params: &DecodingParams, seed: u64) -> Result<Vec<Sample>> {
        params.validate()?;
        if self.reference.is_none() {
            return Err(Error::Policy("reference policy is not frozen".into()));
        }
        if prompt.chars().count() > params.max_len {
            return Err(Error::Policy(format!(
                "prompt of {} symbols exceeds max_len {}",
                prompt.chars().count(),
                params.max_len
            )));
        }
        (0..n)
            .map(|j| {
                let mut rng = ChaCha8Rng::seed_from_u64(combine(seed, j as u64));
                self.generate(prompt, params, &mut rng)
            })
            .collect()
    }

    fn score(&mut self, prompt: &str, completion: &str, tokens: Option<&[u32]>) -> Result<Sample> {
        let reference = self
            .reference
            .as_ref()
            .ok_or_else(|| Error::Policy("reference policy is not frozen".into()))?;
        let tokens = match tokens {
            Some(t) => {
                self.check_tokens(t)?;
                t.to_vec()
            }
            None => self.tokenize(completion)?,
        };
        Ok(Sample {
            text: self.detokenize(&tokens),
            logp_policy: self.sequence_logps(&self.params, prompt, &tokens),
            logp_reference: self.sequence_logps(reference, prompt, &tokens),
            tokens,
            embedding: None,
        })
    }

    fn apply_update(&mut self, batch: &[UpdateItem], learning_rate: f64) -> Result<f64> {
        check_update_batch(batch, learning_rate)?;
        let objective = self.objective(batch)?;
        let grad = self.gradient(batch)?;
        self.params.add_scaled(&grad, learning_rate);
        Ok(objective)
    }

    fn freeze_reference(&mut self) -> Result<()> {
        self.reference = Some(self.params.clone());
        Ok(())
    }

    fn reference_frozen(&self) -> bool {
        self.reference.is_some()
    }

    fn save(&mut self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let ckpt = Checkpoint {
            config: self.config.clone(),
            params: self.params.clone(),
            reference: self.reference.clone(),
        };
        let path = dir.join("policy.json");
        fs::write(&path, serde_json::to_vec(&ckpt)?).map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frozen(config: ToyPolicyConfig) -> ToyPolicy {
        let mut p = ToyPolicy::new(config).unwrap();
        p.freeze_reference().unwrap();
        p
    }

    fn item(prompt: &str, completion: &str, advantage: f64, weight: f64) -> UpdateItem {
        UpdateItem {
            prompt: prompt.into(),
            completion: completion.into(),
            tokens: None,
            advantage,
            weight,
        }
    }

    #[test]
    fn empty_vocabulary_is_rejected() {
        let cfg = ToyPolicyConfig {
            vocabulary: String::new(),
            ..ToyPolicyConfig::default()
        };
        assert!(ToyPolicy::new(cfg).is_err());
    }

    #[test]
    fn zero_logits_are_uniform() {
        let mut p = frozen(ToyPolicyConfig::default());
        let s = p.score("p", "ab", None).unwrap();
        let uniform = -(p.vocab_size() as f64).ln();
        for lp in &s.logp_policy {
            assert!((lp - uniform).abs() < 1e-12);
        }
    }

    #[test]
    fn sample_requires_frozen_reference() {
        let mut p = ToyPolicy::new(ToyPolicyConfig::default()).unwrap();
        assert!(p.sample("x", 1, &DecodingParams::default(), 0).is_err());
    }

    #[test]
    fn long_prompt_is_rejected_before_generation() {
        let mut p = frozen(ToyPolicyConfig::default());
        let params = DecodingParams {
            max_len: 4,
            ..DecodingParams::default()
        };
        assert!(p.sample("longer than four", 1, &params, 0).is_err());
    }

    #[test]
    fn sampled_logps_match_score() {
        let mut p = frozen(ToyPolicyConfig {
            init_scale: 1.0,
            seed: 3,
            ..ToyPolicyConfig::default()
        });
        p.apply_update(&[item("q", " return a", 2.0, 1.0)], 0.1).unwrap();
        let params = DecodingParams {
            max_len: 12,
            ..DecodingParams::default()
        };
        for s in p.sample("q", 16, &params, 42).unwrap() {
            let scored = p.score("q", &s.text, Some(&s.tokens)).unwrap();
            assert_eq!(scored.logp_policy, s.logp_policy);
            assert_eq!(scored.logp_reference, s.logp_reference);
            assert!(s.tokens.len() <= 12);
        }
    }

    #[test]
    fn greedy_is_deterministic() {
        let mut p = frozen(ToyPolicyConfig {
            init_scale: 0.5,
            seed: 11,
            ..ToyPolicyConfig::default()
        });
        let params = DecodingParams {
            max_len: 20,
            ..DecodingParams::default()
        };
        let a = p.greedy("x", &params).unwrap();
        let b = p.greedy("x", &params).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn collapsed_policy_samples_identically() {
        let mut p = frozen(ToyPolicyConfig::default());
        for _ in 0..40 {
            p.apply_update(&[item("x", " return a", 1.0, 1.0)], 1.0).unwrap();
        }
        let params = DecodingParams {
            max_len: 20,
            ..DecodingParams::default()
        };
        let samples = p.sample("x", 8, &params, 5).unwrap();
        assert!(samples.iter().all(|s| s.text == " return a"));
        assert_eq!(p.greedy("x", &params).unwrap().text, " return a");
    }

    #[test]
    fn zero_advantage_leaves_parameters() {
        let mut p = frozen(ToyPolicyConfig::default());
        let before = p.params().clone();
        p.apply_update(&[item("x", "ab", 0.0, 1.0), item("y", "ba", 0.0, 0.5)], 0.3).unwrap();
        assert_eq!(p.params(), &before);
    }

    #[test]
    fn positive_advantage_raises_likelihood() {
        let mut p = frozen(ToyPolicyConfig {
            init_scale: 0.3,
            seed: 1,
            ..ToyPolicyConfig::default()
        });
        let before: f64 = p.score("x", "tuna", None).unwrap().logp_policy.iter().sum();
        p.apply_update(&[item("x", "tuna", 3.0, 1.0)], 1e-3).unwrap();
        let after: f64 = p.score("x", "tuna", None).unwrap().logp_policy.iter().sum();
        assert!(after > before);
    }

    #[test]
    fn weight_scales_update_linearly() {
        let base = ToyPolicyConfig {
            init_scale: 0.4,
            seed: 9,
            ..ToyPolicyConfig::default()
        };
        let start = frozen(base.clone()).params().flatten();
        let mut full = frozen(base.clone());
        full.apply_update(&[item("x", "nab", 2.0, 1.0)], 0.01).unwrap();
        let mut fifth = frozen(base);
        fifth.apply_update(&[item("x", "nab", 2.0, 0.2)], 0.01).unwrap();
        // exact rows are created on update; compare through the backoff table
        let (a, b) = (full.params().flatten(), fifth.params().flatten());
        let n = start.len();
        let (a, b) = (&a[a.len() - n..], &b[b.len() - n..]);
        for i in 0..n {
            let d_full = a[i] - start[i];
            let d_fifth = b[i] - start[i];
            assert!((d_fifth - 0.2 * d_full).abs() <= 1e-12 * (1.0 + d_full.abs()), "{i}: {d_fifth} vs {d_full}");
        }
        let ea: Vec<f64> = full.params().exact.values().flatten().copied().collect();
        let eb: Vec<f64> = fifth.params().exact.values().flatten().copied().collect();
        for (x, y) in ea.iter().zip(&eb) {
            assert!((y - 0.2 * x).abs() <= 1e-15);
        }
    }

    #[test]
    fn reference_is_invariant_after_freeze() {
        let mut p = frozen(ToyPolicyConfig::default());
        let corpus = ["ab", "retun", "a+b"];
        let before: Vec<Vec<f64>> = corpus.iter().map(|c| p.score("x", c, None).unwrap().logp_reference).collect();
        for i in 0..1000 {
            let c = corpus[i % 3];
            p.apply_update(&[item("x", c, if i % 2 == 0 { 1.0 } else { -0.5 }, 1.0)], 0.05).unwrap();
        }
        let after: Vec<Vec<f64>> = corpus.iter().map(|c| p.score("x", c, None).unwrap().logp_reference).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn non_finite_advantage_rejects_batch() {
        let mut p = frozen(ToyPolicyConfig::default());
        let before = p.params().clone();
        assert!(p.apply_update(&[item("x", "a", 1.0, 1.0), item("x", "b", f64::NAN, 1.0)], 0.1).is_err());
        assert_eq!(p.params(), &before);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = frozen(ToyPolicyConfig {
            init_scale: 0.2,
            seed: 4,
            ..ToyPolicyConfig::default()
        });
        p.apply_update(&[item("x", "tab", 1.5, 1.0)], 0.1).unwrap();
        p.save(dir.path()).unwrap();
        let mut q = ToyPolicy::load(dir.path()).unwrap();
        assert_eq!(p.score("x", "tab", None).unwrap(), q.score("x", "tab", None).unwrap());
        assert_eq!(p.params(), q.params());
    }

    #[test]
    fn unknown_symbol_is_an_error() {
        let mut p = frozen(ToyPolicyConfig::default());
        assert!(p.score("x", "return x", None).is_err());
    }
}
