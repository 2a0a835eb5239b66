//! Greedy solve rate and the unbiased pass@k estimator.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{make_prompt, program_for_completion, Problem};
use crate::error::{Error, Result};
use crate::policy::{DecodingParams, Policy};
use crate::sandbox::{ExecutionLimits, Sandbox};
use crate::util::{combine, derive_seed, fnv1a64};

/// Largest integer every smaller one of which is exact in an `f64`.
const EXACT_LIMIT: u128 = 1 << 53;

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Probability that at least one of `k` draws without replacement from `n`
/// samples, `c` of them correct, is correct:
/// `1 - prod_{i=n-c+1}^{n} (1 - k/i)`, and 1 when `n - c < k`.
///
/// The product is carried as a reduced integer fraction while it stays
/// below 2^53, so the result is the correctly rounded value of the exact
/// estimate; larger cases fall back to the floating-point product.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Eval("k must be at least 1".into()));
    }
    if k > n {
        return Err(Error::Eval(format!("k = {k} exceeds n = {n}")));
    }
    if c > n {
        return Err(Error::Eval(format!("c = {c} exceeds n = {n}")));
    }
    if n - c < k {
        return Ok(1.0);
    }
    let (mut num, mut den) = (1u128, 1u128);
    let mut exact = true;
    for i in (n - c + 1)..=n {
        let (a, b) = ((i - k) as u128, i as u128);
        num *= a;
        den *= b;
        let g = gcd(num, den).max(1);
        num /= g;
        den /= g;
        if den >= EXACT_LIMIT {
            exact = false;
            break;
        }
    }
    if exact {
        return Ok((den - num) as f64 / den as f64);
    }
    let product: f64 = ((n - c + 1)..=n).map(|i| 1.0 - k as f64 / i as f64).product();
    Ok(1.0 - product)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_samples: usize,
    pub ks: Vec<usize>,
    pub decoding: DecodingParams,
    pub limits: ExecutionLimits,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_samples: 200,
            ks: vec![1, 10, 100],
            decoding: DecodingParams::default(),
            limits: ExecutionLimits::default(),
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() {
            return Err(Error::Config("ks must not be empty".into()));
        }
        if let Some(k) = self.ks.iter().find(|&&k| k == 0 || k > self.n_samples) {
            return Err(Error::Config(format!(
                "k = {k} must lie in 1..={} (n_samples)",
                self.n_samples
            )));
        }
        self.decoding.validate()?;
        self.limits.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemReport {
    pub problem_id: String,
    pub n: usize,
    pub c: usize,
    pub greedy_pass: bool,
    /// Keyed by k.
    pub pass_at_k: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub ks: Vec<usize>,
    pub decoding: DecodingParams,
    pub problems: Vec<ProblemReport>,
    pub greedy_rate: f64,
    /// Mean over problems of the per-problem estimates, keyed by k.
    pub pass_at_k: BTreeMap<usize, f64>,
    /// Seconds since the Unix epoch, filled in by callers that want it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_unix: Option<u64>,
}

impl EvalReport {
    fn empty(config: &EvalConfig) -> Self {
        EvalReport {
            n_samples: config.n_samples,
            ks: config.ks.clone(),
            decoding: config.decoding,
            problems: Vec::new(),
            greedy_rate: 0.0,
            pass_at_k: BTreeMap::new(),
            created_unix: None,
        }
    }

    fn aggregate(&mut self) {
        let m = self.problems.len();
        if m == 0 {
            return;
        }
        self.greedy_rate = self.problems.iter().filter(|p| p.greedy_pass).count() as f64 / m as f64;
        self.pass_at_k = self
            .ks
            .iter()
            .map(|&k| (k, self.problems.iter().map(|p| p.pass_at_k[&k]).sum::<f64>() / m as f64))
            .collect();
    }

    /// Tab-separated table, one row per problem plus a final `ALL` row.
    pub fn to_table(&self) -> String {
        let mut out = String::from("problem_id\tn\tc\tgreedy");
        for k in &self.ks {
            let _ = write!(out, "\tpass@{k}");
        }
        out.push('\n');
        for p in &self.problems {
            let _ = write!(out, "{}\t{}\t{}\t{}", p.problem_id, p.n, p.c, u8::from(p.greedy_pass));
            for k in &self.ks {
                let _ = write!(out, "\t{}", p.pass_at_k[k]);
            }
            out.push('\n');
        }
        let _ = write!(out, "ALL\t{}\t\t{}", self.n_samples, self.greedy_rate);
        for k in &self.ks {
            let _ = write!(out, "\t{}", self.pass_at_k.get(k).copied().unwrap_or(0.0));
        }
        out.push('\n');
        out
    }
}

/// An evaluation cut short by a hard sandbox or policy error.
#[derive(Debug, thiserror::Error)]
#[error("evaluation aborted after {} problems: {error}", report.problems.len())]
pub struct PartialEval {
    pub report: EvalReport,
    pub error: Error,
}

/// Samples `n_samples` completions per problem plus one greedy completion,
/// executes them and aggregates pass@k and greedy solve rate.
pub fn evaluate(
    problems: &[Problem],
    policy: &mut dyn Policy,
    sandbox: &Sandbox,
    config: &EvalConfig,
) -> std::result::Result<EvalReport, PartialEval> {
    let mut report = EvalReport::empty(config);
    if let Err(error) = config.validate() {
        return Err(PartialEval { report, error });
    }
    let base = derive_seed(config.seed, "evaluate", 0);
    for p in problems {
        match evaluate_problem(p, policy, sandbox, config, combine(base, fnv1a64(p.id.as_bytes()))) {
            Ok(r) => report.problems.push(r),
            Err(error) => {
                report.aggregate();
                return Err(PartialEval { report, error });
            }
        }
    }
    report.aggregate();
    Ok(report)
}

fn evaluate_problem(
    problem: &Problem,
    policy: &mut dyn Policy,
    sandbox: &Sandbox,
    config: &EvalConfig,
    seed: u64,
) -> Result<ProblemReport> {
    let prompt = make_prompt(problem);
    let samples = policy.sample(&prompt, config.n_samples, &config.decoding, seed)?;
    if samples.len() != config.n_samples {
        return Err(Error::Policy(format!(
            "asked for {} samples, got {}",
            config.n_samples,
            samples.len()
        )));
    }
    let greedy = policy.greedy(&prompt, &config.decoding)?;
    let mut jobs: Vec<(String, Vec<String>)> = samples
        .iter()
        .map(|s| (program_for_completion(problem, &s.text), problem.tests.clone()))
        .collect();
    jobs.push((program_for_completion(problem, &greedy.text), problem.tests.clone()));
    let mut outcomes = Vec::with_capacity(jobs.len());
    for o in sandbox.run_many(&jobs, &config.limits) {
        outcomes.push(o?.all_passed());
    }
    let greedy_pass = outcomes.pop().expect("greedy outcome");
    let c = outcomes.iter().filter(|ok| **ok).count();
    let pass_at_k = config
        .ks
        .iter()
        .map(|&k| Ok((k, pass_at_k(config.n_samples, c, k)?)))
        .collect::<Result<_>>()?;
    Ok(ProblemReport {
        problem_id: problem.id.clone(),
        n: config.n_samples,
        c,
        greedy_pass,
        pass_at_k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn estimator_values() {
        assert_eq!(pass_at_k(200, 0, 1).unwrap(), 0.0);
        assert_eq!(pass_at_k(200, 0, 100).unwrap(), 0.0);
        assert_eq!(pass_at_k(2, 1, 1).unwrap(), 0.5);
        assert_eq!(pass_at_k(5, 2, 3).unwrap(), 0.9);
        assert_eq!(pass_at_k(10, 10, 1).unwrap(), 1.0);
        assert_eq!(pass_at_k(10, 8, 3).unwrap(), 1.0);
    }

    #[test]
    fn estimator_errors() {
        assert!(pass_at_k(5, 1, 6).is_err());
        assert!(pass_at_k(5, 6, 1).is_err());
        assert!(pass_at_k(5, 1, 0).is_err());
    }

    #[test]
    fn large_n_falls_back_to_floating_product() {
        let v = pass_at_k(200, 37, 10).unwrap();
        let product: f64 = (164..=200).map(|i| 1.0 - 10.0 / i as f64).product();
        assert!((v - (1.0 - product)).abs() < 1e-12);
        assert!(v > 0.0 && v < 1.0);
    }

    #[test]
    fn config_rejects_k_above_n() {
        let cfg = EvalConfig {
            n_samples: 5,
            ks: vec![1, 10],
            ..EvalConfig::default()
        };
        assert!(cfg.validate().is_err());
        EvalConfig::default().validate().unwrap();
    }

    #[test]
    fn table_layout() {
        let mut r = EvalReport::empty(&EvalConfig {
            n_samples: 4,
            ks: vec![1, 2],
            ..EvalConfig::default()
        });
        r.problems.push(ProblemReport {
            problem_id: "p".into(),
            n: 4,
            c: 2,
            greedy_pass: true,
            pass_at_k: [(1, 0.5), (2, pass_at_k(4, 2, 2).unwrap())].into(),
        });
        r.aggregate();
        assert_eq!(r.to_table(), "problem_id\tn\tc\tgreedy\tpass@1\tpass@2\np\t4\t2\t1\t0.5\t0.8333333333333334\nALL\t4\t\t1\t0.5\t0.8333333333333334\n");
    }

    proptest! {
        #[test]
        fn monotone_in_k_c_and_n(n in 1usize..60, c in 0usize..60, k in 1usize..60) {
            let c = c.min(n);
            let k = k.min(n);
            let v = pass_at_k(n, c, k).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
            if k < n { prop_assert!(pass_at_k(n, c, k + 1).unwrap() >= v); }
            if c < n { prop_assert!(pass_at_k(n, c + 1, k).unwrap() >= v); }
            prop_assert!(pass_at_k(n + 1, c, k).unwrap() <= v);
            prop_assert_eq!(pass_at_k(n, c, n).unwrap() == 1.0, c >= 1);
        }
    }
}
