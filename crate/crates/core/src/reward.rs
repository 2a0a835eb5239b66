//! Functional reward, KL-penalized total reward and the adaptive KL
//! coefficient controller.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sandbox::ExecutionOutcome;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    /// Reward scale; a fully passing solution earns exactly this much.
    pub lambda: f64,
    /// Exponent on the pass fraction. Values below one reward the first
    /// passing test more than the last.
    pub eta: f64,
    pub compile_penalty: f64,
    /// Target mean KL. `inf` disables the constraint.
    #[serde(with = "crate::util::extended_f64")]
    pub rho: f64,
    pub zeta_init: f64,
    pub controller_gain: f64,
    pub controller_clip: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            lambda: 50.0,
            eta: 0.5,
            compile_penalty: -10.0,
            rho: 0.07,
            zeta_init: 1.0,
            controller_gain: 0.1,
            controller_clip: 0.2,
        }
    }
}

impl RewardConfig {
    /// Maximum assignable reward, handed to replay-buffer samples.
    pub fn r_max(&self) -> f64 {
        self.lambda
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("lambda must be positive".into()));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config("eta must be positive".into()));
        }
        if !self.compile_penalty.is_finite() {
            return Err(Error::Config("compile_penalty must be finite".into()));
        }
        if !(self.rho > 0.0) {
            return Err(Error::Config("rho must be positive (use inf to disable)".into()));
        }
        if !(self.zeta_init >= 0.0 && self.zeta_init.is_finite()) {
            return Err(Error::Config("zeta_init must be nonnegative".into()));
        }
        if !(self.controller_gain > 0.0 && self.controller_gain < 1.0) {
            return Err(Error::Config("controller_gain must lie in (0, 1)".into()));
        }
        if !(self.controller_clip > 0.0 && self.controller_clip.is_finite()) {
            return Err(Error::Config("controller_clip must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub functional: f64,
    pub kl_estimate: f64,
    pub zeta_used: f64,
    pub total: f64,
}

/// `lambda * (passed / total)^eta` for compiling code, the compile penalty
/// otherwise.
pub fn functional_reward(outcome: &ExecutionOutcome, config: &RewardConfig) -> Result<f64> {
    if !outcome.compiled {
        return Ok(config.compile_penalty);
    }
    if outcome.total_tests == 0 {
        return Err(Error::Reward("compiled outcome with zero tests has no pass fraction".into()));
    }
    let fraction = outcome.passed_tests as f64 / outcome.total_tests as f64;
    Ok(config.lambda * fraction.powf(config.eta))
}

/// Single-sample estimate of the sequence KL between the policy and the
/// reference: the summed per-token log-ratio along the sampled trajectory.
pub fn sequence_kl(logp_policy: &[f64], logp_reference: &[f64]) -> Result<f64> {
    if logp_policy.len() != logp_reference.len() {
        return Err(Error::Reward(format!(
            "log-probability tracks differ in length ({} vs {})",
            logp_policy.len(),
            logp_reference.len()
        )));
    }
    Ok(logp_policy.iter().zip(logp_reference).map(|(p, r)| p - r).sum())
}

pub fn total_reward(functional: f64, kl: f64, zeta: f64) -> RewardRecord {
    let total = functional - zeta * kl;
    RewardRecord {
        functional,
        kl_estimate: kl,
        zeta_used: zeta,
        total,
    }
}

/// Record for a solution drawn from the replay buffer: the maximum reward,
/// no KL term.
pub fn buffer_reward(config: &RewardConfig, zeta: f64) -> RewardRecord {
    RewardRecord {
        functional: config.r_max(),
        kl_estimate: 0.0,
        zeta_used: zeta,
        total: config.r_max(),
    }
}

/// Proportional controller step:
/// `e = clip((kl - rho) / rho, -clip, clip)`, `zeta <- zeta * (1 + gain * e)`.
pub fn update_zeta(measured_mean_kl: f64, config: &RewardConfig, zeta: f64) -> Result<f64> {
    if !(config.rho > 0.0) {
        return Err(Error::Config("rho must be positive".into()));
    }
    if !(zeta >= 0.0) {
        return Err(Error::Reward(format!("zeta must be nonnegative, got {zeta}")));
    }
    if !measured_mean_kl.is_finite() {
        return Err(Error::Reward(format!("measured KL is not finite: {measured_mean_kl}")));
    }
    let clip = config.controller_clip;
    let error = if config.rho.is_infinite() {
        -clip
    } else {
        ((measured_mean_kl - config.rho) / config.rho).clamp(-clip, clip)
    };
    Ok(zeta * (1.0 + config.controller_gain * error))
}

/// Stateful wrapper owned by the trainer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlController {
    pub zeta: f64,
}

impl KlController {
    pub fn new(config: &RewardConfig) -> Self {
        KlController { zeta: config.zeta_init }
    }

    pub fn update(&mut self, measured_mean_kl: f64, config: &RewardConfig) -> Result<f64> {
        self.zeta = update_zeta(measured_mean_kl, config, self.zeta)?;
        Ok(self.zeta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sandbox::TestStatus;
    use proptest::prelude::*;

    fn outcome(passed: usize, total: usize) -> ExecutionOutcome {
        let mut per_test = vec![TestStatus::Passed; passed];
        per_test.extend(vec![TestStatus::Failed; total - passed]);
        ExecutionOutcome::from_statuses(per_test, String::new())
    }

    #[test]
    fn functional_values() {
        let cfg = RewardConfig::default();
        assert_eq!(functional_reward(&outcome(4, 4), &cfg).unwrap(), 50.0);
        assert_eq!(functional_reward(&outcome(1, 4), &cfg).unwrap(), 25.0);
        assert_eq!(functional_reward(&outcome(0, 4), &cfg).unwrap(), 0.0);
        let broken = ExecutionOutcome::not_compiled(4, "SyntaxError".into());
        assert_eq!(functional_reward(&broken, &cfg).unwrap(), -10.0);
    }

    #[test]
    fn zero_tests_is_an_error() {
        let empty = ExecutionOutcome::from_statuses(vec![], String::new());
        assert!(functional_reward(&empty, &RewardConfig::default()).is_err());
    }

    #[test]
    fn kl_values() {
        assert_eq!(sequence_kl(&[-0.3, -2.0], &[-0.3, -2.0]).unwrap(), 0.0);
        assert_eq!(sequence_kl(&[-1.0, -1.0], &[-1.5, -1.5]).unwrap(), 1.0);
        assert_eq!(sequence_kl(&[], &[]).unwrap(), 0.0);
        assert!(sequence_kl(&[-1.0], &[]).is_err());
    }

    #[test]
    fn total_values() {
        assert!((total_reward(50.0, 0.1, 1.0).total - 49.9).abs() < 1e-12);
        assert_eq!(total_reward(-10.0, 0.5, 2.0).total, -11.0);
        assert_eq!(total_reward(12.5, 0.0, 7.0).total, 12.5);
    }

    #[test]
    fn controller_steps() {
        let cfg = RewardConfig::default();
        assert_eq!(update_zeta(cfg.rho, &cfg, 1.5).unwrap(), 1.5);
        assert!((update_zeta(2.0 * cfg.rho, &cfg, 1.0).unwrap() - 1.02).abs() < 1e-15);
        assert!((update_zeta(0.0, &cfg, 1.0).unwrap() - 0.98).abs() < 1e-15);
        let bad = RewardConfig { rho: 0.0, ..cfg };
        assert!(update_zeta(0.1, &bad, 1.0).is_err());
    }

    #[test]
    fn infinite_rho_decays_zeta() {
        let cfg = RewardConfig {
            rho: f64::INFINITY,
            ..RewardConfig::default()
        };
        let mut c = KlController::new(&cfg);
        for _ in 0..200 {
            c.update(5.0, &cfg).unwrap();
        }
        assert!(c.zeta < 0.02 && c.zeta >= 0.0);
    }

    #[test]
    fn infinite_rho_survives_json() {
        let cfg = RewardConfig {
            rho: f64::INFINITY,
            ..RewardConfig::default()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains(r#""rho":"inf""#));
        assert_eq!(serde_json::from_str::<RewardConfig>(&text).unwrap(), cfg);
        let finite: RewardConfig = serde_json::from_str(r#"{"rho": 1}"#).unwrap();
        assert_eq!(finite.rho, 1.0);
        assert!(serde_json::from_str::<RewardConfig>(r#"{"rho": "lots"}"#).is_err());
    }

    proptest! {
        #[test]
        fn functional_monotone_in_passes(total in 1usize..40, a in 0usize..40, b in 0usize..40) {
            let cfg = RewardConfig::default();
            let (lo, hi) = (a.min(b).min(total), a.max(b).min(total));
            let r_lo = functional_reward(&outcome(lo, total), &cfg).unwrap();
            let r_hi = functional_reward(&outcome(hi, total), &cfg).unwrap();
            prop_assert!(r_lo <= r_hi);
            prop_assert!((0.0..=cfg.lambda).contains(&r_hi));
        }

        #[test]
        fn first_pass_is_worth_most(total in 2usize..60, m in 2usize..60) {
            let m = m.min(total);
            let cfg = RewardConfig::default();
            let r = |p| functional_reward(&outcome(p, total), &cfg).unwrap();
            prop_assert!(r(1) - r(0) > r(m) - r(m - 1));
        }

        #[test]
        fn zeta_moves_toward_target(kl in 0.0f64..10.0, zeta in 0.001f64..100.0) {
            let cfg = RewardConfig::default();
            let next = update_zeta(kl, &cfg, zeta).unwrap();
            prop_assert!(next >= 0.0);
            if kl > cfg.rho { prop_assert!(next > zeta); }
            if kl < cfg.rho { prop_assert!(next < zeta); }
        }

        #[test]
        fn total_is_functional_minus_penalty(f in -10.0f64..50.0, kl in -5.0f64..5.0, z in 0.0f64..10.0) {
            let rec = total_reward(f, kl, z);
            prop_assert_eq!(rec.total, f - z * kl);
            prop_assert_eq!(total_reward(f, 0.0, z).total, f);
        }
    }
}
