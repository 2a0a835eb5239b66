//! Independent oracles for the estimator, the toy gradient, the critic and
//! the KL controller.

use nalgebra::{DMatrix, DVector};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::ToPrimitive;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use utrl_core::critic::{
    hashed_features, Activation, CriticConfig, CriticModel, CriticTarget, FeatureSource, HeadKind,
};
use utrl_core::evaluator::pass_at_k;
use utrl_core::policy::{ToyPolicy, ToyPolicyConfig, UpdateItem};
use utrl_core::reward::{KlController, RewardConfig};

/// Fraction of k-subsets of n samples (the first c correct) that contain a
/// correct sample, by enumerating every subset.
fn enumerated_pass_at_k(n: usize, c: usize, k: usize) -> BigRational {
    let correct_mask = (1u32 << c) - 1;
    let (mut hit, mut total) = (0i64, 0i64);
    for subset in 0u32..(1 << n) {
        if subset.count_ones() as usize == k {
            total += 1;
            hit += i64::from(subset & correct_mask != 0);
        }
    }
    BigRational::new(BigInt::from(hit), BigInt::from(total))
}

#[test]
fn pass_at_k_equals_subset_enumeration() {
    for n in 1..=12 {
        for c in 0..=n {
            for k in 1..=n {
                let exact = enumerated_pass_at_k(n, c, k);
                // Numerator and denominator are below 2^53, so this division
                // is the correctly rounded value of the fraction.
                let expected = exact.numer().to_f64().unwrap() / exact.denom().to_f64().unwrap();
                assert_eq!(pass_at_k(n, c, k).unwrap(), expected, "n={n} c={c} k={k}");
            }
        }
    }
}

const SYMBOLS: &str = "abcdefghijklmnopqrst";

fn random_instance(rng: &mut ChaCha8Rng) -> (ToyPolicy, Vec<UpdateItem>) {
    let n_symbols = rng.gen_range(1..=19);
    let vocabulary: String = SYMBOLS.chars().take(n_symbols).collect();
    let config = ToyPolicyConfig {
        vocabulary: vocabulary.clone(),
        context_window: rng.gen_range(1..=3),
        backoff_buckets: rng.gen_range(1..=16),
        init_scale: rng.gen_range(0.1..1.5),
        seed: rng.gen(),
    };
    let chars: Vec<char> = vocabulary.chars().collect();
    let text = |rng: &mut ChaCha8Rng, max: usize| -> String {
        (0..rng.gen_range(0..=max)).map(|_| chars[rng.gen_range(0..chars.len())]).collect()
    };
    let batch = (0..rng.gen_range(1..=4))
        .map(|_| UpdateItem {
            prompt: text(rng, 4),
            completion: text(rng, 6),
            tokens: None,
            advantage: rng.gen_range(-2.0..2.0),
            weight: rng.gen_range(0.05..=1.0),
        })
        .collect();
    (ToyPolicy::new(config).unwrap(), batch)
}

/// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1)` over all
/// parameters of one instance.
fn gradient_error(policy: &mut ToyPolicy, batch: &[UpdateItem]) -> f64 {
    policy.materialize(batch).unwrap();
    let grad = policy.gradient(batch).unwrap();
    let v = policy.vocab_size();
    let mut analytic: Vec<f64> = Vec::new();
    for key in policy.params().exact.keys() {
        analytic.extend(grad.exact.get(key).cloned().unwrap_or_else(|| vec![0.0; v]));
    }
    analytic.extend(&grad.backoff);
    let base = policy.params().flatten();
    assert_eq!(base.len(), analytic.len());
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (i, (&x, &a)) in base.iter().zip(&analytic).enumerate() {
        policy.params_mut().set_flat(i, x + h);
        let up = policy.objective(batch).unwrap();
        policy.params_mut().set_flat(i, x - h);
        let down = policy.objective(batch).unwrap();
        policy.params_mut().set_flat(i, x);
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0));
    }
    worst
}

#[test]
fn toy_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2023);
    for case in 0..120 {
        let (mut policy, batch) = random_instance(&mut rng);
        let err = gradient_error(&mut policy, &batch);
        assert!(err < 1e-5, "instance {case}: relative error {err:e}");
    }
}

fn synthetic_batch() -> Vec<CriticTarget> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let words = ["return", "a", "b", "+", "-", "*", "if", "x", "1", "2"];
    (0..40)
        .map(|i| {
            let solution: Vec<&str> = (0..rng.gen_range(1..6)).map(|_| words[rng.gen_range(0..words.len())]).collect();
            CriticTarget {
                prompt: format!("problem {}", i % 5),
                solution: solution.join(" "),
                embedding: None,
                reward: rng.gen_range(-10.0..50.0),
            }
        })
        .collect()
}

/// Minimum of the batch-mean squared error of an affine model over the
/// critic's input features, from the normal equations.
fn least_squares_optimum(batch: &[CriticTarget], dim: usize) -> f64 {
    let rows: Vec<Vec<f64>> = batch
        .iter()
        .map(|t| {
            let mut f = hashed_features(&t.prompt, &t.solution, dim);
            f.push(1.0);
            f
        })
        .collect();
    let x = DMatrix::from_fn(rows.len(), dim + 1, |r, c| rows[r][c]);
    let y = DVector::from_iterator(batch.len(), batch.iter().map(|t| t.reward));
    let svd = x.clone().svd(true, true);
    let beta = svd.solve(&y, 1e-12).unwrap();
    (&x * beta - y).norm_squared() / batch.len() as f64
}

#[test]
fn linear_critic_reaches_least_squares_optimum() {
    let batch = synthetic_batch();
    let dim = 16;
    let optimum = least_squares_optimum(&batch, dim);
    let mut critic = CriticModel::new(CriticConfig {
        feature_dim: dim,
        head: HeadKind::Linear,
        activation: Activation::Relu,
        features: FeatureSource::Hashed,
        learning_rate: 0.5,
        seed: 3,
        ..CriticConfig::default()
    })
    .unwrap();
    let mut losses = Vec::new();
    for _ in 0..500 {
        losses.push(critic.update(&batch).unwrap());
    }
    let last = critic.loss(&batch).unwrap();
    losses.push(last);
    assert!(optimum > 0.0);
    assert!(last <= optimum * 1.01, "final {last}, optimum {optimum}");
    for window in losses.windows(100) {
        assert!(window.windows(2).all(|w| w[1] <= w[0] + 1e-12 * w[0].abs()));
    }
}

/// Simulated environment: mean KL falls monotonically as the penalty grows,
/// crossing 0.07 at zeta = 0.1.
fn simulated_kl(zeta: f64) -> f64 {
    0.35 / (1.0 + 40.0 * zeta)
}

#[test]
fn kl_controller_tracks_target_from_three_starts() {
    let config = RewardConfig::default();
    assert_eq!(config.rho, 0.07);
    let in_band = |kl: f64| (kl - 0.07).abs() <= 0.2 * 0.07;
    for zeta_init in [0.02, 0.2, 0.5] {
        let mut ctl = KlController::new(&RewardConfig { zeta_init, ..config });
        assert!(!in_band(simulated_kl(ctl.zeta)));
        let mut entered = None;
        for step in 1..=300 {
            let kl = simulated_kl(ctl.zeta);
            ctl.update(kl, &config).unwrap();
            let after = simulated_kl(ctl.zeta);
            match entered {
                None if in_band(after) => entered = Some(step),
                Some(_) => assert!(in_band(after), "start {zeta_init}: left the band at update {step}"),
                None => {}
            }
        }
        let entered = entered.unwrap_or(usize::MAX);
        assert!(entered <= 100, "start {zeta_init}: reached the band after {entered} updates");
    }
}
