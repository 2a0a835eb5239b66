//! A desk-scale task suite: eight two-argument arithmetic functions, each
//! solved by a single return expression over a twelve-symbol alphabet.

use crate::critic::{CriticConfig, HeadKind};
use crate::dataset::{Problem, ProblemSource};
use crate::policy::{DecodingParams, ToyPolicyConfig};
use crate::reward::RewardConfig;
use crate::trainer::TrainConfig;

/// (name, description, reference expression).
const SUITE: [(&str, &str, &str); 8] = [
    ("add", "Return the sum of a and b.", "a + b"),
    ("sub", "Return a minus b.", "a - b"),
    ("mul", "Return the product of a and b.", "a * b"),
    ("rsub", "Return b minus a.", "b - a"),
    ("sq", "Return the square of a.", "a * a"),
    ("first", "Return the first argument.", "a"),
    ("second", "Return the second argument.", "b"),
    ("inc", "Return a plus one.", "a + 1"),
];

const ARGS: [(i64, i64); 3] = [(2, 3), (5, 1), (0, 7)];

fn eval(expr: &str, a: i64, b: i64) -> i64 {
    match expr {
        "a + b" => a + b,
        "a - b" => a - b,
        "a * b" => a * b,
        "b - a" => b - a,
        "a * a" => a * a,
        "a" => a,
        "b" => b,
        "a + 1" => a + 1,
        _ => unreachable!("expression outside the suite"),
    }
}

/// The eight toy problems, each with one seed solution.
pub fn toy_problems() -> Vec<Problem> {
    SUITE
        .iter()
        .map(|(name, description, expr)| Problem {
            id: format!("toy/{name}"),
            description: description.to_string(),
            signature: format!("def {name}(a, b):"),
            tests: ARGS
                .iter()
                .map(|&(a, b)| format!("assert {name}({a}, {b}) == {}", eval(expr, a, b)))
                .collect(),
            seed_solutions: vec![format!("def {name}(a, b):\n    return {expr}\n")],
            source: ProblemSource::Curated,
            loss_weight: 1.0,
        })
        .collect()
}

/// Policy sized for the suite: a four-symbol context separates the indent
/// from the keyword that follows it.
pub fn toy_policy_config(seed: u64) -> ToyPolicyConfig {
    ToyPolicyConfig {
        context_window: 4,
        seed,
        ..ToyPolicyConfig::default()
    }
}

pub fn toy_critic_config(seed: u64) -> CriticConfig {
    CriticConfig {
        feature_dim: 512,
        head: HeadKind::Mlp,
        hidden_dim: 256,
        learning_rate: 0.05,
        seed,
        ..CriticConfig::default()
    }
}

/// Training settings under which the suite is learned within 200 epochs.
pub fn toy_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        max_epochs: 200,
        policy_lr: 0.002,
        critic_lr: 0.05,
        decoding: DecodingParams {
            max_len: 64,
            ..DecodingParams::default()
        },
        reward: RewardConfig {
            rho: f64::INFINITY,
            ..RewardConfig::default()
        },
        seed,
        ..TrainConfig::default()
    }
}
