//! Acceptance criteria C1 to C10. Prints one PASS or FAIL line per
//! criterion and exits non-zero if any fails.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::ToPrimitive;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use utrl_cli::{cmd_train, RunConfig, TrainOptions};
use utrl_core::augment::{run_augment, AugmentConfig, GeneratorConfig, StopWordDetector};
use utrl_core::canon::{canonicalize, Frontend};
use utrl_core::critic::{
    hashed_features, Activation, CriticConfig, CriticModel, CriticTarget, FeatureSource, HeadKind,
};
use utrl_core::dataset::load_augmented;
use utrl_core::evaluator::pass_at_k;
use utrl_core::policy::{ToyPolicy, ToyPolicyConfig, UpdateItem};
use utrl_core::reward::{functional_reward, KlController, RewardConfig};
use utrl_core::sandbox::{ExecutionLimits, ExecutionOutcome, Sandbox, SandboxConfig, TestStatus};
use utrl_core::trainer::RunRecord;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

type Check = Result<String, String>;
type Criterion = (&'static str, &'static str, fn() -> Check);

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn sandbox() -> Sandbox {
    Sandbox::new(SandboxConfig::default()).expect("python3 sandbox")
}

fn core_fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

fn c1_reward() -> Check {
    let config = RewardConfig::default();
    let outcome = |passed: usize, total: usize| {
        let statuses = (0..total).map(|i| if i < passed { TestStatus::Passed } else { TestStatus::Failed }).collect();
        ExecutionOutcome::from_statuses(statuses, String::new())
    };
    let cases = [
        (outcome(4, 4), 50.0),
        (outcome(1, 4), 25.0),
        (outcome(0, 4), 0.0),
        (ExecutionOutcome::not_compiled(4, "SyntaxError".into()), -10.0),
    ];
    let mut worst = 0.0f64;
    for (o, expected) in &cases {
        worst = worst.max((functional_reward(o, &config).map_err(|e| e.to_string())? - expected).abs());
    }
    ensure(worst <= 1e-9, format!("max |error| {worst:e} (tolerance 1e-9)"))
}

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

fn c2_pass_at_k() -> Check {
    let mut cases = 0;
    for n in 1..=12 {
        for c in 0..=n {
            for k in 1..=n {
                let exact = enumerated_pass_at_k(n, c, k);
                let expected = exact.numer().to_f64().unwrap() / exact.denom().to_f64().unwrap();
                let got = pass_at_k(n, c, k).map_err(|e| e.to_string())?;
                if got != expected {
                    return Err(format!("n={n} c={c} k={k}: {got} vs {exact}"));
                }
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} (n, c, k) cases equal exactly"))
}

fn random_instance(rng: &mut ChaCha8Rng) -> (ToyPolicy, Vec<UpdateItem>) {
    let vocabulary: String = "abcdefghijklmnopqrs".chars().take(rng.gen_range(1..=19)).collect();
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

fn c3_gradient() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    let instances = 120;
    for _ in 0..instances {
        let (mut policy, batch) = random_instance(&mut rng);
        if policy.vocab_size() > 20 {
            return Err("instance vocabulary above 20".into());
        }
        worst = worst.max(gradient_error(&mut policy, &batch));
    }
    ensure(worst < 1e-5, format!("{instances} instances, max relative error {worst:.2e} (< 1e-5)"))
}

/// Toy runs with and without the buffer, trained once and shared.
struct Runs {
    with_buffer: Vec<RunRecord>,
    without_buffer: Vec<RunRecord>,
    dir: tempfile::TempDir,
}

fn train_toy(run_dir: &Path, seed: u64, buffer: bool) -> RunRecord {
    let mut config = RunConfig::toy(seed);
    config.train.buffer_enabled = buffer;
    config.output.run_dir = run_dir.to_path_buf();
    cmd_train(&config, TrainOptions::default()).unwrap_or_else(|e| panic!("seed {seed}: {e}"))
}

fn runs() -> &'static Runs {
    static RUNS: OnceLock<Runs> = OnceLock::new();
    RUNS.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let train = |buffer: bool| -> Vec<RunRecord> {
            SEEDS
                .iter()
                .map(|&s| train_toy(&dir.path().join(format!("buffer-{buffer}/seed-{s}")), s, buffer))
                .collect()
        };
        Runs {
            with_buffer: train(true),
            without_buffer: train(false),
            dir,
        }
    })
}

fn best_greedy(run: &RunRecord) -> f64 {
    run.epochs.iter().filter_map(|m| m.validation_greedy).fold(f64::NEG_INFINITY, f64::max)
}

fn c4_learning() -> Check {
    let mut lines = Vec::new();
    let mut learned = 0;
    for (seed, run) in SEEDS.iter().zip(&runs().with_buffer) {
        let start = run.initial_validation.unwrap_or(f64::NAN);
        let best = best_greedy(run);
        let reached = run.epochs.iter().find(|m| m.validation_greedy.is_some_and(|g| g >= 0.8)).map(|m| m.epoch);
        if start <= 0.2 && best >= 0.8 && run.epochs.len() <= 200 {
            learned += 1;
        }
        lines.push(format!("seed {seed}: {start:.3} -> {best:.3} (>=0.8 at {reached:?})"));
    }
    ensure(learned >= 3, format!("{learned}/5 seeds from <=0.2 to >=0.8; {}", lines.join(", ")))
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

fn c5_buffer_ablation() -> Check {
    let runs = runs();
    let summary = |set: &[RunRecord]| {
        let last = |r: &RunRecord| r.epochs.last().cloned().expect("epochs");
        (
            median(set.iter().map(|r| last(r).distinct_valid as f64).collect()),
            median(set.iter().map(|r| last(r).validation_greedy.unwrap_or(0.0)).collect()),
        )
    };
    let (valid_with, solved_with) = summary(&runs.with_buffer);
    let (valid_without, solved_without) = summary(&runs.without_buffer);
    ensure(
        valid_with >= valid_without && solved_with >= solved_without,
        format!(
            "median distinct valid {valid_with} vs {valid_without}, median final solve rate {solved_with:.3} vs {solved_without:.3} (with vs without)"
        ),
    )
}

fn simulated_kl(zeta: f64) -> f64 {
    0.35 / (1.0 + 40.0 * zeta)
}

fn c6_kl_controller() -> Check {
    let config = RewardConfig::default();
    let in_band = |kl: f64| (kl - config.rho).abs() <= 0.2 * config.rho;
    let mut reached = Vec::new();
    for zeta_init in [0.02, 0.2, 0.5] {
        let mut ctl = KlController::new(&RewardConfig { zeta_init, ..config });
        let mut entered = None;
        for step in 1..=100 {
            ctl.update(simulated_kl(ctl.zeta), &config).map_err(|e| e.to_string())?;
            if entered.is_none() && in_band(simulated_kl(ctl.zeta)) {
                entered = Some(step);
            }
        }
        let stays = in_band(simulated_kl(ctl.zeta));
        reached.push((zeta_init, entered, stays));
    }
    ensure(
        reached.iter().all(|(_, e, stays)| e.is_some() && *stays),
        format!("(initial zeta, update entering +-20% of 0.07, in band at 100): {reached:?}"),
    )
}

fn defines(code: &str, name: &str) -> bool {
    code.lines().any(|l| {
        let l = l.trim_start();
        [format!("def {name}("), format!("class {name}:"), format!("class {name}("), format!("{name} =")]
            .iter()
            .any(|p| l.starts_with(p.as_str()))
    })
}

fn has_comment(code: &str) -> bool {
    code.lines().any(|l| {
        let mut quote: Option<char> = None;
        for ch in l.chars() {
            match (quote, ch) {
                (None, '#') => return true,
                (None, '"' | '\'') => quote = Some(ch),
                (Some(q), c) if c == q => quote = None,
                _ => {}
            }
        }
        false
    })
}

fn c7_canonicalization() -> Check {
    let sb = sandbox();
    let dir = core_fixtures().join("canon");
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir).map_err(|e| e.to_string())?.map(|e| e.unwrap().path()).collect();
    paths.sort();
    let limits = ExecutionLimits::default();
    for path in &paths {
        let name = path.file_name().unwrap().to_string_lossy();
        let code = fs::read_to_string(path).map_err(|e| e.to_string())?;
        let field = |key: &str| -> Vec<String> {
            code.lines().filter_map(|l| l.strip_prefix(key)).map(|v| v.trim().to_string()).collect()
        };
        let entry = field("# entry:").remove(0);
        let tests = field("# test:");
        for frontend in [Frontend::Builtin, Frontend::Interpreter(&sb)] {
            let canon = canonicalize(&code, &entry, frontend).map_err(|e| format!("{name}: {e}"))?;
            if canonicalize(&canon, &entry, frontend).map_err(|e| e.to_string())? != canon {
                return Err(format!("{name}: not idempotent under {}", frontend.name()));
            }
            if has_comment(&canon) || field("# dead:").iter().any(|d| defines(&canon, d)) {
                return Err(format!("{name}: comment or unreachable definition kept under {}", frontend.name()));
            }
            let before = sb.run_tests(&code, &tests, &limits).map_err(|e| e.to_string())?;
            let after = sb.run_tests(&canon, &tests, &limits).map_err(|e| e.to_string())?;
            if before.per_test != after.per_test {
                return Err(format!("{name}: test outcomes changed under {}", frontend.name()));
            }
        }
    }
    ensure(paths.len() == 50, format!("{} fixtures idempotent, comment-free, outcome-preserving under both front ends", paths.len()))
}

fn c8_conversion() -> Check {
    let fixtures = core_fixtures().join("augment");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = dir.path().join("aug.jsonl");
    let script = format!(
        "mkdir -p {{workspace}}/evosuite-tests && cp {}/{{class}}.{{method}}.java {{workspace}}/evosuite-tests/",
        fixtures.join("generated").display()
    );
    let config = AugmentConfig {
        generator: GeneratorConfig {
            command: vec!["sh".into(), "-c".into(), script],
            timeout_secs: 20.0,
            ..GeneratorConfig::default()
        },
        ..AugmentConfig::default()
    };
    let sb = sandbox();
    run_augment(&fixtures.join("corpus"), &out, &config, &StopWordDetector::default(), &sb).map_err(|e| e.to_string())?;
    let problems = load_augmented(&out).map_err(|e| e.to_string())?;
    let has = |sig: &str, test: &str| problems.iter().any(|p| p.signature == sig && p.tests.iter().any(|t| t == test));
    let max_ok = has("def max(a, b):", "assert max(0, 581) == 581");
    let monkey_ok = has("def monkeyTrouble2(aSmile, bSmile):", "assert monkeyTrouble2(False, False) == \"Yes\"");
    let mut compiled = 0;
    for p in &problems {
        let stub = format!("{}\n    pass\n", p.signature);
        let all = std::iter::once(stub.clone()).chain(p.tests.iter().map(|t| format!("{stub}\n{t}\n")));
        let mut ok = true;
        for program in all {
            ok &= sb.check_compile(&program).map_err(|e| e.to_string())?.ok;
        }
        compiled += usize::from(ok);
    }
    ensure(
        max_ok && monkey_ok && compiled == problems.len() && !problems.is_empty(),
        format!("max: {max_ok}, monkeyTrouble2: {monkey_ok}, {compiled}/{} instances compile", problems.len()),
    )
}

fn synthetic_batch() -> Vec<CriticTarget> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
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
    let beta = x.clone().svd(true, true).solve(&y, 1e-12).unwrap();
    (&x * beta - y).norm_squared() / batch.len() as f64
}

fn c9_critic() -> Check {
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
    .map_err(|e| e.to_string())?;
    let mut losses = Vec::new();
    for _ in 0..500 {
        losses.push(critic.update(&batch).map_err(|e| e.to_string())?);
    }
    let last = critic.loss(&batch).map_err(|e| e.to_string())?;
    losses.push(last);
    let monotone = losses.windows(100).all(|w| w.windows(2).all(|p| p[1] <= p[0] + 1e-12 * p[0].abs()));
    ensure(
        last <= optimum * 1.01 && monotone,
        format!("MSE {last:.6} vs optimum {optimum:.6} after 500 steps, nonincreasing: {monotone}"),
    )
}

fn c10_determinism() -> Check {
    let runs = runs();
    let seed = SEEDS[0];
    let first = runs.dir.path().join(format!("buffer-true/seed-{seed}/metrics.jsonl"));
    let rerun_dir = runs.dir.path().join("rerun");
    train_toy(&rerun_dir, seed, true);
    let a = fs::read(&first).map_err(|e| e.to_string())?;
    let b = fs::read(rerun_dir.join("metrics.jsonl")).map_err(|e| e.to_string())?;
    ensure(a == b && !a.is_empty(), format!("seed {seed}: {} vs {} bytes, identical: {}", a.len(), b.len(), a == b))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("C1", "reward exactness", c1_reward),
        ("C2", "pass@k oracle equivalence", c2_pass_at_k),
        ("C3", "gradient correctness", c3_gradient),
        ("C4", "end-to-end learning", c4_learning),
        ("C5", "replay-buffer ablation direction", c5_buffer_ablation),
        ("C6", "KL controller", c6_kl_controller),
        ("C7", "canonicalization", c7_canonicalization),
        ("C8", "conversion fidelity", c8_conversion),
        ("C9", "critic regression", c9_critic),
        ("C10", "determinism", c10_determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (id, name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| f == id) {
            continue;
        }
        let started = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("{id} PASS {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("{id} FAIL {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
