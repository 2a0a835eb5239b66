//! The training loop: generate, reward, mix in replay-buffer solutions,
//! update the policy against the critic baseline, regress the critic, adapt
//! the KL coefficient and validate.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::buffer::{sample_with_replacement, Admission, BufferStats, ReplayBuffer};
use crate::canon::{self, Frontend};
use crate::critic::{advantage, CriticModel, CriticTarget};
use crate::dataset::{make_prompt, program_for_completion, Problem};
use crate::error::{Error, Result};
use crate::policy::{sample_batch, DecodingParams, Origin, Policy, Trajectory, UpdateItem};
use crate::reward::{buffer_reward, functional_reward, sequence_kl, total_reward, KlController, RewardConfig};
use crate::sandbox::{ExecutionLimits, Sandbox};
use crate::util::{combine, derive_seed, fnv1a64};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Samples generated per problem per epoch; also the number of buffer
    /// solutions mixed in.
    pub n_gen: usize,
    pub n_mini: usize,
    pub policy_lr: f64,
    pub critic_lr: f64,
    pub decoding: DecodingParams,
    pub reward: RewardConfig,
    pub limits: ExecutionLimits,
    pub seed: u64,
    pub buffer_enabled: bool,
    /// Greedy validation every this many epochs (and always at the last).
    pub validation_every: usize,
    /// Checkpoint every this many epochs; improvements in validation and the
    /// last epoch are always checkpointed. Zero checkpoints only those.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 100,
            n_gen: 8,
            n_mini: 32,
            policy_lr: 5e-7,
            critic_lr: 1e-6,
            decoding: DecodingParams::default(),
            reward: RewardConfig::default(),
            limits: ExecutionLimits::default(),
            seed: 0,
            buffer_enabled: true,
            validation_every: 1,
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_gen == 0 {
            return Err(Error::Config("n_gen must be positive".into()));
        }
        if self.n_mini == 0 {
            return Err(Error::Config("n_mini must be positive".into()));
        }
        if !(self.policy_lr >= 0.0 && self.policy_lr.is_finite()) {
            return Err(Error::Config("policy_lr must be nonnegative".into()));
        }
        if !(self.critic_lr >= 0.0 && self.critic_lr.is_finite()) {
            return Err(Error::Config("critic_lr must be nonnegative".into()));
        }
        if self.validation_every == 0 {
            return Err(Error::Config("validation_every must be positive".into()));
        }
        self.decoding.validate()?;
        self.reward.validate()?;
        self.limits.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchItem {
    pub trajectory: Trajectory,
    pub loss_weight: f64,
}

/// The training set of one epoch.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EpochBatch {
    pub items: Vec<BatchItem>,
}

impl EpochBatch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Summary of the generation phase.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GenerationStats {
    pub generated: usize,
    pub from_buffer: usize,
    pub mean_functional: f64,
    pub mean_total: f64,
    /// Mean sequence KL over generated trajectories.
    pub mean_kl: f64,
    pub compile_rate: f64,
    /// Fraction of generated trajectories passing every test.
    pub solved_rate: f64,
    pub buffer_inserts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub generation: GenerationStats,
    pub zeta_used: f64,
    /// Coefficient after this epoch's controller step.
    pub zeta: f64,
    pub policy_steps: usize,
    pub mean_policy_objective: f64,
    pub critic_steps: usize,
    pub mean_critic_loss: f64,
    pub buffer_total: usize,
    pub buffer_sizes: BTreeMap<String, usize>,
    /// Distinct passing completions generated so far.
    pub distinct_valid: usize,
    pub validation_greedy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointRef {
    pub epoch: usize,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    /// Greedy validation score before the first update.
    pub initial_validation: Option<f64>,
    pub epochs: Vec<EpochMetrics>,
    pub checkpoints: Vec<CheckpointRef>,
}

impl RunRecord {
    pub fn best_epoch(&self) -> Result<usize> {
        select_checkpoint(self)
    }
}

/// Epoch with the highest validation score; the earliest wins ties.
pub fn select_checkpoint(run: &RunRecord) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for m in &run.epochs {
        if let Some(score) = m.validation_greedy {
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((m.epoch, score));
            }
        }
    }
    best.map(|(e, _)| e)
        .ok_or_else(|| Error::Train("no validation scores recorded".into()))
}

/// Mutable training state that survives across epochs and checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Last completed epoch.
    pub epoch: usize,
    pub zeta: f64,
    pub best_validation: Option<f64>,
    pub buffer_stats: BufferStats,
    pub valid_found: BTreeMap<String, BTreeSet<String>>,
}

impl TrainState {
    pub fn fresh(config: &TrainConfig) -> Self {
        TrainState {
            epoch: 0,
            zeta: config.reward.zeta_init,
            best_validation: None,
            buffer_stats: BufferStats::default(),
            valid_found: BTreeMap::new(),
        }
    }

    fn distinct_valid(&self) -> usize {
        self.valid_found.values().map(BTreeSet::len).sum()
    }
}

pub struct TrainContext<'a> {
    pub policy: &'a mut dyn Policy,
    pub critic: &'a mut CriticModel,
    pub buffer: &'a mut ReplayBuffer,
    pub sandbox: &'a Sandbox,
    pub frontend: Frontend<'a>,
}

/// Inserts every problem's seed solutions into the buffer at epoch 0.
pub fn seed_buffer(
    problems: &[Problem],
    buffer: &mut ReplayBuffer,
    admission: Admission<'_>,
) -> usize {
    let mut inserted = 0;
    for p in problems {
        buffer.ensure_problem(&p.id);
        for s in &p.seed_solutions {
            inserted += usize::from(buffer.add_if_new(p, s, 0, admission));
        }
    }
    inserted
}

/// Generation phase of one epoch.
#[allow(clippy::too_many_arguments)]
pub fn build_epoch_batch(
    problems: &[Problem],
    policy: &mut dyn Policy,
    sandbox: &Sandbox,
    frontend: Frontend<'_>,
    buffer: &mut ReplayBuffer,
    config: &TrainConfig,
    zeta: f64,
    epoch: usize,
    valid_found: &mut BTreeMap<String, BTreeSet<String>>,
) -> Result<(EpochBatch, GenerationStats)> {
    let gen_seed = derive_seed(config.seed, "generate", epoch as u64);
    let mut generated: Vec<Vec<Trajectory>> = Vec::with_capacity(problems.len());
    let mut jobs = Vec::new();
    for p in problems {
        let prompt = make_prompt(p);
        let seed = combine(gen_seed, fnv1a64(p.id.as_bytes()));
        let trajs = sample_batch(policy, &p.id, &prompt, config.n_gen, &config.decoding, seed)?;
        for t in &trajs {
            jobs.push((program_for_completion(p, &t.text), p.tests.clone()));
        }
        generated.push(trajs);
    }
    let mut outcomes = sandbox.run_many(&jobs, &config.limits).into_iter();

    let mut stats = GenerationStats::default();
    let mut batch = EpochBatch::default();
    let mut newly_valid: Vec<(usize, String)> = Vec::new();
    let mut buffer_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "buffer", epoch as u64));
    let r_max = config.reward.r_max();
    for (pi, (p, trajs)) in problems.iter().zip(generated).enumerate() {
        for mut t in trajs {
            let outcome = outcomes.next().expect("one outcome per job")?;
            let functional = functional_reward(&outcome, &config.reward)?;
            let kl = sequence_kl(&t.logp_policy, &t.logp_reference)?;
            stats.generated += 1;
            stats.mean_functional += functional;
            stats.mean_kl += kl;
            stats.compile_rate += f64::from(u8::from(outcome.compiled));
            if outcome.compiled && outcome.all_passed() {
                stats.solved_rate += 1.0;
                if valid_found.entry(p.id.clone()).or_default().insert(t.text.clone()) {
                    newly_valid.push((pi, program_for_completion(p, &t.text)));
                }
                debug_assert_eq!(functional, r_max);
            }
            let record = total_reward(functional, kl, zeta);
            stats.mean_total += record.total;
            t.reward = Some(record);
            batch.items.push(BatchItem {
                trajectory: t,
                loss_weight: p.loss_weight,
            });
        }
        if config.buffer_enabled {
            let prompt = make_prompt(p);
            let completions: Vec<String> = buffer
                .solutions(&p.id)
                .into_iter()
                .filter_map(|c| canon::completion_for(&p.signature, c))
                .collect();
            for completion in sample_with_replacement(&completions, config.n_gen, &mut buffer_rng) {
                let sample = policy.score(&prompt, &completion, None)?;
                let mut t = Trajectory::from_sample(&p.id, &prompt, sample, Origin::Buffer);
                t.reward = Some(buffer_reward(&config.reward, zeta));
                stats.from_buffer += 1;
                batch.items.push(BatchItem {
                    trajectory: t,
                    loss_weight: p.loss_weight,
                });
            }
        }
    }
    if config.buffer_enabled {
        let admission = Admission {
            sandbox,
            frontend,
            limits: &config.limits,
        };
        for (pi, code) in newly_valid {
            stats.buffer_inserts += usize::from(buffer.add_if_new(&problems[pi], &code, epoch as u64, admission));
        }
    }
    if stats.generated > 0 {
        let n = stats.generated as f64;
        stats.mean_functional /= n;
        stats.mean_total /= n;
        stats.mean_kl /= n;
        stats.compile_rate /= n;
        stats.solved_rate /= n;
    }
    Ok((batch, stats))
}

/// Fraction of `problems` whose greedy completion passes every test.
pub fn greedy_solve_rate(
    problems: &[Problem],
    policy: &mut dyn Policy,
    sandbox: &Sandbox,
    decoding: &DecodingParams,
    limits: &ExecutionLimits,
) -> Result<f64> {
    if problems.is_empty() {
        return Err(Error::Eval("no problems to evaluate".into()));
    }
    let mut jobs = Vec::with_capacity(problems.len());
    for p in problems {
        let s = policy.greedy(&make_prompt(p), decoding)?;
        jobs.push((program_for_completion(p, &s.text), p.tests.clone()));
    }
    let mut solved = 0usize;
    for outcome in sandbox.run_many(&jobs, limits) {
        solved += usize::from(outcome?.all_passed());
    }
    Ok(solved as f64 / problems.len() as f64)
}

fn policy_phase(
    batch: &EpochBatch,
    policy: &mut dyn Policy,
    critic: &CriticModel,
    config: &TrainConfig,
    epoch: usize,
) -> Result<(usize, f64)> {
    let mut order: Vec<usize> = (0..batch.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "policy-shuffle", epoch as u64)));
    let mut steps = 0;
    let mut objective_sum = 0.0;
    for (mi, chunk) in order.chunks(config.n_mini).enumerate() {
        let mut items = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let BatchItem { trajectory: t, loss_weight } = &batch.items[i];
            let reward = t.reward.expect("rewarded in generation").total;
            let baseline = critic.score_with(&t.prompt, &t.text, t.embedding.as_deref())?;
            items.push(UpdateItem {
                prompt: t.prompt.clone(),
                completion: t.text.clone(),
                tokens: Some(t.tokens.clone()),
                advantage: advantage(reward, baseline),
                weight: *loss_weight,
            });
        }
        let objective = policy.apply_update(&items, config.policy_lr)?;
        if !objective.is_finite() {
            return Err(Error::Train(format!(
                "epoch {epoch}, policy minibatch {mi}: objective is {objective}; advantages {:?}",
                items.iter().map(|i| i.advantage).collect::<Vec<_>>()
            )));
        }
        steps += 1;
        objective_sum += objective;
    }
    Ok((steps, if steps > 0 { objective_sum / steps as f64 } else { 0.0 }))
}

fn critic_phase(batch: &EpochBatch, critic: &mut CriticModel, config: &TrainConfig, epoch: usize) -> Result<(usize, f64)> {
    let mut order: Vec<usize> = (0..batch.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "critic-shuffle", epoch as u64)));
    critic.set_learning_rate(config.critic_lr);
    let mut steps = 0;
    let mut loss_sum = 0.0;
    for chunk in order.chunks(config.n_mini) {
        let targets: Vec<CriticTarget> = chunk
            .iter()
            .map(|&i| {
                let t = &batch.items[i].trajectory;
                CriticTarget {
                    prompt: t.prompt.clone(),
                    solution: t.text.clone(),
                    embedding: t.embedding.clone(),
                    reward: t.reward.expect("rewarded in generation").total,
                }
            })
            .collect();
        let loss = critic.update(&targets)?;
        if !loss.is_finite() {
            return Err(Error::Train(format!("epoch {epoch}: critic loss is {loss}")));
        }
        steps += 1;
        loss_sum += loss;
    }
    Ok((steps, if steps > 0 { loss_sum / steps as f64 } else { 0.0 }))
}

/// Writes policy, critic, buffer and trainer state into `dir`.
pub fn write_checkpoint(
    dir: &Path,
    policy: &mut dyn Policy,
    critic: &CriticModel,
    buffer: &ReplayBuffer,
    state: &TrainState,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    policy.save(&dir.join("policy"))?;
    critic.save(&dir.join("critic"))?;
    buffer.save(&dir.join("buffer.jsonl"))?;
    let path = dir.join("state.json");
    fs::write(&path, serde_json::to_vec_pretty(state)?).map_err(|e| Error::io(&path, e))
}

pub fn read_state(dir: &Path) -> Result<TrainState> {
    let path = dir.join("state.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Reads the per-epoch records of `metrics.jsonl`.
pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Record {
                index: i,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn checkpoint_dir(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join("checkpoints").join(format!("epoch-{epoch}"))
}

/// Where a run writes and what it resumes from.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub run_dir: Option<PathBuf>,
    /// State and metrics of an interrupted run. The policy, critic and
    /// buffer in the context must already hold the matching checkpoint.
    pub resume: Option<(TrainState, Vec<EpochMetrics>)>,
}

/// Runs the training loop. With a fresh start the buffer is seeded from the
/// problems' reference solutions and the policy's reference is frozen if it
/// is not already.
pub fn train(
    problems: &[Problem],
    validation: &[Problem],
    ctx: TrainContext<'_>,
    config: &TrainConfig,
    options: &RunOptions,
) -> Result<RunRecord> {
    config.validate()?;
    let TrainContext {
        policy,
        critic,
        buffer,
        sandbox,
        frontend,
    } = ctx;
    let admission = Admission {
        sandbox,
        frontend,
        limits: &config.limits,
    };
    let metrics_path = options.run_dir.as_ref().map(|d| d.join("metrics.jsonl"));
    if let Some(dir) = &options.run_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let (mut state, mut record) = match &options.resume {
        Some((state, epochs)) => {
            let record = RunRecord {
                config: config.clone(),
                initial_validation: None,
                epochs: epochs.iter().filter(|m| m.epoch <= state.epoch).cloned().collect(),
                checkpoints: Vec::new(),
            };
            (state.clone(), record)
        }
        None => {
            if !policy.reference_frozen() {
                policy.freeze_reference()?;
            }
            for p in problems {
                buffer.ensure_problem(&p.id);
            }
            if config.buffer_enabled {
                let n = seed_buffer(problems, buffer, admission);
                log::info!("buffer seeded with {n} reference solutions");
            }
            let initial_validation = if validation.is_empty() {
                None
            } else {
                Some(greedy_solve_rate(validation, policy, sandbox, &config.decoding, &config.limits)?)
            };
            let record = RunRecord {
                config: config.clone(),
                initial_validation,
                epochs: Vec::new(),
                checkpoints: Vec::new(),
            };
            (TrainState::fresh(config), record)
        }
    };
    if let Some(path) = &metrics_path {
        // Rewrite so that a resumed run drops epochs past its checkpoint.
        let mut text = Vec::new();
        for m in &record.epochs {
            serde_json::to_writer(&mut text, m)?;
            text.push(b'\n');
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    let mut controller = KlController { zeta: state.zeta };

    for epoch in state.epoch + 1..=config.max_epochs {
        let zeta_used = controller.zeta;
        let generation = build_epoch_batch(
            problems,
            policy,
            sandbox,
            frontend,
            buffer,
            config,
            zeta_used,
            epoch,
            &mut state.valid_found,
        );
        let (batch, generation) = match generation {
            Ok(v) => v,
            Err(e) => {
                if let Some(dir) = &options.run_dir {
                    let abort_dir = dir.join("checkpoints").join(format!("abort-epoch-{epoch}"));
                    state.buffer_stats = buffer.stats();
                    write_checkpoint(&abort_dir, policy, critic, buffer, &state)?;
                    log::error!("epoch {epoch} aborted; state saved to {}", abort_dir.display());
                }
                return Err(e);
            }
        };
        let (policy_steps, mean_policy_objective) = policy_phase(&batch, policy, critic, config, epoch)?;
        let (critic_steps, mean_critic_loss) = critic_phase(&batch, critic, config, epoch)?;
        controller.update(generation.mean_kl, &config.reward)?;

        let validation_greedy = if !validation.is_empty() && (epoch % config.validation_every == 0 || epoch == config.max_epochs) {
            Some(greedy_solve_rate(validation, policy, sandbox, &config.decoding, &config.limits)?)
        } else {
            None
        };
        let improved = match (validation_greedy, state.best_validation) {
            (Some(_), None) => true,
            (Some(v), Some(best)) => v > best,
            _ => false,
        };
        if improved {
            state.best_validation = validation_greedy;
        }
        state.epoch = epoch;
        state.zeta = controller.zeta;
        state.buffer_stats = buffer.stats();

        let metrics = EpochMetrics {
            epoch,
            zeta_used,
            zeta: controller.zeta,
            policy_steps,
            mean_policy_objective,
            critic_steps,
            mean_critic_loss,
            buffer_total: buffer.total(),
            buffer_sizes: buffer.counts(),
            distinct_valid: state.distinct_valid(),
            validation_greedy,
            generation,
        };
        log::info!(
            "epoch {epoch}: reward {:.3} kl {:.4} zeta {:.4} solved {:.3} buffer {} val {:?}",
            metrics.generation.mean_total,
            metrics.generation.mean_kl,
            metrics.zeta,
            metrics.generation.solved_rate,
            metrics.buffer_total,
            metrics.validation_greedy
        );
        if let Some(path) = &metrics_path {
            let mut line = serde_json::to_vec(&metrics)?;
            line.push(b'\n');
            OpenOptions::new()
                .append(true)
                .open(path)
                .and_then(|mut f| f.write_all(&line))
                .map_err(|e| Error::io(path, e))?;
        }
        record.epochs.push(metrics);

        if let Some(dir) = &options.run_dir {
            let on_cadence = config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0;
            if on_cadence || improved || epoch == config.max_epochs {
                let ckpt = checkpoint_dir(dir, epoch);
                write_checkpoint(&ckpt, policy, critic, buffer, &state)?;
                record.checkpoints.push(CheckpointRef { epoch, path: ckpt });
            }
            if improved {
                let best = dir.join("best");
                fs::write(&best, format!("checkpoints/epoch-{epoch}\n")).map_err(|e| Error::io(&best, e))?;
            }
        }
    }
    Ok(record)
}
