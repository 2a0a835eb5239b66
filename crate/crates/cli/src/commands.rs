//! Command bodies. Each validates everything it can before touching the
//! file system, so a rejected config leaves no run directory behind.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use serde::{Deserialize, Serialize};
use utrl_core::augment::{
    self, convert_suite, run_augment, solvability_filter, AcceptAll, AugmentReport, ExternalSuite, LanguageDetector,
    Provenance, SolvabilityConfig, StopWordDetector,
};
use utrl_core::buffer::ReplayBuffer;
use utrl_core::canon::Frontend;
use utrl_core::critic::CriticModel;
use utrl_core::dataset::{load_augmented, load_mbpp, load_problems, write_problems, Problem};
use utrl_core::evaluator::{evaluate, EvalReport};
use utrl_core::policy::protocol::handle_line;
use utrl_core::policy::{ExternalPolicy, Policy, ToyPolicy};
use utrl_core::sandbox::Sandbox;
use utrl_core::toy;
use utrl_core::trainer::{self, select_checkpoint, RunOptions, RunRecord, TrainContext};
use utrl_core::util::fnv1a64;

use crate::config::{Backend, DetectorKind, RunConfig, Suite};

/// A failed command: bad input (exit 1) or a failure while running (exit 2).
#[derive(Debug)]
pub enum CliError {
    Invalid(anyhow::Error),
    Aborted(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Aborted(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Invalid(e) => write!(f, "invalid input: {e:#}"),
            CliError::Aborted(e) => write!(f, "aborted: {e:#}"),
        }
    }
}

impl std::error::Error for CliError {}

trait Stage<T> {
    fn invalid(self) -> Result<T, CliError>;
    fn aborted(self) -> Result<T, CliError>;
}

impl<T, E: Into<anyhow::Error>> Stage<T> for Result<T, E> {
    fn invalid(self) -> Result<T, CliError> {
        self.map_err(|e| CliError::Invalid(e.into()))
    }

    fn aborted(self) -> Result<T, CliError> {
        self.map_err(|e| CliError::Aborted(e.into()))
    }
}

#[derive(Debug, Clone, Default)]
pub struct Splits {
    pub train: Vec<Problem>,
    pub validation: Vec<Problem>,
    pub test: Vec<Problem>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[Problem] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }
}

pub fn load_splits(config: &RunConfig) -> anyhow::Result<Splits> {
    let data = &config.data;
    let mut splits = match data.suite {
        Suite::Toy => {
            let p = toy::toy_problems();
            Splits {
                train: p.clone(),
                validation: p.clone(),
                test: p,
            }
        }
        Suite::Mbpp => {
            let path = data.mbpp.as_ref().ok_or_else(|| anyhow!("data.suite = mbpp needs data.mbpp"))?;
            let s = load_mbpp(path)?;
            Splits {
                train: s.train,
                validation: s.validation,
                test: s.test,
            }
        }
        Suite::Files => {
            let read = |p: &Option<PathBuf>| -> anyhow::Result<Vec<Problem>> {
                match p {
                    Some(p) => Ok(load_problems(p)?),
                    None => Ok(Vec::new()),
                }
            };
            Splits {
                train: read(&data.train)?,
                validation: read(&data.validation)?,
                test: read(&data.test)?,
            }
        }
    };
    for path in &data.augmented {
        splits.train.extend(load_augmented(path)?);
    }
    Ok(splits)
}

pub fn open_sandbox(config: &RunConfig) -> anyhow::Result<Sandbox> {
    Ok(Sandbox::new(config.sandbox.clone())?)
}

/// The configured policy, restored from `checkpoint` when given. An
/// external server always answers with its own weights.
pub fn open_policy(config: &RunConfig, checkpoint: Option<&Path>) -> anyhow::Result<Box<dyn Policy>> {
    match config.policy.backend {
        Backend::Toy => match checkpoint {
            Some(dir) => Ok(Box::new(ToyPolicy::load(&dir.join("policy"))?)),
            None => Ok(Box::new(ToyPolicy::new(config.policy.toy.clone())?)),
        },
        Backend::External => {
            if let Some(dir) = checkpoint {
                log::warn!("external backend: {} is not loaded; the server's weights are used", dir.display());
            }
            Ok(Box::new(ExternalPolicy::connect(config.policy.external.client_config()?)?))
        }
    }
}

/// Highest-numbered `checkpoints/epoch-N` of a run directory.
pub fn latest_checkpoint(run_dir: &Path) -> anyhow::Result<(usize, PathBuf)> {
    let dir = run_dir.join("checkpoints");
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(&dir).with_context(|| format!("reading {}", dir.display()))? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(n) = name.strip_prefix("epoch-").and_then(|n| n.parse::<usize>().ok()) {
            if best.as_ref().is_none_or(|(b, _)| n > *b) {
                best = Some((n, entry.path()));
            }
        }
    }
    best.ok_or_else(|| anyhow!("no checkpoint under {}", dir.display()))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    /// Continue from the latest checkpoint of the run directory.
    pub resume: bool,
    /// Replace an existing run directory.
    pub overwrite: bool,
}

pub const CONFIG_ECHO: &str = "config.toml";
pub const METRICS: &str = "metrics.jsonl";
pub const RUN_RECORD: &str = "run.json";

fn check_fresh_dir(dir: &Path, overwrite: bool) -> anyhow::Result<()> {
    let occupied = dir.exists() && fs::read_dir(dir)?.next().is_some();
    if occupied && !overwrite {
        bail!("{} is not empty; pass --overwrite or --resume", dir.display());
    }
    Ok(())
}

/// Trains per `config` into `output.run_dir`: echoed config, metrics,
/// checkpoints, `best` pointer and the final run record.
pub fn cmd_train(config: &RunConfig, options: TrainOptions) -> Result<RunRecord, CliError> {
    config.validate_core().invalid()?;
    let splits = load_splits(config).invalid()?;
    if splits.train.is_empty() {
        return Err(CliError::Invalid(anyhow!("the training split is empty")));
    }
    let run_dir = &config.output.run_dir;
    let resume_from = if options.resume {
        if config.policy.backend != Backend::Toy {
            return Err(CliError::Invalid(anyhow!("resuming needs the toy backend")));
        }
        Some(latest_checkpoint(run_dir).invalid()?)
    } else {
        check_fresh_dir(run_dir, options.overwrite).invalid()?;
        None
    };
    let sandbox = open_sandbox(config).invalid()?;
    let mut policy = open_policy(config, resume_from.as_ref().map(|(_, p)| p.as_path())).invalid()?;
    let ids = splits.train.iter().map(|p| p.id.clone());
    let (mut critic, mut buffer, resume) = match &resume_from {
        Some((_, dir)) => {
            let critic = CriticModel::load(&dir.join("critic")).invalid()?;
            let buffer = ReplayBuffer::load(&dir.join("buffer.jsonl"), ids).invalid()?;
            let state = trainer::read_state(dir).invalid()?;
            let metrics = trainer::read_metrics(&run_dir.join(METRICS)).invalid()?;
            (critic, buffer, Some((state, metrics)))
        }
        None => (CriticModel::new(config.critic_config()).invalid()?, ReplayBuffer::new(), None),
    };

    if options.overwrite && resume.is_none() && run_dir.exists() {
        fs::remove_dir_all(run_dir).with_context(|| format!("clearing {}", run_dir.display())).aborted()?;
    }
    fs::create_dir_all(run_dir).with_context(|| format!("creating {}", run_dir.display())).aborted()?;
    fs::write(run_dir.join(CONFIG_ECHO), config.to_toml().aborted()?).aborted()?;
    let ctx = TrainContext {
        policy: policy.as_mut(),
        critic: &mut critic,
        buffer: &mut buffer,
        sandbox: &sandbox,
        frontend: Frontend::Interpreter(&sandbox),
    };
    let run_options = RunOptions {
        run_dir: Some(run_dir.clone()),
        resume,
    };
    let record = trainer::train(&splits.train, &splits.validation, ctx, &config.train, &run_options).aborted()?;
    let path = run_dir.join(RUN_RECORD);
    fs::write(&path, serde_json::to_vec_pretty(&record).aborted()?).aborted()?;
    Ok(record)
}

/// Resolves a checkpoint reference: a checkpoint directory, or a run
/// directory whose `best` pointer names one.
pub fn resolve_checkpoint(reference: &Path) -> anyhow::Result<PathBuf> {
    let pointer = reference.join("best");
    if pointer.is_file() {
        let rel = fs::read_to_string(&pointer)?;
        return Ok(reference.join(rel.trim()));
    }
    if reference.join("policy").is_dir() {
        return Ok(reference.to_path_buf());
    }
    bail!("{} is neither a checkpoint nor a run directory with a best pointer", reference.display())
}

#[derive(Debug, Clone)]
pub struct EvaluateOptions {
    pub checkpoint: PathBuf,
    pub split: Split,
    /// Report path; the table goes next to it with a `.tsv` extension.
    pub out: Option<PathBuf>,
    pub timestamp: bool,
}

fn sibling(path: &Path, extension: &str) -> PathBuf {
    path.with_extension(extension)
}

pub fn cmd_evaluate(config: &RunConfig, options: &EvaluateOptions) -> Result<EvalReport, CliError> {
    config.eval.validate().invalid()?;
    let checkpoint = resolve_checkpoint(&options.checkpoint).invalid()?;
    let splits = load_splits(config).invalid()?;
    let problems = splits.get(options.split);
    if problems.is_empty() {
        return Err(CliError::Invalid(anyhow!("the {:?} split is empty", options.split)));
    }
    let sandbox = open_sandbox(config).invalid()?;
    let mut policy = open_policy(config, Some(&checkpoint)).invalid()?;
    let out = options.out.clone().unwrap_or_else(|| {
        let split = format!("{:?}", options.split).to_lowercase();
        checkpoint.join(format!("eval-{split}.json"))
    });
    let write = |report: &EvalReport, path: &Path| -> anyhow::Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, serde_json::to_vec_pretty(report)?)?;
        fs::write(sibling(path, "tsv"), report.to_table())?;
        Ok(())
    };
    match evaluate(problems, policy.as_mut(), &sandbox, &config.eval) {
        Ok(mut report) => {
            if options.timestamp {
                report.created_unix = std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .ok()
                    .map(|d| d.as_secs());
            }
            write(&report, &out).aborted()?;
            Ok(report)
        }
        Err(partial) => {
            let path = sibling(&out, "partial.json");
            write(&partial.report, &path).aborted()?;
            Err(CliError::Aborted(anyhow!("{partial}; partial report in {}", path.display())))
        }
    }
}

fn detector(config: &RunConfig) -> Box<dyn LanguageDetector> {
    match config.augment.detector {
        DetectorKind::StopWords => Box::new(StopWordDetector {
            min_ratio: config.augment.min_english_ratio,
        }),
        DetectorKind::AcceptAll => Box::new(AcceptAll),
    }
}

/// Path of the instances the solvability split rejects.
pub fn unsolved_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".unsolved.jsonl");
    out.with_file_name(name)
}

fn report_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".report.json");
    out.with_file_name(name)
}

/// Splits the instances in `out` by solvability when configured.
fn solvability_split(config: &RunConfig, out: &Path, sandbox: &Sandbox) -> Result<Option<(usize, usize)>, CliError> {
    let n = config.augment.solvability_samples;
    if n == 0 {
        return Ok(None);
    }
    let mut policy = open_policy(config, None).invalid()?;
    if !policy.reference_frozen() {
        policy.freeze_reference().aborted()?;
    }
    let instances = load_augmented(out).aborted()?;
    let solvability = SolvabilityConfig {
        n_samples: n,
        decoding: config.eval.decoding,
        limits: config.eval.limits,
        seed: config.eval.seed,
    };
    let (kept, rejected) = solvability_filter(instances, policy.as_mut(), sandbox, &solvability).aborted()?;
    write_problems(out, &kept).aborted()?;
    write_problems(&unsolved_path(out), &rejected).aborted()?;
    Ok(Some((kept.len(), rejected.len())))
}

fn validate_augment(config: &RunConfig, out: &Path) -> anyhow::Result<()> {
    config.augment.core().validate()?;
    if !(config.augment.min_english_ratio >= 0.0 && config.augment.min_english_ratio <= 1.0) {
        bail!("augment.min_english_ratio must lie in [0, 1]");
    }
    if config.augment.solvability_samples > 0 {
        config.validate_core()?;
        config.eval.decoding.validate()?;
    }
    if out.is_dir() {
        bail!("{} is a directory", out.display());
    }
    Ok(())
}

/// Runs the whole pipeline over a source corpus.
pub fn cmd_augment(config: &RunConfig, corpus: &Path, out: &Path) -> Result<AugmentReport, CliError> {
    validate_augment(config, out).invalid()?;
    if !corpus.is_dir() {
        return Err(CliError::Invalid(anyhow!("corpus {} is not a directory", corpus.display())));
    }
    let sandbox = open_sandbox(config).invalid()?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).aborted()?;
    }
    let report = run_augment(corpus, out, &config.augment.core(), detector(config).as_ref(), &sandbox).aborted()?;
    if let Some((kept, rejected)) = solvability_split(config, out, &sandbox)? {
        log::info!("solvability: {kept} kept, {rejected} written to {}", unsolved_path(out).display());
    }
    fs::write(report_path(out), serde_json::to_vec_pretty(&report).aborted()?).aborted()?;
    Ok(report)
}

/// Converts externally generated suites, one JSON object per line.
pub fn cmd_convert_tests(config: &RunConfig, input: &Path, out: &Path) -> Result<AugmentReport, CliError> {
    validate_augment_conversion(config, out).invalid()?;
    let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display())).invalid()?;
    let mut suites = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let suite: ExternalSuite =
            serde_json::from_str(line).with_context(|| format!("{}:{}", input.display(), i + 1)).invalid()?;
        suites.push((i + 1, suite));
    }
    let sandbox = open_sandbox(config).invalid()?;
    let core = config.augment.core();
    let mut report = AugmentReport {
        functions: suites.len(),
        ..AugmentReport::default()
    };
    let mut problems = Vec::new();
    let mut provenance = String::new();
    for (line, suite) in &suites {
        let hash = fnv1a64(serde_json::to_string(suite).aborted()?.as_bytes());
        let id = suite.id.clone().unwrap_or_else(|| format!("{}-{hash:016x}", core.id_prefix));
        if let Some((problem, source_tests)) = convert_suite(&id, suite, &core, &sandbox, &mut report).aborted()? {
            let record = Provenance {
                id: problem.id.clone(),
                origin: format!("{}:{line}", input.display()),
                class_name: String::new(),
                method_name: augment::parse_signature(&suite.signature).map(|s| s.name).unwrap_or_default(),
                source_signature: suite.signature.clone(),
                content_hash: format!("{hash:016x}"),
                generator_log: String::new(),
                source_tests,
            };
            provenance.push_str(&serde_json::to_string(&record).aborted()?);
            provenance.push('\n');
            problems.push(problem);
        }
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).aborted()?;
    }
    write_problems(out, &problems).aborted()?;
    fs::write(augment::provenance_path(out), provenance).aborted()?;
    fs::write(report_path(out), serde_json::to_vec_pretty(&report).aborted()?).aborted()?;
    Ok(report)
}

fn validate_augment_conversion(config: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let core = config.augment.core();
    if !(core.loss_weight > 0.0 && core.loss_weight <= 1.0) {
        bail!("augment.loss_weight {} outside (0, 1]", core.loss_weight);
    }
    if let Some(tol) = config.augment.float_tolerance {
        if !(tol >= 0.0 && tol.is_finite()) {
            bail!("augment.float_tolerance must be a nonnegative number");
        }
    }
    if out.is_dir() {
        bail!("{} is a directory", out.display());
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Sweep {
    /// One cell per `ablate.rho_values` entry.
    Rho,
    /// Replay buffer on and off.
    Buffer,
}

/// One trained and evaluated ablation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: String,
    pub seed: u64,
    pub run_dir: PathBuf,
    pub checkpoint_epoch: usize,
    pub greedy: f64,
    pub pass_at_k: Vec<(usize, f64)>,
    pub best_validation: Option<f64>,
    pub final_mean_kl: f64,
    pub max_mean_kl: f64,
    pub distinct_valid: usize,
    pub final_solved_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub sweep: String,
    pub rows: Vec<AblationRow>,
}

fn rho_label(rho: f64) -> String {
    if rho.is_infinite() {
        "rho=inf".into()
    } else {
        format!("rho={rho}")
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl AblationResult {
    /// Markdown table with one row per cell, medians over seeds.
    pub fn to_markdown(&self, ks: &[usize]) -> String {
        let mut out = String::from("| | Greedy |");
        for k in ks {
            let _ = write!(out, " Pass@{k} |");
        }
        out.push_str(" Mean KL (max) | Distinct valid | Seeds |\n|---|---|");
        out.push_str(&"---|".repeat(ks.len() + 3));
        out.push('\n');
        let mut cells: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !cells.contains(&r.cell.as_str()) {
                cells.push(&r.cell);
            }
        }
        for cell in cells {
            let rows: Vec<&AblationRow> = self.rows.iter().filter(|r| r.cell == cell).collect();
            let col = |f: &dyn Fn(&AblationRow) -> f64| median(rows.iter().map(|r| f(r)).collect());
            let _ = write!(out, "| {cell} | {:.1} |", 100.0 * col(&|r| r.greedy));
            for (i, _) in ks.iter().enumerate() {
                let _ = write!(out, " {:.1} |", 100.0 * col(&|r| r.pass_at_k[i].1));
            }
            let _ = writeln!(
                out,
                " {:.3} ({:.3}) | {} | {} |",
                col(&|r| r.final_mean_kl),
                col(&|r| r.max_mean_kl),
                col(&|r| r.distinct_valid as f64),
                rows.len()
            );
        }
        out
    }
}

pub const ABLATION_JSON: &str = "ablation.json";
pub const ABLATION_TABLE: &str = "ablation.md";

/// Trains and evaluates every cell of a sweep under `output.run_dir`.
pub fn cmd_ablate(config: &RunConfig, sweep: Sweep, overwrite: bool) -> Result<AblationResult, CliError> {
    let seeds = if config.ablate.seeds.is_empty() {
        vec![config.train.seed]
    } else {
        config.ablate.seeds.clone()
    };
    let cells: Vec<(String, RunConfig)> = match sweep {
        Sweep::Rho => config
            .ablate
            .rho_values
            .iter()
            .map(|rho| {
                let mut c = config.clone();
                c.train.reward.rho = rho.0;
                (rho_label(rho.0), c)
            })
            .collect(),
        Sweep::Buffer => [("with buffer", true), ("without buffer", false)]
            .into_iter()
            .map(|(label, on)| {
                let mut c = config.clone();
                c.train.buffer_enabled = on;
                (label.to_string(), c)
            })
            .collect(),
    };
    if cells.is_empty() {
        return Err(CliError::Invalid(anyhow!("the sweep has no cells")));
    }
    let root = config.output.run_dir.clone();
    check_fresh_dir(&root, overwrite).invalid()?;
    let mut runs = Vec::new();
    for (label, cell) in &cells {
        for &seed in &seeds {
            let mut c = cell.clone();
            c.train.seed = seed;
            c.policy.toy.seed = seed;
            c.critic.seed = seed;
            c.eval.seed = seed;
            let slug: String = label.chars().map(|ch| if ch.is_ascii_alphanumeric() || ch == '.' { ch } else { '-' }).collect();
            c.output.run_dir = root.join(slug).join(format!("seed-{seed}"));
            c.validate_core().invalid()?;
            c.eval.validate().invalid()?;
            runs.push((label.clone(), seed, c));
        }
    }
    load_splits(config).invalid()?;
    if overwrite && root.exists() {
        fs::remove_dir_all(&root).aborted()?;
    }
    let mut rows = Vec::new();
    for (label, seed, c) in runs {
        log::info!("ablation cell {label}, seed {seed}");
        let record = cmd_train(&c, TrainOptions::default())?;
        let epoch = select_checkpoint(&record).unwrap_or_else(|_| record.epochs.last().map_or(0, |m| m.epoch));
        let checkpoint = trainer::checkpoint_dir(&c.output.run_dir, epoch);
        let report = cmd_evaluate(
            &c,
            &EvaluateOptions {
                checkpoint: checkpoint.clone(),
                split: Split::Test,
                out: None,
                timestamp: false,
            },
        )?;
        let last = record.epochs.last();
        rows.push(AblationRow {
            cell: label,
            seed,
            run_dir: c.output.run_dir.clone(),
            checkpoint_epoch: epoch,
            greedy: report.greedy_rate,
            pass_at_k: report.pass_at_k.iter().map(|(k, v)| (*k, *v)).collect(),
            best_validation: record.epochs.iter().filter_map(|m| m.validation_greedy).reduce(f64::max),
            final_mean_kl: last.map_or(0.0, |m| m.generation.mean_kl),
            max_mean_kl: record.epochs.iter().map(|m| m.generation.mean_kl).fold(0.0, f64::max),
            distinct_valid: last.map_or(0, |m| m.distinct_valid),
            final_solved_rate: last.map_or(0.0, |m| m.generation.solved_rate),
        });
    }
    let result = AblationResult {
        sweep: format!("{sweep:?}").to_lowercase(),
        rows,
    };
    let mut ks = config.eval.ks.clone();
    ks.sort_unstable();
    ks.dedup();
    fs::write(root.join(ABLATION_JSON), serde_json::to_vec_pretty(&result).aborted()?).aborted()?;
    fs::write(root.join(ABLATION_TABLE), result.to_markdown(&ks)).aborted()?;
    Ok(result)
}

/// Serves the toy policy over the wire protocol: on standard streams, or
/// on a TCP listener whose address is printed as `listening on ADDR`.
/// Returns after a `shutdown` request.
pub fn cmd_serve_toy(config: &RunConfig, listen: Option<&str>, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let mut policy: ToyPolicy = match checkpoint {
        Some(dir) => ToyPolicy::load(&resolve_checkpoint(dir).invalid()?.join("policy")).invalid()?,
        None => ToyPolicy::new(config.policy.toy.clone()).invalid()?,
    };
    let Some(addr) = listen else {
        let stdin = std::io::stdin();
        return utrl_core::policy::protocol::serve(&mut policy, stdin.lock(), std::io::stdout()).aborted();
    };
    let listener = TcpListener::bind(addr).with_context(|| format!("binding {addr}")).invalid()?;
    let local = listener.local_addr().aborted()?;
    println!("listening on {local}");
    std::io::stdout().flush().aborted()?;
    for stream in listener.incoming() {
        let stream = stream.aborted()?;
        let mut writer = stream.try_clone().aborted()?;
        let reader = BufReader::new(stream);
        for line in reader.lines() {
            let Ok(line) = line else { break };
            if line.trim().is_empty() {
                continue;
            }
            let (response, stop) = handle_line(&mut policy, &line);
            let mut text = serde_json::to_vec(&response).aborted()?;
            text.push(b'\n');
            if writer.write_all(&text).and_then(|_| writer.flush()).is_err() {
                break;
            }
            if stop {
                return Ok(());
            }
        }
        log::info!("client disconnected; waiting for the next one");
    }
    Ok(())
}
