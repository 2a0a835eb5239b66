//! Run configuration: one TOML document with a section per component.
//!
//! Layering, lowest first: a preset, an optional file, then one flag per
//! leaf field (`--train.n_gen 16`). Flags are generated from [`FIELDS`],
//! which must list every leaf of the serialized default config.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use serde::{Deserialize, Serialize};
use utrl_core::augment::{AugmentConfig, ExtractFilters, FloatMode, GeneratorConfig};
use utrl_core::critic::{Activation, CriticConfig, FeatureSource, HeadKind};
use utrl_core::evaluator::EvalConfig;
use utrl_core::policy::protocol::{Endpoint, ExternalPolicyConfig};
use utrl_core::policy::ToyPolicyConfig;
use utrl_core::sandbox::SandboxConfig;
use utrl_core::toy;
use utrl_core::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub critic: CriticSection,
    pub policy: PolicySection,
    pub sandbox: SandboxConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub augment: AugmentSection,
    pub ablate: AblateSection,
    pub output: OutputSection,
}

/// Critic architecture. Its learning rate is `train.critic_lr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriticSection {
    pub feature_dim: usize,
    pub head: HeadKind,
    pub hidden_dim: usize,
    pub activation: Activation,
    pub features: FeatureSource,
    pub seed: u64,
}

impl Default for CriticSection {
    fn default() -> Self {
        CriticSection::from(CriticConfig::default())
    }
}

impl From<CriticConfig> for CriticSection {
    fn from(c: CriticConfig) -> Self {
        CriticSection {
            feature_dim: c.feature_dim,
            head: c.head,
            hidden_dim: c.hidden_dim,
            activation: c.activation,
            features: c.features,
            seed: c.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Toy,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub backend: Backend,
    pub toy: ToyPolicyConfig,
    pub external: ExternalSection,
}

/// Where an external policy is served: a command speaking the protocol on
/// its standard streams, or a `host:port` address.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExternalSection {
    pub command: Vec<String>,
    pub address: String,
    pub retries: u32,
    pub retry_delay_ms: u64,
}

impl Default for ExternalSection {
    fn default() -> Self {
        ExternalSection {
            command: Vec::new(),
            address: String::new(),
            retries: 2,
            retry_delay_ms: 500,
        }
    }
}

impl ExternalSection {
    pub fn client_config(&self) -> anyhow::Result<ExternalPolicyConfig> {
        let endpoint = match (self.command.is_empty(), self.address.is_empty()) {
            (false, true) => Endpoint::Command(self.command.clone()),
            (true, false) => Endpoint::Tcp(self.address.clone()),
            _ => bail!("exactly one of policy.external.command and policy.external.address must be set"),
        };
        Ok(ExternalPolicyConfig {
            endpoint,
            retries: self.retries,
            retry_delay_ms: self.retry_delay_ms,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    /// The built-in eight-problem suite for every split.
    Toy,
    /// The official MBPP file, split by task id.
    #[default]
    Mbpp,
    /// Separate problem files per split.
    Files,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub suite: Suite,
    pub mbpp: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub validation: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Augmented instance files appended to the training split.
    pub augmented: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    #[default]
    StopWords,
    AcceptAll,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub filters: ExtractFilters,
    pub generator: GeneratorConfig,
    /// Emit `abs(actual - expected) <= tol` for float expectations instead
    /// of exact equality.
    pub float_tolerance: Option<f64>,
    pub loss_weight: f64,
    pub workers: usize,
    pub id_prefix: String,
    pub detector: DetectorKind,
    pub min_english_ratio: f64,
    /// Samples per instance for the solvability split; zero skips it.
    pub solvability_samples: usize,
}

impl Default for AugmentSection {
    fn default() -> Self {
        let a = AugmentConfig::default();
        AugmentSection {
            filters: a.filters,
            generator: a.generator,
            float_tolerance: None,
            loss_weight: a.loss_weight,
            workers: a.workers,
            id_prefix: a.id_prefix,
            detector: DetectorKind::StopWords,
            min_english_ratio: utrl_core::augment::StopWordDetector::default().min_ratio,
            solvability_samples: 0,
        }
    }
}

impl AugmentSection {
    pub fn core(&self) -> AugmentConfig {
        AugmentConfig {
            filters: self.filters,
            generator: self.generator.clone(),
            float_mode: match self.float_tolerance {
                Some(tol) => FloatMode::Tolerance { tol },
                None => FloatMode::Exact,
            },
            loss_weight: self.loss_weight,
            workers: self.workers,
            id_prefix: self.id_prefix.clone(),
        }
    }
}

/// A target KL value that may be `inf`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Rho(#[serde(with = "utrl_core::util::extended_f64")] pub f64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub rho_values: Vec<Rho>,
    /// Seeds run per cell; empty means `train.seed` alone.
    pub seeds: Vec<u64>,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            rho_values: [f64::INFINITY, 0.1, 0.08, 0.07, 0.05, 0.02].into_iter().map(Rho).collect(),
            seeds: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub run_dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            run_dir: PathBuf::from("runs/latest"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// Full-scale hyperparameters; data must be supplied.
    Default,
    /// The built-in toy suite with settings that learn it on a laptop.
    Toy,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Default => RunConfig::default(),
            Preset::Toy => RunConfig::toy(0),
        }
    }

    pub fn toy(seed: u64) -> Self {
        let train = toy::toy_train_config(seed);
        RunConfig {
            eval: EvalConfig {
                decoding: train.decoding,
                seed,
                ..EvalConfig::default()
            },
            train,
            critic: toy::toy_critic_config(seed).into(),
            policy: PolicySection {
                backend: Backend::Toy,
                toy: toy::toy_policy_config(seed),
                external: ExternalSection::default(),
            },
            data: DataConfig {
                suite: Suite::Toy,
                ..DataConfig::default()
            },
            ..RunConfig::default()
        }
    }

    pub fn critic_config(&self) -> CriticConfig {
        let c = self.critic;
        CriticConfig {
            feature_dim: c.feature_dim,
            head: c.head,
            hidden_dim: c.hidden_dim,
            activation: c.activation,
            features: c.features,
            learning_rate: self.train.critic_lr,
            seed: c.seed,
        }
    }

    /// Checks shared by every command that trains or samples.
    pub fn validate_core(&self) -> anyhow::Result<()> {
        self.train.validate().context("train")?;
        self.critic_config().validate().context("critic")?;
        if self.sandbox.workers == 0 {
            bail!("sandbox.workers must be positive");
        }
        match self.policy.backend {
            Backend::Toy => {
                utrl_core::policy::ToyPolicy::new(self.policy.toy.clone()).context("policy.toy")?;
            }
            Backend::External => {
                self.policy.external.client_config()?;
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        toml::to_string(self).context("serializing config")
    }
}

/// How a flag value is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    /// Taken verbatim as a string.
    Text,
    /// Parsed as a TOML value: numbers, booleans, `inf`, arrays.
    Value,
}

use Kind::{Text, Value};

/// Every leaf field: dotted path, how its flag is read, and its help text.
pub const FIELDS: &[(&str, Kind, &str)] = &[
    ("train.max_epochs", Value, "Training epochs"),
    ("train.n_gen", Value, "Samples per problem per epoch, and buffer solutions mixed in"),
    ("train.n_mini", Value, "Trajectories per policy and critic minibatch"),
    ("train.policy_lr", Value, "Policy learning rate"),
    ("train.critic_lr", Value, "Critic learning rate"),
    ("train.decoding.top_p", Value, "Nucleus mass during training"),
    ("train.decoding.temperature", Value, "Sampling temperature during training"),
    ("train.decoding.max_len", Value, "Maximum completion length in tokens"),
    ("train.decoding.mode", Text, "nucleus or greedy"),
    ("train.reward.lambda", Value, "Reward scale; a full pass earns this much"),
    ("train.reward.eta", Value, "Exponent on the pass fraction"),
    ("train.reward.compile_penalty", Value, "Reward for code that does not compile"),
    ("train.reward.rho", Value, "Target mean KL; inf disables the constraint"),
    ("train.reward.zeta_init", Value, "Initial KL coefficient"),
    ("train.reward.controller_gain", Value, "KL controller gain"),
    ("train.reward.controller_clip", Value, "KL controller error clip"),
    ("train.limits.wall_time_secs", Value, "Wall-clock limit per program run"),
    ("train.limits.memory_bytes", Value, "Address-space limit per program run"),
    ("train.limits.output_bytes", Value, "Captured output limit per program run"),
    ("train.seed", Value, "Run seed; every random substream derives from it"),
    ("train.buffer_enabled", Value, "Mix replay-buffer solutions into each epoch"),
    ("train.validation_every", Value, "Greedy validation cadence in epochs"),
    ("train.checkpoint_every", Value, "Checkpoint cadence in epochs; 0 keeps best and last only"),
    ("critic.feature_dim", Value, "Width of the hashed feature vector"),
    ("critic.head", Text, "linear or mlp"),
    ("critic.hidden_dim", Value, "Hidden width of the mlp head"),
    ("critic.activation", Text, "relu or tanh"),
    ("critic.features", Text, "hashed or embedding"),
    ("critic.seed", Value, "Critic initialization seed"),
    ("policy.backend", Text, "toy or external"),
    ("policy.toy.vocabulary", Text, "Toy policy symbols; end-of-sequence is added"),
    ("policy.toy.context_window", Value, "Toy policy context length in symbols"),
    ("policy.toy.backoff_buckets", Value, "Toy policy hashed backoff rows"),
    ("policy.toy.init_scale", Value, "Standard deviation of initial toy logits"),
    ("policy.toy.seed", Value, "Toy policy initialization seed"),
    ("policy.external.command", Value, "Command serving the policy protocol on stdio, as a list"),
    ("policy.external.address", Text, "host:port of a policy server"),
    ("policy.external.retries", Value, "Reconnect attempts after a transport failure"),
    ("policy.external.retry_delay_ms", Value, "Delay between reconnect attempts"),
    ("sandbox.interpreter", Value, "Interpreter command, as a list"),
    ("sandbox.env_allow", Value, "Environment variables passed to the interpreter"),
    ("sandbox.workers", Value, "Parallel interpreter workers"),
    ("sandbox.cache", Value, "Memoize identical executions"),
    ("data.suite", Text, "toy, mbpp or files"),
    ("data.mbpp", Text, "MBPP problem file"),
    ("data.train", Text, "Training problems (suite = files)"),
    ("data.validation", Text, "Validation problems (suite = files)"),
    ("data.test", Text, "Test problems (suite = files)"),
    ("data.augmented", Value, "Augmented instance files added to training, as a list"),
    ("eval.n_samples", Value, "Samples per problem for pass@k"),
    ("eval.ks", Value, "pass@k values of k, as a list"),
    ("eval.decoding.top_p", Value, "Nucleus mass during evaluation"),
    ("eval.decoding.temperature", Value, "Sampling temperature during evaluation"),
    ("eval.decoding.max_len", Value, "Maximum completion length during evaluation"),
    ("eval.decoding.mode", Text, "nucleus or greedy"),
    ("eval.limits.wall_time_secs", Value, "Wall-clock limit per program run"),
    ("eval.limits.memory_bytes", Value, "Address-space limit per program run"),
    ("eval.limits.output_bytes", Value, "Captured output limit per program run"),
    ("eval.seed", Value, "Evaluation sampling seed"),
    ("augment.filters.min_tokens", Value, "Shortest description kept, in words"),
    ("augment.filters.max_tokens", Value, "Longest description kept, in words"),
    ("augment.generator.command", Value, "Test generator command template, as a list"),
    ("augment.generator.budget_secs", Value, "Search budget passed as {budget}"),
    ("augment.generator.timeout_secs", Value, "Wall-clock limit per generator run"),
    ("augment.generator.compile_command", Value, "Optional source compile check, as a list"),
    ("augment.generator.min_interval_ms", Value, "Minimum spacing between generator starts"),
    ("augment.float_tolerance", Value, "Compare float expectations within this tolerance"),
    ("augment.loss_weight", Value, "Loss weight written into emitted instances"),
    ("augment.workers", Value, "Parallel pipeline workers"),
    ("augment.id_prefix", Text, "Prefix of emitted instance ids"),
    ("augment.detector", Text, "stop_words or accept_all"),
    ("augment.min_english_ratio", Value, "Stop-word share needed to count as English"),
    ("augment.solvability_samples", Value, "Samples per instance for the solvability split; 0 skips"),
    ("ablate.rho_values", Value, "Target KL values of the rho sweep, as a list"),
    ("ablate.seeds", Value, "Seeds per ablation cell, as a list"),
    ("output.run_dir", Text, "Run directory"),
];

pub fn field(path: &str) -> Option<(Kind, &'static str)> {
    FIELDS.iter().find(|(p, _, _)| *p == path).map(|(_, k, d)| (*k, *d))
}

/// Dotted paths of the leaves of a serialized config. Objects are walked;
/// everything else, including lists and nulls, is a leaf.
pub fn schema_leaves(config: &RunConfig) -> Vec<String> {
    fn walk(prefix: &str, v: &serde_json::Value, out: &mut Vec<String>) {
        match v {
            serde_json::Value::Object(map) => {
                for (k, child) in map {
                    let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&path, child, out);
                }
            }
            _ => out.push(prefix.to_string()),
        }
    }
    let mut out = Vec::new();
    walk("", &serde_json::to_value(config).expect("config serializes"), &mut out);
    out
}

/// Reads a flag value according to its kind.
pub fn parse_value(kind: Kind, raw: &str) -> anyhow::Result<toml::Value> {
    match kind {
        Kind::Text => Ok(toml::Value::String(raw.to_string())),
        Kind::Value => {
            let doc: toml::Table =
                toml::from_str(&format!("v = {raw}")).map_err(|e| anyhow!("`{raw}` is not a value: {e}"))?;
            Ok(doc["v"].clone())
        }
    }
}

fn set_path(root: &mut toml::Table, path: &str, value: toml::Value) -> anyhow::Result<()> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().expect("nonempty path");
    let mut table = root;
    for p in parts {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| anyhow!("`{p}` in `{path}` is not a table"))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Builds the effective config: `base`, then `file`, then `overrides`.
pub fn layer(base: &RunConfig, file: Option<&Path>, overrides: &[(String, toml::Value)]) -> anyhow::Result<RunConfig> {
    let mut table: toml::Table = toml::from_str(&base.to_toml()?).context("re-reading base config")?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let doc: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        merge(&mut table, doc);
    }
    for (path, value) in overrides {
        set_path(&mut table, path, value.clone())?;
    }
    toml::Value::Table(table).try_into().context("config does not match the schema")
}
