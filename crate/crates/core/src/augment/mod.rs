//! Unit-test mining from a strongly-typed source corpus.
//!
//! Documented static methods are extracted from Java files, an external
//! test generator is run on each of them, and the resulting assertions and
//! the method header are converted into target-language test statements and
//! a signature. Method bodies are not translated: converted instances carry
//! no seed solutions.

pub mod detect;
pub mod generator;
pub mod java;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub use detect::{AcceptAll, LanguageDetector, StopWordDetector};
pub use generator::{generate_tests, mock_generate, GeneratedSuite, GenerationFailure, GeneratorConfig};
pub use java::{convert_assertion, parse_assertion, parse_signature, FloatMode, JavaSignature, SourceAssertion};

use crate::dataset::{make_prompt, program_for_completion, references_call, write_problems, Problem, ProblemSource};
use crate::error::{Error, Result};
use crate::policy::{DecodingParams, Policy};
use crate::sandbox::{ExecutionLimits, Sandbox};
use crate::util::{combine, derive_seed, fnv1a64};

/// A documented method pulled out of the corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceFunction {
    pub description: String,
    /// Source-language header, whitespace-collapsed.
    pub signature: String,
    /// Body including its braces.
    pub code: String,
    pub origin: PathBuf,
    pub class_name: String,
    pub method_name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractFilters {
    /// Bounds on the whitespace-token count of a description, inclusive.
    pub min_tokens: usize,
    pub max_tokens: usize,
}

impl Default for ExtractFilters {
    fn default() -> Self {
        ExtractFilters {
            min_tokens: 10,
            max_tokens: 512,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractStats {
    pub files: usize,
    pub unreadable_files: usize,
    pub documented_methods: usize,
    pub non_static: usize,
    pub non_english: usize,
    pub length_filtered: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Extraction {
    pub functions: Vec<SourceFunction>,
    pub stats: ExtractStats,
}

fn method_name(header: &str) -> String {
    header
        .split('(')
        .next()
        .and_then(|h| h.split_whitespace().last())
        .unwrap_or_default()
        .to_string()
}

/// Walks `root` in path order and returns every documented static method
/// whose description passes the language and length filters. Files that
/// cannot be read or lexed are skipped and counted.
pub fn extract_functions(root: &Path, filters: &ExtractFilters, detector: &dyn LanguageDetector) -> Result<Extraction> {
    if !root.is_dir() {
        return Err(Error::Config(format!("corpus root {} is not a directory", root.display())));
    }
    let mut out = Extraction::default();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = match entry {
            Ok(e) => e,
            Err(e) => {
                log::warn!("augment: skipping unreadable entry: {e}");
                out.stats.unreadable_files += 1;
                continue;
            }
        };
        if !entry.file_type().is_file() || entry.path().extension().is_none_or(|x| x != "java") {
            continue;
        }
        out.stats.files += 1;
        let methods = fs::read_to_string(entry.path())
            .map_err(|e| e.to_string())
            .and_then(|src| java::documented_methods(&src).map_err(|e| e.to_string()));
        let methods = match methods {
            Ok(m) => m,
            Err(e) => {
                log::warn!("augment: skipping {}: {e}", entry.path().display());
                out.stats.unreadable_files += 1;
                continue;
            }
        };
        for m in methods {
            out.stats.documented_methods += 1;
            if !m.is_static {
                out.stats.non_static += 1;
                continue;
            }
            let description = java::doc_text(&m.doc);
            let tokens = description.split_whitespace().count();
            if tokens < filters.min_tokens || tokens > filters.max_tokens {
                out.stats.length_filtered += 1;
                continue;
            }
            if !detector.is_english(&description) {
                out.stats.non_english += 1;
                continue;
            }
            out.functions.push(SourceFunction {
                description,
                method_name: method_name(&m.header),
                signature: m.header,
                code: m.body,
                origin: entry.path().strip_prefix(root).unwrap_or(entry.path()).to_path_buf(),
                class_name: m.class_name,
            });
        }
    }
    Ok(out)
}

/// `def name(p1, p2):` from a source-language header.
pub fn convert_signature(source: &str) -> Result<String> {
    let sig = parse_signature(source)?;
    Ok(format!("def {}({}):", sig.name, sig.params.join(", ")))
}

fn expected_key(test: &str) -> String {
    parse_assertion(test).map_or_else(|_| test.to_string(), |a| a.expected_key())
}

/// Drops suites with fewer than two tests or with a single expected
/// outcome shared by every test.
pub fn filter_suite(suite: GeneratedSuite) -> Option<GeneratedSuite> {
    if suite.tests.len() < 2 {
        return None;
    }
    let outcomes: BTreeSet<String> = suite.tests.iter().map(|t| expected_key(t)).collect();
    (outcomes.len() > 1).then_some(suite)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub filters: ExtractFilters,
    pub generator: GeneratorConfig,
    pub float_mode: FloatMode,
    /// Written into every emitted instance.
    pub loss_weight: f64,
    pub workers: usize,
    pub id_prefix: String,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            filters: ExtractFilters::default(),
            generator: GeneratorConfig::default(),
            float_mode: FloatMode::Exact,
            loss_weight: 1.0,
            workers: 1,
            id_prefix: "aug".into(),
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.filters.min_tokens > self.filters.max_tokens {
            return Err(Error::Config("min_tokens exceeds max_tokens".into()));
        }
        if !(self.loss_weight > 0.0 && self.loss_weight <= 1.0) {
            return Err(Error::Config(format!("loss_weight {} outside (0, 1]", self.loss_weight)));
        }
        if let FloatMode::Tolerance { tol } = self.float_mode {
            if !(tol >= 0.0 && tol.is_finite()) {
                return Err(Error::Config(format!("float tolerance {tol} must be finite and non-negative")));
            }
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        self.generator.validate()
    }
}

/// Counters over one pipeline run. Every extracted function ends in exactly
/// one of `signature_failures`, `generator_failures`, `suite_filtered`,
/// `compile_failures` or `emitted`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentReport {
    pub extract: ExtractStats,
    pub functions: usize,
    pub signature_failures: usize,
    pub generator_failures: usize,
    pub suite_filtered: usize,
    pub compile_failures: usize,
    pub emitted: usize,
    /// Generator output reused from an earlier run.
    pub cached: usize,
    /// Assertions the generator emitted outside the supported fragment.
    pub unsupported_assertions: usize,
    /// Assertions dropped in conversion or the compile check.
    pub dropped_assertions: usize,
}

impl AugmentReport {
    fn absorb(&mut self, o: &AugmentReport) {
        self.signature_failures += o.signature_failures;
        self.generator_failures += o.generator_failures;
        self.suite_filtered += o.suite_filtered;
        self.compile_failures += o.compile_failures;
        self.emitted += o.emitted;
        self.cached += o.cached;
        self.unsupported_assertions += o.unsupported_assertions;
        self.dropped_assertions += o.dropped_assertions;
    }
}

/// Sidecar record tying an emitted instance to where it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub id: String,
    pub origin: String,
    pub class_name: String,
    pub method_name: String,
    pub source_signature: String,
    pub content_hash: String,
    /// Generator output log, relative to the output directory.
    pub generator_log: String,
    pub source_tests: Vec<String>,
}

/// Source-language material for one instance, as produced by the
/// generator or supplied from outside.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExternalSuite {
    #[serde(default)]
    pub id: Option<String>,
    pub description: String,
    /// Source-language header.
    pub signature: String,
    /// Source-language assertion statements.
    pub tests: Vec<String>,
}

fn stub_program(signature: &str) -> String {
    format!("{signature}\n    pass\n")
}

/// Converts one suite into a problem: signature and assertions are
/// converted, unsupported or non-compiling assertions dropped, and the
/// suite filter applied again to what is left. `None` with the reason
/// counted in `report` when nothing usable remains. `Ok(None)` never hides
/// a sandbox failure; those are returned as errors.
pub fn convert_suite(
    id: &str,
    suite: &ExternalSuite,
    config: &AugmentConfig,
    sandbox: &Sandbox,
    report: &mut AugmentReport,
) -> Result<Option<(Problem, Vec<String>)>> {
    let signature = match convert_signature(&suite.signature) {
        Ok(s) => s,
        Err(e) => {
            log::info!("augment: {id}: dropping, signature `{}`: {e}", suite.signature);
            report.signature_failures += 1;
            return Ok(None);
        }
    };
    let entry = parse_signature(&suite.signature)?.name;
    let stub = stub_program(&signature);
    let check = sandbox.check_compile(&stub)?;
    if !check.ok {
        log::info!("augment: {id}: stub does not compile: {}", check.diagnostics);
        report.compile_failures += 1;
        return Ok(None);
    }
    let mut kept_source = Vec::new();
    let mut kept = Vec::new();
    for test in &suite.tests {
        let converted = match convert_assertion(test, config.float_mode) {
            Ok(c) if references_call(&c, &entry) => c,
            Ok(c) => {
                log::debug!("augment: {id}: `{c}` does not call {entry}");
                report.dropped_assertions += 1;
                continue;
            }
            Err(e) => {
                log::debug!("augment: {id}: dropping `{test}`: {e}");
                report.dropped_assertions += 1;
                continue;
            }
        };
        let check = sandbox.check_compile(&format!("{stub}\n{converted}\n"))?;
        if !check.ok {
            log::debug!("augment: {id}: `{converted}` does not compile: {}", check.diagnostics);
            report.dropped_assertions += 1;
            continue;
        }
        if !kept.contains(&converted) {
            kept_source.push(test.clone());
            kept.push(converted);
        }
    }
    let survivors = GeneratedSuite {
        class_name: String::new(),
        method_name: entry,
        tests: kept_source.clone(),
        unsupported: 0,
        diagnostics: String::new(),
    };
    if filter_suite(survivors).is_none() {
        report.suite_filtered += 1;
        return Ok(None);
    }
    let problem = Problem {
        id: id.to_string(),
        description: suite.description.clone(),
        signature,
        tests: kept,
        seed_solutions: Vec::new(),
        source: ProblemSource::Augmented,
        loss_weight: config.loss_weight,
    };
    problem.validate()?;
    report.emitted += 1;
    Ok(Some((problem, kept_source)))
}

/// Path of the provenance sidecar written next to `out`.
pub fn provenance_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".provenance.jsonl");
    out.with_file_name(name)
}

/// Directory holding per-function generator workspaces and cached suites.
pub fn work_dir(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".work");
    out.with_file_name(name)
}

fn content_hash(f: &SourceFunction) -> u64 {
    let text = format!(
        "{}\u{0}{}\u{0}{}\u{0}{}\u{0}{}",
        f.origin.display(),
        f.class_name,
        f.signature,
        f.code,
        f.description
    );
    fnv1a64(text.as_bytes())
}

fn generator_key(config: &GeneratorConfig) -> u64 {
    fnv1a64(format!("{:?}|{}|{:?}", config.command, config.budget_secs, config.compile_command).as_bytes())
}

#[derive(Serialize, Deserialize)]
struct CachedSuite {
    generator_key: String,
    suite: GeneratedSuite,
}

struct RateLimit {
    next: Mutex<Instant>,
    interval: Duration,
}

impl RateLimit {
    fn wait(&self) {
        if self.interval.is_zero() {
            return;
        }
        let start = {
            let mut next = self.next.lock().expect("rate limiter poisoned");
            let start = (*next).max(Instant::now());
            *next = start + self.interval;
            start
        };
        std::thread::sleep(start.saturating_duration_since(Instant::now()));
    }
}

type Emitted = Option<(Problem, Provenance)>;

fn process(
    f: &SourceFunction,
    config: &AugmentConfig,
    sandbox: &Sandbox,
    work: &Path,
    limiter: &RateLimit,
) -> Result<(Emitted, AugmentReport)> {
    let mut report = AugmentReport::default();
    let hash = format!("{:016x}", content_hash(f));
    let id = format!("{}-{hash}", config.id_prefix);
    if let Err(e) = convert_signature(&f.signature) {
        log::info!("augment: {id}: dropping, signature `{}`: {e}", f.signature);
        report.signature_failures += 1;
        return Ok((None, report));
    }
    let dir = work.join(&hash);
    let cache = dir.join("suite.json");
    let key = format!("{:016x}", generator_key(&config.generator));
    let cached = fs::read_to_string(&cache)
        .ok()
        .and_then(|s| serde_json::from_str::<CachedSuite>(&s).ok())
        .filter(|c| c.generator_key == key);
    let suite = match cached {
        Some(c) => {
            report.cached += 1;
            c.suite
        }
        None => {
            limiter.wait();
            match generate_tests(f, &config.generator, &dir.join("workspace")) {
                Ok(suite) => {
                    let record = CachedSuite {
                        generator_key: key,
                        suite: suite.clone(),
                    };
                    fs::write(&cache, serde_json::to_string_pretty(&record)?).map_err(|e| Error::io(&cache, e))?;
                    suite
                }
                Err(e) => {
                    log::warn!("augment: {id} ({}.{}): {e}", f.class_name, f.method_name);
                    report.generator_failures += 1;
                    return Ok((None, report));
                }
            }
        }
    };
    report.unsupported_assertions += suite.unsupported;
    let Some(suite) = filter_suite(suite) else {
        report.suite_filtered += 1;
        return Ok((None, report));
    };
    let external = ExternalSuite {
        id: Some(id.clone()),
        description: f.description.clone(),
        signature: f.signature.clone(),
        tests: suite.tests,
    };
    let Some((problem, source_tests)) = convert_suite(&id, &external, config, sandbox, &mut report)? else {
        return Ok((None, report));
    };
    let provenance = Provenance {
        id,
        origin: f.origin.display().to_string(),
        class_name: f.class_name.clone(),
        method_name: f.method_name.clone(),
        source_signature: f.signature.clone(),
        content_hash: hash.clone(),
        generator_log: format!("{}/{hash}/workspace/generator.stdout", work_dir_name(work)),
        source_tests,
    };
    Ok((Some((problem, provenance)), report))
}

fn work_dir_name(work: &Path) -> String {
    work.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Full pipeline over `corpus`: extraction, generation, filtering,
/// conversion and the compile check. Writes the instances to `out` in the
/// dataset line format and provenance records to [`provenance_path`].
/// Generator output is cached under [`work_dir`], so an interrupted run
/// resumes where it stopped and a repeated run writes identical files.
pub fn run_augment(
    corpus: &Path,
    out: &Path,
    config: &AugmentConfig,
    detector: &dyn LanguageDetector,
    sandbox: &Sandbox,
) -> Result<AugmentReport> {
    config.validate()?;
    let extraction = extract_functions(corpus, &config.filters, detector)?;
    let mut report = AugmentReport {
        extract: extraction.stats,
        functions: extraction.functions.len(),
        ..AugmentReport::default()
    };
    let work = work_dir(out);
    for f in &extraction.functions {
        let dir = work.join(format!("{:016x}", content_hash(f)));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let limiter = RateLimit {
        next: Mutex::new(Instant::now()),
        interval: Duration::from_millis(config.generator.min_interval_ms),
    };
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<(Emitted, AugmentReport)>>>> =
        extraction.functions.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..config.workers.min(extraction.functions.len()).max(1) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(f) = extraction.functions.get(i) else { break };
                let r = process(f, config, sandbox, &work, &limiter);
                *slots[i].lock().expect("slot poisoned") = Some(r);
            });
        }
    });
    let mut problems = Vec::new();
    let mut provenance = String::new();
    for slot in slots {
        let (emitted, r) = slot.into_inner().expect("slot poisoned").expect("every slot is filled")?;
        report.absorb(&r);
        if let Some((p, prov)) = emitted {
            provenance.push_str(&serde_json::to_string(&prov)?);
            provenance.push('\n');
            problems.push(p);
        }
    }
    write_problems(out, &problems)?;
    let side = provenance_path(out);
    fs::write(&side, provenance).map_err(|e| Error::io(&side, e))?;
    log::info!(
        "augment: {} functions, {} emitted, {} generator failures, {} filtered",
        report.functions,
        report.emitted,
        report.generator_failures,
        report.suite_filtered
    );
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolvabilityConfig {
    pub n_samples: usize,
    pub decoding: DecodingParams,
    pub limits: ExecutionLimits,
    pub seed: u64,
}

impl Default for SolvabilityConfig {
    fn default() -> Self {
        SolvabilityConfig {
            n_samples: 100,
            decoding: DecodingParams::default(),
            limits: ExecutionLimits::default(),
            seed: 0,
        }
    }
}

/// Splits `instances` into those for which at least one of `n_samples`
/// nucleus samples passes every test, and the rest.
pub fn solvability_filter(
    instances: Vec<Problem>,
    policy: &mut dyn Policy,
    sandbox: &Sandbox,
    config: &SolvabilityConfig,
) -> Result<(Vec<Problem>, Vec<Problem>)> {
    if config.n_samples == 0 {
        return Err(Error::Config("solvability filter needs at least one sample".into()));
    }
    let base = derive_seed(config.seed, "solvability", 0);
    let (mut kept, mut rejected) = (Vec::new(), Vec::new());
    for p in instances {
        let seed = combine(base, fnv1a64(p.id.as_bytes()));
        let samples = policy.sample(&make_prompt(&p), config.n_samples, &config.decoding, seed)?;
        let jobs: Vec<(String, Vec<String>)> = samples
            .iter()
            .map(|s| (program_for_completion(&p, &s.text), p.tests.clone()))
            .collect();
        let mut solved = false;
        for outcome in sandbox.run_many(&jobs, &config.limits) {
            solved |= outcome?.all_passed();
        }
        if solved {
            kept.push(p);
        } else {
            rejected.push(p);
        }
    }
    Ok((kept, rejected))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn suite(tests: &[&str]) -> GeneratedSuite {
        GeneratedSuite {
            class_name: "C".into(),
            method_name: "f".into(),
            tests: tests.iter().map(|t| t.to_string()).collect(),
            unsupported: 0,
            diagnostics: String::new(),
        }
    }

    #[test]
    fn suite_filter() {
        let yes_no = [
            "assertEquals(\"Yes\", monkeyTrouble2(false, false));",
            "assertEquals(\"Yes\", monkeyTrouble2(true, true));",
            "assertEquals(\"No\", monkeyTrouble2(true, false));",
            "assertEquals(\"No\", monkeyTrouble2(false, true));",
        ];
        assert!(filter_suite(suite(&yes_no)).is_some());
        assert!(filter_suite(suite(&["assertFalse(f(1));", "assertFalse(f(2));", "assertEquals(false, f(3));"])).is_none());
        assert!(filter_suite(suite(&["assertEquals(1, f(1));"])).is_none());
        assert!(filter_suite(suite(&["assertTrue(f(1));", "assertFalse(f(2));"])).is_some());
    }

    #[test]
    fn signature_conversion() {
        assert_eq!(convert_signature("public static int max(int a, int b)").unwrap(), "def max(a, b):");
        assert_eq!(
            convert_signature("public static boolean monkeyTrouble2(boolean aSmile, boolean bSmile)").unwrap(),
            "def monkeyTrouble2(aSmile, bSmile):"
        );
        assert_eq!(convert_signature("static void f()").unwrap(), "def f():");
        let out = convert_signature("public static int max(int a, int b)").unwrap();
        assert!(convert_signature(&out).is_err());
    }

    #[test]
    fn sidecar_paths() {
        assert_eq!(provenance_path(Path::new("/x/aug.jsonl")), Path::new("/x/aug.jsonl.provenance.jsonl"));
        assert_eq!(work_dir(Path::new("aug.jsonl")), Path::new("aug.jsonl.work"));
    }
}
