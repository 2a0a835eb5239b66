//! Isolated execution of candidate solutions against unit tests.
//!
//! Execution goes through a small fork server written in the target language.
//! The server is started once per worker and never runs candidate code itself:
//! each compile check, parse dump and test runs in a freshly forked child with
//! `RLIMIT_AS`, `RLIMIT_CPU` and `RLIMIT_FSIZE=0` applied, its own session (so
//! a timeout kills the whole process group), stdin on `/dev/null` and an
//! output cap. The assembled test program additionally installs an audit hook
//! that rejects process spawning, socket creation, file writes and filesystem
//! mutation; a rejected operation surfaces as an `errored` test.
//!
//! Threat model: accidental damage and runaway resource use by generated
//! code. This is not a container boundary. Interpreters without audit hooks
//! run in a permissive mode that only has the resource limits, and the
//! sandbox logs a warning when it detects one.

mod program;

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};

pub use program::{assemble_program, EXIT_ERRORED, EXIT_FAILED, EXIT_PASSED};

const FORKSERVER: &str = include_str!("forkserver.py");

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecutionLimits {
    pub wall_time_secs: f64,
    pub memory_bytes: u64,
    pub output_bytes: u64,
}

impl Default for ExecutionLimits {
    fn default() -> Self {
        ExecutionLimits {
            wall_time_secs: 5.0,
            memory_bytes: 256 * 1024 * 1024,
            output_bytes: 64 * 1024,
        }
    }
}

impl ExecutionLimits {
    pub fn validate(&self) -> Result<()> {
        if !(self.wall_time_secs > 0.0 && self.wall_time_secs.is_finite()) {
            return Err(Error::Config("wall_time_secs must be positive".into()));
        }
        if self.memory_bytes == 0 || self.output_bytes == 0 {
            return Err(Error::Config("memory and output ceilings must be positive".into()));
        }
        Ok(())
    }

    fn to_json(self) -> Value {
        json!({
            "wall_time_secs": self.wall_time_secs,
            "memory_bytes": self.memory_bytes,
            "output_bytes": self.output_bytes,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestStatus {
    Passed,
    Failed,
    Errored,
    TimedOut,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    pub compiled: bool,
    pub per_test: Vec<TestStatus>,
    pub total_tests: usize,
    pub passed_tests: usize,
    pub diagnostics: String,
}

impl ExecutionOutcome {
    pub fn not_compiled(total_tests: usize, diagnostics: String) -> Self {
        ExecutionOutcome {
            compiled: false,
            per_test: Vec::new(),
            total_tests,
            passed_tests: 0,
            diagnostics,
        }
    }

    pub fn from_statuses(per_test: Vec<TestStatus>, diagnostics: String) -> Self {
        let passed_tests = per_test.iter().filter(|s| **s == TestStatus::Passed).count();
        ExecutionOutcome {
            compiled: true,
            total_tests: per_test.len(),
            passed_tests,
            per_test,
            diagnostics,
        }
    }

    /// Compiled and every test passed.
    pub fn all_passed(&self) -> bool {
        self.compiled && self.total_tests > 0 && self.passed_tests == self.total_tests
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompileCheck {
    pub ok: bool,
    pub diagnostics: String,
}

/// One top-level statement as reported by the interpreter's own parser.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedItem {
    /// `def`, `class`, `import` or `other`.
    pub kind: String,
    pub names: Vec<String>,
    pub refs: Vec<String>,
    /// The statement regenerated from its syntax tree.
    pub src: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SandboxConfig {
    /// Interpreter program and leading arguments.
    pub interpreter: Vec<String>,
    /// Environment variable names passed through to the interpreter.
    pub env_allow: Vec<String>,
    pub workers: usize,
    /// Memoize outcomes of identical (code, tests, limits) requests.
    pub cache: bool,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        SandboxConfig {
            interpreter: vec!["python3".into()],
            env_allow: Vec::new(),
            workers: 1,
            cache: true,
        }
    }
}

const CACHE_CAPACITY: usize = 200_000;

pub struct Sandbox {
    config: SandboxConfig,
    workers: Vec<Mutex<Option<Worker>>>,
    next: AtomicUsize,
    cache: Mutex<HashMap<String, ExecutionOutcome>>,
    permissive: bool,
    interpreter_version: String,
}

impl std::fmt::Debug for Sandbox {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Sandbox")
            .field("config", &self.config)
            .field("permissive", &self.permissive)
            .finish()
    }
}

impl Sandbox {
    /// Starts one worker eagerly so a missing interpreter is reported here.
    pub fn new(config: SandboxConfig) -> Result<Self> {
        if config.interpreter.is_empty() {
            return Err(Error::Config("interpreter command is empty".into()));
        }
        let workers = config.workers.max(1);
        let mut first = Worker::spawn(&config)?;
        let hello = first.request(&json!({"op": "hello"}))?;
        let interpreter_version = hello.get("python").and_then(Value::as_str).unwrap_or("?").to_string();
        let permissive = !audit_hooks_available(&mut first)?;
        if permissive {
            log::warn!(
                "SANDBOX PERMISSIVE MODE: interpreter {} has no audit hooks; only resource limits apply",
                interpreter_version
            );
        }
        let mut slots = Vec::with_capacity(workers);
        slots.push(Mutex::new(Some(first)));
        for _ in 1..workers {
            slots.push(Mutex::new(None));
        }
        Ok(Sandbox {
            config,
            workers: slots,
            next: AtomicUsize::new(0),
            cache: Mutex::new(HashMap::new()),
            permissive,
            interpreter_version,
        })
    }

    pub fn config(&self) -> &SandboxConfig {
        &self.config
    }

    pub fn is_permissive(&self) -> bool {
        self.permissive
    }

    pub fn interpreter_version(&self) -> &str {
        &self.interpreter_version
    }

    /// True iff the interpreter front end accepts `code`. Nothing is executed.
    pub fn check_compile(&self, code: &str) -> Result<CompileCheck> {
        self.check_compile_with(code, &ExecutionLimits::default())
    }

    fn check_compile_with(&self, code: &str, limits: &ExecutionLimits) -> Result<CompileCheck> {
        if code.trim().is_empty() {
            return Ok(CompileCheck {
                ok: false,
                diagnostics: "empty program".into(),
            });
        }
        let resp = self.call(&json!({"op": "compile", "code": code, "limits": limits.to_json()}))?;
        Ok(CompileCheck {
            ok: resp.get("ok").and_then(Value::as_bool).unwrap_or(false),
            diagnostics: resp.get("diag").and_then(Value::as_str).unwrap_or("").to_string(),
        })
    }

    /// Runs every test in its own process. Code that does not compile is
    /// never executed.
    pub fn run_tests(&self, code: &str, tests: &[String], limits: &ExecutionLimits) -> Result<ExecutionOutcome> {
        if tests.is_empty() {
            return Err(Error::Sandbox("run_tests needs at least one test".into()));
        }
        limits.validate()?;
        let key = if self.config.cache {
            let key = cache_key(code, tests, limits);
            if let Some(hit) = self.cache.lock().expect("cache poisoned").get(&key) {
                return Ok(hit.clone());
            }
            Some(key)
        } else {
            None
        };
        let outcome = self.execute(code, tests, limits)?;
        if let Some(key) = key {
            let mut cache = self.cache.lock().expect("cache poisoned");
            if cache.len() >= CACHE_CAPACITY {
                cache.clear();
            }
            cache.insert(key, outcome.clone());
        }
        Ok(outcome)
    }

    fn execute(&self, code: &str, tests: &[String], limits: &ExecutionLimits) -> Result<ExecutionOutcome> {
        let compile = self.check_compile_with(code, limits)?;
        if !compile.ok {
            return Ok(ExecutionOutcome::not_compiled(tests.len(), compile.diagnostics));
        }
        let programs: Vec<String> = tests.iter().map(|t| assemble_program(code, t)).collect();
        let resp = self.call(&json!({"op": "run", "programs": programs, "limits": limits.to_json()}))?;
        let results = resp
            .get("results")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Sandbox(format!("malformed run response: {resp}")))?;
        if results.len() != tests.len() {
            return Err(Error::Sandbox("run response has the wrong number of results".into()));
        }
        let mut per_test = Vec::with_capacity(results.len());
        let mut diagnostics = String::new();
        for (i, r) in results.iter().enumerate() {
            let status: TestStatus = serde_json::from_value(r.get("status").cloned().unwrap_or(Value::Null))
                .map_err(|_| Error::Sandbox(format!("unknown test status in {r}")))?;
            if status != TestStatus::Passed {
                let diag = r.get("diag").and_then(Value::as_str).unwrap_or("");
                if diagnostics.len() < 4096 {
                    diagnostics.push_str(&format!("test {i}: {status:?}: {diag}\n"));
                }
            }
            per_test.push(status);
        }
        Ok(ExecutionOutcome::from_statuses(per_test, diagnostics))
    }

    /// Fans a batch of independent requests out over the worker pool. Results
    /// come back in input order.
    pub fn run_many(&self, jobs: &[(String, Vec<String>)], limits: &ExecutionLimits) -> Vec<Result<ExecutionOutcome>> {
        let threads = self.workers.len().min(jobs.len());
        if threads <= 1 {
            return jobs.iter().map(|(c, t)| self.run_tests(c, t, limits)).collect();
        }
        let mut results: Vec<Option<Result<ExecutionOutcome>>> = (0..jobs.len()).map(|_| None).collect();
        let next = AtomicUsize::new(0);
        let collected = Mutex::new(&mut results);
        std::thread::scope(|scope| {
            for _ in 0..threads {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= jobs.len() {
                        break;
                    }
                    let r = self.run_tests(&jobs[i].0, &jobs[i].1, limits);
                    collected.lock().expect("results poisoned")[i] = Some(r);
                });
            }
        });
        results.into_iter().map(|r| r.expect("every job ran")).collect()
    }

    /// Parses `code` with the interpreter's own parser and returns its
    /// top-level statements, each regenerated from the syntax tree.
    pub fn parse_dump(&self, code: &str) -> Result<Vec<ParsedItem>> {
        let resp = self.call(&json!({"op": "parse", "code": code, "limits": ExecutionLimits::default().to_json()}))?;
        if !resp.get("ok").and_then(Value::as_bool).unwrap_or(false) {
            let diag = resp.get("diag").and_then(Value::as_str).unwrap_or("parse failed");
            return Err(Error::Canonicalize(diag.to_string()));
        }
        let items = resp.get("items").cloned().unwrap_or(Value::Array(vec![]));
        Ok(serde_json::from_value(items)?)
    }

    fn call(&self, request: &Value) -> Result<Value> {
        let n = self.workers.len();
        let start = self.next.fetch_add(1, Ordering::Relaxed);
        let slot = (0..n)
            .map(|i| &self.workers[(start + i) % n])
            .find_map(|m| m.try_lock().ok())
            .unwrap_or_else(|| self.workers[start % n].lock().expect("worker poisoned"));
        let mut slot = slot;
        for attempt in 0..2 {
            if slot.is_none() {
                *slot = Some(Worker::spawn(&self.config)?);
            }
            let worker = slot.as_mut().expect("worker present");
            match worker.request(request) {
                Ok(resp) => {
                    if let Some(err) = resp.get("error") {
                        return Err(Error::Sandbox(format!("fork server error: {err}")));
                    }
                    return Ok(resp);
                }
                Err(e) if attempt == 0 => {
                    log::warn!("sandbox worker failed ({e}); restarting it");
                    *slot = None;
                }
                Err(e) => return Err(e),
            }
        }
        unreachable!("loop returns on the second attempt")
    }
}

fn audit_hooks_available(worker: &mut Worker) -> Result<bool> {
    let resp = worker.request(&json!({
        "op": "run",
        "programs": ["import sys\nsys.exit(0 if hasattr(sys, 'addaudithook') else 3)\n"],
        "limits": ExecutionLimits::default().to_json(),
    }))?;
    Ok(resp["results"][0]["status"] == "passed")
}

fn cache_key(code: &str, tests: &[String], limits: &ExecutionLimits) -> String {
    let mut key = String::with_capacity(code.len() + tests.iter().map(|t| t.len() + 1).sum::<usize>() + 48);
    key.push_str(&format!(
        "{}|{}|{}\u{0}",
        limits.wall_time_secs, limits.memory_bytes, limits.output_bytes
    ));
    key.push_str(code);
    for t in tests {
        key.push('\u{0}');
        key.push_str(t);
    }
    key
}

static SCRATCH_COUNTER: AtomicUsize = AtomicUsize::new(0);

struct Worker {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
    scratch: PathBuf,
}

impl Worker {
    fn spawn(config: &SandboxConfig) -> Result<Self> {
        let scratch = std::env::temp_dir().join(format!(
            "utrl-sandbox-{}-{}",
            std::process::id(),
            SCRATCH_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        std::fs::create_dir_all(&scratch).map_err(|e| Error::Sandbox(format!("cannot create scratch dir: {e}")))?;
        let program = &config.interpreter[0];
        let mut cmd = Command::new(program);
        cmd.args(&config.interpreter[1..])
            .args(["-s", "-S", "-B", "-c", FORKSERVER])
            .env_clear()
            .env("PYTHONHASHSEED", "0")
            .current_dir(&scratch)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit());
        for name in &config.env_allow {
            if let Ok(v) = std::env::var(name) {
                cmd.env(name, v);
            }
        }
        let mut child = cmd.spawn().map_err(|e| Error::InterpreterMissing {
            program: program.clone(),
            message: e.to_string(),
        })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let mut worker = Worker {
            child,
            stdin,
            stdout,
            scratch,
        };
        worker
            .request(&json!({"op": "hello"}))
            .map_err(|e| Error::InterpreterMissing {
                program: program.clone(),
                message: format!("fork server did not start: {e}"),
            })?;
        Ok(worker)
    }

    fn request(&mut self, request: &Value) -> Result<Value> {
        let mut line = serde_json::to_string(request)?;
        line.push('\n');
        self.stdin
            .write_all(line.as_bytes())
            .and_then(|_| self.stdin.flush())
            .map_err(|e| Error::Sandbox(format!("write to fork server: {e}")))?;
        let mut reply = String::new();
        let n = self
            .stdout
            .read_line(&mut reply)
            .map_err(|e| Error::Sandbox(format!("read from fork server: {e}")))?;
        if n == 0 {
            return Err(Error::Sandbox("fork server exited".into()));
        }
        Ok(serde_json::from_str(&reply)?)
    }
}

impl Drop for Worker {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
        let _ = std::fs::remove_dir_all(&self.scratch);
    }
}
