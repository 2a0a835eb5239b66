//! Driving an external unit-test generator through a command template.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::java::{self, ParsedTests};
use super::SourceFunction;
use crate::error::{Error, Result};

/// Directory, relative to the workspace, that generated test files are
/// read from. Standard output is parsed when it holds no `.java` file.
pub const TESTS_DIR: &str = "evosuite-tests";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Program and arguments. `{workspace}`, `{class}`, `{method}` and
    /// `{budget}` are substituted in every element.
    pub command: Vec<String>,
    /// Search budget handed to the generator, in seconds.
    pub budget_secs: u64,
    /// Wall-clock limit on one invocation.
    pub timeout_secs: f64,
    /// Optional source-language compile check run in the workspace before
    /// generation, with the same placeholders.
    pub compile_command: Option<Vec<String>>,
    /// Minimum spacing between invocation starts, across all workers.
    pub min_interval_ms: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            command: Vec::new(),
            budget_secs: 60,
            timeout_secs: 300.0,
            compile_command: None,
            min_interval_ms: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.command.is_empty() {
            return Err(Error::Config("generator command is empty".into()));
        }
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(Error::Config(format!("generator timeout {} must be positive", self.timeout_secs)));
        }
        if self.compile_command.as_ref().is_some_and(Vec::is_empty) {
            return Err(Error::Config("compile command is empty".into()));
        }
        Ok(())
    }
}

/// Assertions produced for one source function.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedSuite {
    pub class_name: String,
    pub method_name: String,
    /// Source-language assertion statements.
    pub tests: Vec<String>,
    /// Assertions the generator emitted outside the supported fragment.
    pub unsupported: usize,
    pub diagnostics: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
pub enum GenerationFailure {
    #[error("generator could not be started: {0}")]
    Spawn(String),
    #[error("source does not compile: {0}")]
    Compile(String),
    #[error("generator timed out after {0} s")]
    Timeout(u64),
    #[error("generator exited with {code:?}: {stderr}")]
    Exit { code: Option<i32>, stderr: String },
    #[error("generator output unreadable: {0}")]
    Output(String),
    #[error("generator emitted no supported assertion ({unsupported} unsupported)")]
    Empty { unsupported: usize },
}

fn substitute(arg: &str, workspace: &Path, f: &SourceFunction, budget: u64) -> String {
    arg.replace("{workspace}", &workspace.display().to_string())
        .replace("{class}", &f.class_name)
        .replace("{method}", &f.method_name)
        .replace("{budget}", &budget.to_string())
}

/// Source file placed in the workspace: the function alone in its class.
pub fn workspace_source(f: &SourceFunction) -> String {
    format!("public class {} {{\n    {} {}\n}}\n", f.class_name, f.signature, f.code)
}

struct Finished {
    stdout: String,
    stderr: String,
    success: bool,
    code: Option<i32>,
}

fn run(argv: &[String], dir: &Path, tag: &str, timeout: Duration) -> std::result::Result<Finished, GenerationFailure> {
    let out_path = dir.join(format!("{tag}.stdout"));
    let err_path = dir.join(format!("{tag}.stderr"));
    let open = |p: &Path| fs::File::create(p).map_err(|e| GenerationFailure::Spawn(format!("{}: {e}", p.display())));
    let mut cmd = Command::new(&argv[0]);
    cmd.args(&argv[1..])
        .current_dir(dir)
        .stdin(Stdio::null())
        .stdout(open(&out_path)?)
        .stderr(open(&err_path)?);
    #[cfg(unix)]
    std::os::unix::process::CommandExt::process_group(&mut cmd, 0);
    let mut child = cmd.spawn().map_err(|e| GenerationFailure::Spawn(format!("{}: {e}", argv[0])))?;
    let deadline = Instant::now() + timeout;
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break status,
            Ok(None) if Instant::now() >= deadline => {
                // The generator leads its own process group; take its
                // children down with it.
                #[cfg(unix)]
                if let Ok(pgid) = libc::pid_t::try_from(child.id()) {
                    unsafe { libc::kill(-pgid, libc::SIGKILL) };
                }
                let _ = child.kill();
                let _ = child.wait();
                return Err(GenerationFailure::Timeout(timeout.as_secs()));
            }
            Ok(None) => std::thread::sleep(Duration::from_millis(10)),
            Err(e) => return Err(GenerationFailure::Spawn(e.to_string())),
        }
    };
    let read = |p: &Path| fs::read(p).map(|b| String::from_utf8_lossy(&b).into_owned()).unwrap_or_default();
    Ok(Finished {
        stdout: read(&out_path),
        stderr: read(&err_path),
        success: status.success(),
        code: status.code(),
    })
}

fn tail(s: &str, max: usize) -> String {
    let s = s.trim();
    match s.char_indices().rev().nth(max) {
        Some((i, _)) => format!("...{}", &s[i..]),
        None => s.to_string(),
    }
}

fn java_files(root: &Path) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = walkdir::WalkDir::new(root)
        .sort_by_file_name()
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file() && e.path().extension().is_some_and(|x| x == "java"))
        .map(|e| e.into_path())
        .collect();
    files.sort();
    files
}

/// Runs the generator for `f` in `workspace`, which is emptied first, and
/// parses the assertions it emits. Everything the generator prints is kept
/// in `workspace/generator.stdout` and `generator.stderr`.
pub fn generate_tests(
    f: &SourceFunction,
    config: &GeneratorConfig,
    workspace: &Path,
) -> std::result::Result<GeneratedSuite, GenerationFailure> {
    let setup = |e: std::io::Error| GenerationFailure::Spawn(format!("{}: {e}", workspace.display()));
    if workspace.exists() {
        fs::remove_dir_all(workspace).map_err(setup)?;
    }
    fs::create_dir_all(workspace).map_err(setup)?;
    let workspace = &workspace.canonicalize().map_err(setup)?;
    fs::write(workspace.join(format!("{}.java", f.class_name)), workspace_source(f)).map_err(setup)?;
    let timeout = Duration::from_secs_f64(config.timeout_secs);
    let argv = |t: &[String]| -> Vec<String> { t.iter().map(|a| substitute(a, workspace, f, config.budget_secs)).collect() };
    if let Some(compile) = &config.compile_command {
        let done = run(&argv(compile), workspace, "compile", timeout)?;
        if !done.success {
            return Err(GenerationFailure::Compile(tail(&done.stderr, 400)));
        }
    }
    let done = run(&argv(&config.command), workspace, "generator", timeout)?;
    if !done.success {
        return Err(GenerationFailure::Exit {
            code: done.code,
            stderr: tail(&done.stderr, 400),
        });
    }
    let mut parsed = ParsedTests::default();
    let files = java_files(&workspace.join(TESTS_DIR));
    let mut sources = Vec::new();
    for path in &files {
        sources.push(fs::read_to_string(path).map_err(|e| GenerationFailure::Output(format!("{}: {e}", path.display())))?);
    }
    if files.is_empty() {
        sources.push(done.stdout);
    }
    for src in &sources {
        let p = java::parse_generated_tests(src, &f.class_name).map_err(|e| GenerationFailure::Output(e.to_string()))?;
        parsed.assertions.extend(p.assertions);
        parsed.dropped += p.dropped;
    }
    if parsed.assertions.is_empty() {
        return Err(GenerationFailure::Empty {
            unsupported: parsed.dropped,
        });
    }
    Ok(GeneratedSuite {
        class_name: f.class_name.clone(),
        method_name: f.method_name.clone(),
        tests: parsed.assertions,
        unsupported: parsed.dropped,
        diagnostics: format!("{} test file(s); {}", files.len(), tail(&done.stderr, 400)),
    })
}

/// Deterministic stand-in for a real generator: copies a canned test file
/// `<fixtures>/<class>.<method>.java` into the workspace. A missing fixture
/// is reported as a failure, like a generator crash.
pub fn mock_generate(fixtures: &Path, workspace: &Path, class: &str, method: &str) -> Result<PathBuf> {
    let src = fixtures.join(format!("{class}.{method}.java"));
    let text = fs::read_to_string(&src).map_err(|e| Error::io(&src, e))?;
    let dir = workspace.join(TESTS_DIR);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let dst = dir.join(format!("{class}_ESTest.java"));
    fs::write(&dst, text).map_err(|e| Error::io(&dst, e))?;
    Ok(dst)
}
