//! Canonicalization over a fixture corpus. Each fixture opens with
//! `# entry:`, `# test:` and `# dead:` comment lines.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use utrl_core::canon::{canonicalize, Frontend};
use utrl_core::sandbox::{ExecutionLimits, Sandbox, SandboxConfig};

struct Fixture {
    name: String,
    code: String,
    entry: String,
    tests: Vec<String>,
    dead: Vec<String>,
}

fn fixtures() -> Vec<Fixture> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/canon");
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir).unwrap().map(|e| e.unwrap().path()).collect();
    paths.sort();
    paths
        .into_iter()
        .map(|path| {
            let code = fs::read_to_string(&path).unwrap();
            let field = |key: &str| -> Vec<String> {
                code.lines().filter_map(|l| l.strip_prefix(key)).map(|v| v.trim().to_string()).collect()
            };
            Fixture {
                name: path.file_name().unwrap().to_string_lossy().into_owned(),
                entry: field("# entry:").remove(0),
                tests: field("# test:"),
                dead: field("# dead:"),
                code,
            }
        })
        .collect()
}

/// Per program, whether the interpreter's own tokenizer finds a comment.
fn has_comment(programs: &[String]) -> Vec<bool> {
    let script = "import io, json, sys, tokenize\n\
                  out = []\n\
                  for src in json.load(sys.stdin):\n    \
                      toks = tokenize.generate_tokens(io.StringIO(src).readline)\n    \
                      out.append(any(t.type == tokenize.COMMENT for t in toks))\n\
                  print(json.dumps(out))\n";
    let mut child = Command::new("python3")
        .args(["-c", script])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(serde_json::to_string(programs).unwrap().as_bytes()).unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    serde_json::from_slice(&out.stdout).unwrap()
}

fn defines(code: &str, name: &str) -> bool {
    code.lines().any(|l| {
        let l = l.trim_start();
        [format!("def {name}("), format!("class {name}:"), format!("class {name}("), format!("{name} =")]
            .iter()
            .any(|p| l.starts_with(p.as_str()))
    })
}

fn check_frontend(frontend: Frontend<'_>, sb: &Sandbox) {
    let corpus = fixtures();
    assert_eq!(corpus.len(), 50);
    let limits = ExecutionLimits::default();
    let mut canon = Vec::new();
    for f in &corpus {
        let c = canonicalize(&f.code, &f.entry, frontend).unwrap_or_else(|e| panic!("{}: {e}", f.name));
        let again = canonicalize(&c, &f.entry, frontend).unwrap();
        assert_eq!(again, c, "{}: not idempotent under {}", f.name, frontend.name());
        assert!(defines(&c, &f.entry), "{}: entry missing", f.name);
        for d in &f.dead {
            assert!(defines(&f.code, d), "{}: fixture lacks {d}", f.name);
            assert!(!defines(&c, d), "{}: unreachable {d} kept", f.name);
        }
        let before = sb.run_tests(&f.code, &f.tests, &limits).unwrap();
        let after = sb.run_tests(&c, &f.tests, &limits).unwrap();
        assert!(before.compiled, "{}", f.name);
        assert_eq!(before.per_test, after.per_test, "{}: outcomes changed", f.name);
        canon.push(c);
    }
    let originals: Vec<String> = corpus.iter().map(|f| f.code.clone()).collect();
    assert!(has_comment(&originals).iter().all(|&c| c));
    for (f, commented) in corpus.iter().zip(has_comment(&canon)) {
        assert!(!commented, "{}: comment survived under {}", f.name, frontend.name());
    }
}

#[test]
fn interpreter_frontend_canonicalizes_fixtures() {
    let sb = Sandbox::new(SandboxConfig::default()).unwrap();
    check_frontend(Frontend::Interpreter(&sb), &sb);
}

#[test]
fn builtin_frontend_canonicalizes_fixtures() {
    let sb = Sandbox::new(SandboxConfig::default()).unwrap();
    check_frontend(Frontend::Builtin, &sb);
}

#[test]
fn fixtures_exercise_passing_failing_and_erroring_tests() {
    let sb = Sandbox::new(SandboxConfig::default()).unwrap();
    let mut statuses = std::collections::BTreeSet::new();
    for f in fixtures() {
        let outcome = sb.run_tests(&f.code, &f.tests, &ExecutionLimits::default()).unwrap();
        statuses.extend(outcome.per_test.iter().map(|s| format!("{s:?}")));
    }
    assert!(statuses.len() >= 3, "{statuses:?}");
}
