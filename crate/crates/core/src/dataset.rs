//! Problem datasets: loading, validation, splitting and prompt composition.
//!
//! Datasets are line-delimited JSON, one problem per line:
//!
//! ```text
//! {"id": "fib", "description": "...", "signature": "def fib(n):",
//!  "tests": ["assert fib(0) == 0"], "solutions": ["def fib(n): ..."],
//!  "source": "curated", "loss_weight": 1.0}
//! ```
//!
//! MBPP's own field names (`task_id`, `text`/`prompt`, `code`, `test_list`)
//! are accepted by [`load_mbpp`], which also applies the official id ranges to
//! split the records.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ProblemSource {
    #[default]
    Curated,
    Augmented,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub description: String,
    /// Target-language function header, e.g. `def fib(n):`.
    pub signature: String,
    /// Raw assertion statements.
    pub tests: Vec<String>,
    #[serde(rename = "solutions", default)]
    pub seed_solutions: Vec<String>,
    #[serde(default)]
    pub source: ProblemSource,
    #[serde(default = "default_loss_weight")]
    pub loss_weight: f64,
}

fn default_loss_weight() -> f64 {
    1.0
}

impl Problem {
    /// Name of the function declared by the signature.
    pub fn entry_name(&self) -> Result<&str> {
        function_name(&self.signature)
            .ok_or_else(|| Error::Dataset(format!("problem {}: signature has no function name", self.id)))
    }

    /// Checks the structural invariants that do not need an interpreter.
    pub fn validate(&self) -> Result<()> {
        let name = self.entry_name()?;
        if self.tests.is_empty() {
            return Err(Error::Dataset(format!("problem {}: no unit tests", self.id)));
        }
        for test in &self.tests {
            if !references_call(test, name) {
                return Err(Error::Dataset(format!(
                    "problem {}: test `{}` does not call `{}`",
                    self.id, test, name
                )));
            }
        }
        if !(self.loss_weight > 0.0 && self.loss_weight <= 1.0) {
            return Err(Error::Dataset(format!(
                "problem {}: loss_weight {} outside (0, 1]",
                self.id, self.loss_weight
            )));
        }
        if self.source == ProblemSource::Curated && self.loss_weight != 1.0 {
            return Err(Error::Dataset(format!(
                "problem {}: curated problems carry loss_weight 1.0",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<Problem>,
    pub validation: Vec<Problem>,
    pub test: Vec<Problem>,
}

impl DatasetSplit {
    pub fn new(train: Vec<Problem>, validation: Vec<Problem>, test: Vec<Problem>) -> Result<Self> {
        let split = DatasetSplit {
            train,
            validation,
            test,
        };
        let mut seen = BTreeSet::new();
        for p in split.train.iter().chain(&split.validation).chain(&split.test) {
            if !seen.insert(p.id.as_str()) {
                return Err(Error::Dataset(format!("duplicate problem id `{}` across splits", p.id)));
            }
        }
        Ok(split)
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.validation.len(), self.test.len())
    }
}

/// Official MBPP id ranges: few-shot (1-10) and test (11-510) form the test
/// set, 511-600 is validation and 601-974 is train.
pub fn mbpp_split_of(task_id: i64) -> Option<MbppSplit> {
    match task_id {
        1..=510 => Some(MbppSplit::Test),
        511..=600 => Some(MbppSplit::Validation),
        601..=974 => Some(MbppSplit::Train),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MbppSplit {
    Train,
    Validation,
    Test,
}

pub const MBPP_OFFICIAL_RECORDS: usize = 964;

pub fn load_mbpp(path: &Path) -> Result<DatasetSplit> {
    let records = read_json_lines(path)?;
    if records.is_empty() {
        return Err(Error::Dataset(format!("{}: no records", path.display())));
    }
    if records.len() != MBPP_OFFICIAL_RECORDS {
        log::warn!(
            "{}: {} records (official file has {}); splitting by id range anyway",
            path.display(),
            records.len(),
            MBPP_OFFICIAL_RECORDS
        );
    }
    let mut train = Vec::new();
    let mut validation = Vec::new();
    let mut test = Vec::new();
    for (index, record) in records.iter().enumerate() {
        let task_id = record
            .get("task_id")
            .and_then(Value::as_i64)
            .ok_or_else(|| missing(index, "task_id"))?;
        let description = str_field(record, index, &["text", "prompt"])?;
        let code = str_field(record, index, &["code"])?;
        let tests = string_list(record, index, "test_list")?;
        let signature = signature_from_code(&code, &tests).ok_or_else(|| Error::Record {
            index,
            message: "cannot locate the tested function's header in `code`".into(),
        })?;
        let problem = Problem {
            id: task_id.to_string(),
            description,
            signature,
            tests,
            seed_solutions: vec![code],
            source: ProblemSource::Curated,
            loss_weight: 1.0,
        };
        match mbpp_split_of(task_id) {
            Some(MbppSplit::Train) => train.push(problem),
            Some(MbppSplit::Validation) => validation.push(problem),
            Some(MbppSplit::Test) => test.push(problem),
            None => {
                return Err(Error::Record {
                    index,
                    message: format!("task_id {task_id} outside the official id ranges"),
                })
            }
        }
    }
    DatasetSplit::new(train, validation, test)
}

/// Loads the output of the augmentation pipeline. Seed solutions are never
/// carried over: augmented problems start with an empty replay buffer.
pub fn load_augmented(path: &Path) -> Result<Vec<Problem>> {
    let records = read_json_lines(path)?;
    let mut out = Vec::with_capacity(records.len());
    for (index, record) in records.iter().enumerate() {
        let description = str_field(record, index, &["description"])?;
        let signature = str_field(record, index, &["signature"])?;
        let tests = string_list(record, index, "tests")?;
        if tests.is_empty() {
            return Err(Error::Record {
                index,
                message: "empty `tests` list".into(),
            });
        }
        let id = match record.get("id") {
            Some(v) => id_string(v).ok_or_else(|| missing(index, "id"))?,
            None => format!("aug-{index}"),
        };
        let loss_weight = match record.get("loss_weight") {
            Some(v) => v.as_f64().ok_or_else(|| Error::Record {
                index,
                message: "`loss_weight` is not a number".into(),
            })?,
            None => 1.0,
        };
        let problem = Problem {
            id,
            description,
            signature,
            tests,
            seed_solutions: Vec::new(),
            source: ProblemSource::Augmented,
            loss_weight,
        };
        problem.validate().map_err(|e| Error::Record {
            index,
            message: e.to_string(),
        })?;
        out.push(problem);
    }
    Ok(out)
}

/// Loads problems in the native line format.
pub fn load_problems(path: &Path) -> Result<Vec<Problem>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_problems(&text)
}

pub fn parse_problems(text: &str) -> Result<Vec<Problem>> {
    let mut out = Vec::new();
    for (index, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let mut value: Value = serde_json::from_str(line).map_err(|e| Error::Record {
            index,
            message: e.to_string(),
        })?;
        for field in ["description", "signature", "tests"] {
            if value.get(field).is_none() {
                return Err(missing(index, field));
            }
        }
        match value.get("id").map(id_string) {
            Some(Some(id)) => value["id"] = Value::String(id),
            Some(None) => return Err(missing(index, "id")),
            None => value["id"] = Value::String(format!("problem-{index}")),
        }
        let problem: Problem = serde_json::from_value(value).map_err(|e| Error::Record {
            index,
            message: e.to_string(),
        })?;
        problem.validate().map_err(|e| Error::Record {
            index,
            message: e.to_string(),
        })?;
        out.push(problem);
    }
    Ok(out)
}

pub fn serialize_problems(problems: &[Problem]) -> Result<String> {
    let mut out = String::new();
    for p in problems {
        out.push_str(&serde_json::to_string(p)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_problems(path: &Path, problems: &[Problem]) -> Result<()> {
    fs::write(path, serialize_problems(problems)?).map_err(|e| Error::io(path, e))
}

/// Strips trailing whitespace from every line and ends the text with exactly
/// one newline (empty input stays empty).
pub fn normalize_text(text: &str) -> String {
    let mut lines: Vec<&str> = text.lines().map(str::trim_end).collect();
    while lines.last().is_some_and(|l| l.is_empty()) {
        lines.pop();
    }
    if lines.is_empty() {
        return String::new();
    }
    let mut out = lines.join("\n");
    out.push('\n');
    out
}

/// Prompt = description, newline, signature, newline. Generation starts at
/// the function body.
pub fn make_prompt(problem: &Problem) -> String {
    let description = normalize_text(&problem.description);
    let signature = problem.signature.trim_end();
    let mut prompt = String::with_capacity(description.len() + signature.len() + 1);
    prompt.push_str(&description);
    prompt.push_str(signature);
    prompt.push('\n');
    prompt
}

/// Program executed for a generated completion: the signature line followed
/// by the completion text.
pub fn program_for_completion(problem: &Problem, completion: &str) -> String {
    let mut program = String::with_capacity(problem.signature.len() + completion.len() + 1);
    program.push_str(problem.signature.trim_end());
    program.push('\n');
    program.push_str(completion);
    program
}

/// Extracts `name` from `def name(...)`.
pub fn function_name(signature: &str) -> Option<&str> {
    let rest = signature.trim_start();
    let rest = rest.strip_prefix("async ").map(str::trim_start).unwrap_or(rest);
    let rest = rest.strip_prefix("def")?;
    if !rest.starts_with(char::is_whitespace) {
        return None;
    }
    let rest = rest.trim_start();
    let end = rest.find(|c: char| !(c.is_alphanumeric() || c == '_'))?;
    let name = &rest[..end];
    if name.is_empty() || name.starts_with(|c: char| c.is_ascii_digit()) || !rest[end..].trim_start().starts_with('(') {
        return None;
    }
    Some(name)
}

/// True if `text` contains a call `name(` not preceded by an identifier
/// character or a dot.
pub fn references_call(text: &str, name: &str) -> bool {
    let bytes = text.as_bytes();
    let mut start = 0;
    while let Some(pos) = text[start..].find(name) {
        let at = start + pos;
        let before_ok = at == 0 || {
            let c = bytes[at - 1] as char;
            !(c.is_alphanumeric() || c == '_' || c == '.')
        };
        let after = text[at + name.len()..].trim_start();
        if before_ok && after.starts_with('(') {
            return true;
        }
        start = at + name.len();
    }
    false
}

/// Locates the header of the function the tests call inside `code`.
fn signature_from_code(code: &str, tests: &[String]) -> Option<String> {
    let headers: Vec<(String, &str)> = code
        .lines()
        .filter(|l| l.starts_with("def ") || l.starts_with("async def "))
        .filter_map(|l| function_name(l).map(|n| (n.to_string(), l)))
        .collect();
    let chosen = headers
        .iter()
        .rev()
        .find(|(name, _)| tests.iter().any(|t| references_call(t, name)))
        .or_else(|| headers.last())?;
    let start = code.find(chosen.1)?;
    Some(header_text(&code[start..]).trim_end().to_string())
}

/// The header runs up to the `:` closing it at bracket depth zero.
fn header_text(code: &str) -> &str {
    let mut depth = 0i32;
    for (i, c) in code.char_indices() {
        match c {
            '(' | '[' | '{' => depth += 1,
            ')' | ']' | '}' => depth -= 1,
            ':' if depth == 0 => return &code[..=i],
            _ => {}
        }
    }
    code.lines().next().unwrap_or("")
}

fn read_json_lines(path: &Path) -> Result<Vec<Value>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(index, line)| {
            serde_json::from_str(line).map_err(|e| Error::Record {
                index,
                message: format!("invalid JSON: {e}"),
            })
        })
        .collect()
}

fn missing(index: usize, field: &str) -> Error {
    Error::Record {
        index,
        message: format!("missing field `{field}`"),
    }
}

fn str_field(record: &Value, index: usize, names: &[&str]) -> Result<String> {
    names
        .iter()
        .find_map(|n| record.get(*n).and_then(Value::as_str))
        .map(str::to_string)
        .ok_or_else(|| missing(index, names[0]))
}

fn string_list(record: &Value, index: usize, name: &str) -> Result<Vec<String>> {
    let list = record.get(name).and_then(Value::as_array).ok_or_else(|| missing(index, name))?;
    list.iter()
        .map(|v| {
            v.as_str().map(str::to_string).ok_or_else(|| Error::Record {
                index,
                message: format!("`{name}` must contain strings"),
            })
        })
        .collect()
}

fn id_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn fib() -> Problem {
        Problem {
            id: "fib".into(),
            description: "Write a function that calculates the n-th Fibonacci number.".into(),
            signature: "def fib(n):".into(),
            tests: vec!["assert fib(0)==0".into(), "assert fib(12)==144".into(), "assert fib(8)==21".into()],
            seed_solutions: vec![],
            source: ProblemSource::Curated,
            loss_weight: 1.0,
        }
    }

    fn temp_file(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn prompt_for_fibonacci() {
        assert_eq!(
            make_prompt(&fib()),
            "Write a function that calculates the n-th Fibonacci number.\ndef fib(n):\n"
        );
    }

    #[test]
    fn prompt_with_empty_description_is_signature_only() {
        let mut p = fib();
        p.description = "  \n".into();
        assert_eq!(make_prompt(&p), "def fib(n):\n");
    }

    #[test]
    fn prompt_normalizes_trailing_whitespace() {
        let mut p = fib();
        p.description = "Compute fib.   \nCarefully.\t\n\n".into();
        assert_eq!(make_prompt(&p), "Compute fib.\nCarefully.\ndef fib(n):\n");
        let once = normalize_text(&p.description);
        assert_eq!(normalize_text(&once), once);
    }

    #[test]
    fn function_names() {
        assert_eq!(function_name("def fib(n):"), Some("fib"));
        assert_eq!(function_name("async def go (x):"), Some("go"));
        assert_eq!(function_name("define(x)"), None);
        assert_eq!(function_name("def (x):"), None);
    }

    #[test]
    fn test_must_call_entry() {
        let mut p = fib();
        p.tests.push("assert notfib(3) == 2".into());
        assert!(p.validate().is_err());
    }

    #[test]
    fn mbpp_single_train_record() {
        let f = temp_file(
            r#"{"task_id": 601, "text": "Find the longest chain.", "code": "def max_chain(pairs, n):\n    return n\n", "test_list": ["assert max_chain([], 3) == 3"]}"#,
        );
        let split = load_mbpp(f.path()).unwrap();
        assert_eq!(split.sizes(), (1, 0, 0));
        assert_eq!(split.train[0].signature, "def max_chain(pairs, n):");
        assert_eq!(split.train[0].seed_solutions.len(), 1);
    }

    #[test]
    fn mbpp_empty_file() {
        let f = temp_file("");
        let err = load_mbpp(f.path()).unwrap_err().to_string();
        assert!(err.contains("no records"), "{err}");
    }

    #[test]
    fn mbpp_malformed_record_names_index_and_field() {
        let f = temp_file(
            "{\"task_id\": 601, \"text\": \"a\", \"code\": \"def f(x):\\n  return x\", \"test_list\": [\"assert f(1) == 1\"]}\n{\"task_id\": 602, \"text\": \"b\", \"test_list\": []}\n",
        );
        let err = load_mbpp(f.path()).unwrap_err().to_string();
        assert!(err.contains("record 1") && err.contains("code"), "{err}");
    }

    #[test]
    fn mbpp_id_ranges() {
        assert_eq!(mbpp_split_of(1), Some(MbppSplit::Test));
        assert_eq!(mbpp_split_of(510), Some(MbppSplit::Test));
        assert_eq!(mbpp_split_of(511), Some(MbppSplit::Validation));
        assert_eq!(mbpp_split_of(600), Some(MbppSplit::Validation));
        assert_eq!(mbpp_split_of(601), Some(MbppSplit::Train));
        assert_eq!(mbpp_split_of(974), Some(MbppSplit::Train));
        assert_eq!(mbpp_split_of(975), None);
    }

    #[test]
    fn augmented_monkey_trouble() {
        let f = temp_file(
            r#"{"description": "A method that return Yes only if both monkeys are smiling or not smiling", "signature": "def monkeyTrouble2(aSmile, bSmile):", "tests": ["assert monkeyTrouble2(False, False) == \"Yes\"", "assert monkeyTrouble2(True, True) == \"Yes\"", "assert monkeyTrouble2(True, False) == \"No\"", "assert monkeyTrouble2(False, True) == \"No\""], "loss_weight": 0.2}"#,
        );
        let problems = load_augmented(f.path()).unwrap();
        assert_eq!(problems.len(), 1);
        let p = &problems[0];
        assert_eq!(p.tests.len(), 4);
        assert_eq!(p.tests[0], "assert monkeyTrouble2(False, False) == \"Yes\"");
        assert_eq!(p.source, ProblemSource::Augmented);
        assert!(p.seed_solutions.is_empty());
        assert_eq!(p.loss_weight, 0.2);
    }

    #[test]
    fn augmented_missing_signature() {
        let f = temp_file(r#"{"description": "x", "tests": ["assert f(1) == 1"]}"#);
        let err = load_augmented(f.path()).unwrap_err().to_string();
        assert!(err.contains("signature"), "{err}");
    }

    #[test]
    fn augmented_empty_tests_rejected() {
        let f = temp_file(r#"{"description": "x", "signature": "def f(a):", "tests": []}"#);
        assert!(load_augmented(f.path()).is_err());
    }

    #[test]
    fn duplicate_ids_across_splits() {
        assert!(DatasetSplit::new(vec![fib()], vec![fib()], vec![]).is_err());
    }

    #[test]
    fn native_round_trip() {
        let mut p = fib();
        p.seed_solutions = vec!["def fib(n):\n    return n\n".into()];
        let text = serialize_problems(&[p.clone()]).unwrap();
        let loaded = parse_problems(&text).unwrap();
        assert_eq!(loaded, vec![p]);
        assert_eq!(serialize_problems(&loaded).unwrap(), text);
    }
}
