//! Solution canonicalization for replay-buffer deduplication.
//!
//! A solution is split into top-level statements, each regenerated from its
//! syntax tree (dropping comments and normalizing layout). Statements are
//! then reduced:
//!
//! * the entry function (the last `def` with the entry name) is kept;
//! * definitions not reachable from it by name are dropped, wherever they are;
//! * other statements before the entry are kept only when they bind a name
//!   the kept code references;
//! * other statements after the entry are dropped.
//!
//! The syntax tree comes from the sandbox interpreter when one is available
//! and from a built-in tokenizer otherwise.

mod lexer;

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::sandbox::{ParsedItem, Sandbox};

#[derive(Clone, Copy)]
pub enum Frontend<'a> {
    /// Parse with the sandbox interpreter's own grammar.
    Interpreter(&'a Sandbox),
    /// Built-in tokenizer covering plain function-level code.
    Builtin,
}

impl Frontend<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Frontend::Interpreter(_) => "interpreter",
            Frontend::Builtin => "builtin",
        }
    }

    pub fn parse(&self, code: &str) -> Result<Vec<ParsedItem>> {
        match self {
            Frontend::Interpreter(sb) => sb.parse_dump(code),
            Frontend::Builtin => lexer::parse_items(code),
        }
    }
}

/// Indices of the statements that survive reduction, in source order.
pub fn reachable_items(items: &[ParsedItem], entry_function: &str) -> Result<Vec<usize>> {
    let entry = items
        .iter()
        .rposition(|it| it.kind == "def" && it.names.iter().any(|n| n == entry_function))
        .ok_or_else(|| Error::Canonicalize(format!("no function named `{entry_function}`")))?;

    let binders = |name: &str| -> Vec<usize> {
        items
            .iter()
            .enumerate()
            .filter(|(i, it)| {
                *i != entry
                    && it.names.iter().any(|n| n == name)
                    && (*i < entry || it.kind == "def" || it.kind == "class")
            })
            .map(|(i, _)| i)
            .collect()
    };

    let mut keep = BTreeSet::from([entry]);
    let mut seen = BTreeSet::new();
    let mut pending: Vec<String> = items[entry].refs.clone();
    while let Some(name) = pending.pop() {
        if name == entry_function || !seen.insert(name.clone()) {
            continue;
        }
        for i in binders(&name) {
            if keep.insert(i) {
                pending.extend(items[i].refs.iter().cloned());
            }
        }
    }
    Ok(keep.into_iter().collect())
}

/// Canonical text of `code`: surviving statements regenerated and joined by
/// newlines, with a trailing newline.
pub fn canonicalize(code: &str, entry_function: &str, frontend: Frontend<'_>) -> Result<String> {
    let items = frontend.parse(code)?;
    let keep = reachable_items(&items, entry_function)?;
    let mut out = String::new();
    for i in keep {
        out.push_str(&items[i].src);
        out.push('\n');
    }
    Ok(out)
}

/// Splits a canonical solution into the body that follows `signature`,
/// suitable as a policy completion. `None` when statements precede the entry
/// function or its header differs from `signature` beyond whitespace.
pub fn completion_for(signature: &str, canonical: &str) -> Option<String> {
    let (header, rest) = canonical.split_once('\n')?;
    let squash = |s: &str| s.chars().filter(|c| !c.is_whitespace()).collect::<String>();
    if squash(header) != squash(signature) {
        return None;
    }
    Some(rest.trim_end_matches('\n').to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(kind: &str, names: &[&str], refs: &[&str], src: &str) -> ParsedItem {
        ParsedItem {
            kind: kind.into(),
            names: names.iter().map(|s| s.to_string()).collect(),
            refs: refs.iter().map(|s| s.to_string()).collect(),
            src: src.into(),
        }
    }

    #[test]
    fn reachability_rules() {
        let items = vec![
            item("import", &["math"], &[], "import math"),
            item("import", &["os"], &[], "import os"),
            item("def", &["helper"], &["math"], "def helper(): ..."),
            item("def", &["unused"], &[], "def unused(): ..."),
            item("def", &["f"], &["helper", "late"], "def f(): ..."),
            item("def", &["late"], &[], "def late(): ..."),
            item("other", &[], &["print", "f"], "print(f())"),
            item("def", &["dead"], &[], "def dead(): ..."),
        ];
        assert_eq!(reachable_items(&items, "f").unwrap(), vec![0, 2, 4, 5]);
    }

    #[test]
    fn last_definition_is_the_entry() {
        let items = vec![
            item("def", &["f"], &[], "def f(): return 1"),
            item("def", &["f"], &[], "def f(): return 2"),
        ];
        assert_eq!(reachable_items(&items, "f").unwrap(), vec![1]);
    }

    #[test]
    fn missing_entry_is_an_error() {
        let items = vec![item("def", &["g"], &[], "def g(): ...")];
        assert!(reachable_items(&items, "f").is_err());
    }

    #[test]
    fn builtin_frontend_drops_comments_and_dead_code() {
        let code = "# header\nimport os\n\ndef f(n):  # entry\n    return g(n)\n\ndef g(n):\n    return n\n\ndef h():\n    pass\nprint(f(1))\n";
        let c = canonicalize(code, "f", Frontend::Builtin).unwrap();
        assert_eq!(c, "def f(n):\n    return g(n)\ndef g(n):\n    return n\n");
        assert_eq!(canonicalize(&c, "f", Frontend::Builtin).unwrap(), c);
    }

    #[test]
    fn completion_split() {
        let canon = "def add(a, b):\n    return a + b\n";
        assert_eq!(completion_for("def add(a,b):", canon).unwrap(), "    return a + b");
        assert!(completion_for("def add(a, c):", canon).is_none());
        assert!(completion_for("def add(a, b):", "import os\ndef add(a, b):\n    return a\n").is_none());
    }
}
