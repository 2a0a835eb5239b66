//! Tokenizer-level statement splitter for when no interpreter is available.
//!
//! Handles comments, string literals (prefixed, triple-quoted), bracket and
//! backslash continuations, decorators and indentation. Layout inside a
//! statement is preserved apart from comments, trailing whitespace and
//! blank lines.

use crate::error::{Error, Result};
use crate::sandbox::ParsedItem;

const KEYWORDS: &[&str] = &[
    "False", "None", "True", "and", "as", "assert", "async", "await", "break", "class", "continue", "def", "del",
    "elif", "else", "except", "finally", "for", "from", "global", "if", "import", "in", "is", "lambda", "nonlocal",
    "not", "or", "pass", "raise", "return", "try", "while", "with", "yield",
];

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Name(String),
    Op(String),
    Literal,
}

/// One physical line after comment removal.
#[derive(Debug)]
struct Line {
    text: String,
    /// The line begins a logical line (not inside a string, bracket or
    /// backslash continuation).
    logical_start: bool,
    /// The line begins inside a multi-line string and must be kept verbatim.
    in_string: bool,
    tokens: Vec<Tok>,
}

fn scan(code: &str) -> Result<Vec<Line>> {
    let chars: Vec<char> = code.chars().collect();
    let mut lines = Vec::new();
    let mut cur = Line {
        text: String::new(),
        logical_start: true,
        in_string: false,
        tokens: Vec::new(),
    };
    let mut depth: usize = 0;
    // Open triple-quoted string delimiter, if any.
    let mut open_string: Option<char> = None;
    let mut i = 0;
    let n = chars.len();
    while i < n {
        let c = chars[i];
        if let Some(q) = open_string {
            if c == '\\' && i + 1 < n {
                cur.text.push(c);
                if chars[i + 1] != '\n' {
                    cur.text.push(chars[i + 1]);
                    i += 2;
                    continue;
                }
                i += 1;
                continue;
            }
            if c == q && i + 2 < n && chars[i + 1] == q && chars[i + 2] == q {
                cur.text.extend([q, q, q]);
                open_string = None;
                i += 3;
                continue;
            }
            if c == '\n' {
                lines.push(std::mem::replace(
                    &mut cur,
                    Line {
                        text: String::new(),
                        logical_start: false,
                        in_string: true,
                        tokens: Vec::new(),
                    },
                ));
                i += 1;
                continue;
            }
            cur.text.push(c);
            i += 1;
            continue;
        }
        match c {
            '\n' => {
                let logical = depth == 0 && !cur.text.trim_end().ends_with('\\');
                lines.push(std::mem::replace(
                    &mut cur,
                    Line {
                        text: String::new(),
                        logical_start: logical,
                        in_string: false,
                        tokens: Vec::new(),
                    },
                ));
                i += 1;
            }
            '#' => {
                while i < n && chars[i] != '\n' {
                    i += 1;
                }
            }
            '\'' | '"' => {
                i = scan_string(&chars, i, &mut cur, &mut open_string)?;
            }
            c if c.is_alphabetic() || c == '_' => {
                let start = i;
                while i < n && (chars[i].is_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                let word: String = chars[start..i].iter().collect();
                if i < n && (chars[i] == '\'' || chars[i] == '"') && is_string_prefix(&word) {
                    cur.text.push_str(&word);
                    i = scan_string(&chars, i, &mut cur, &mut open_string)?;
                } else {
                    cur.text.push_str(&word);
                    cur.tokens.push(Tok::Name(word));
                }
            }
            c if c.is_ascii_digit() => {
                while i < n && (chars[i].is_alphanumeric() || chars[i] == '_' || chars[i] == '.') {
                    cur.text.push(chars[i]);
                    i += 1;
                }
                cur.tokens.push(Tok::Literal);
            }
            c if c.is_whitespace() => {
                cur.text.push(c);
                i += 1;
            }
            _ => {
                match c {
                    '(' | '[' | '{' => depth += 1,
                    ')' | ']' | '}' => {
                        depth = depth
                            .checked_sub(1)
                            .ok_or_else(|| Error::Canonicalize(format!("unbalanced `{c}`")))?
                    }
                    _ => {}
                }
                let mut op = c.to_string();
                if i + 1 < n && chars[i + 1] == '=' && "=!<>+-*/%&|^@:".contains(c) {
                    op.push('=');
                } else if c == '-' && i + 1 < n && chars[i + 1] == '>' {
                    op.push('>');
                }
                i += op.chars().count();
                cur.text.push_str(&op);
                cur.tokens.push(Tok::Op(op));
            }
        }
    }
    if open_string.is_some() {
        return Err(Error::Canonicalize("unterminated triple-quoted string".into()));
    }
    if depth != 0 {
        return Err(Error::Canonicalize("unclosed bracket".into()));
    }
    lines.push(cur);
    Ok(lines)
}

fn is_string_prefix(word: &str) -> bool {
    word.len() <= 2 && word.chars().all(|c| "rRbBuUfF".contains(c))
}

/// Consumes a string literal starting at the quote `chars[i]`.
fn scan_string(chars: &[char], mut i: usize, cur: &mut Line, open: &mut Option<char>) -> Result<usize> {
    let q = chars[i];
    let n = chars.len();
    cur.tokens.push(Tok::Literal);
    if i + 2 < n && chars[i + 1] == q && chars[i + 2] == q {
        cur.text.extend([q, q, q]);
        i += 3;
        while i < n {
            if chars[i] == '\\' && i + 1 < n && chars[i + 1] != '\n' {
                cur.text.push(chars[i]);
                cur.text.push(chars[i + 1]);
                i += 2;
            } else if chars[i] == q && i + 2 < n && chars[i + 1] == q && chars[i + 2] == q {
                cur.text.extend([q, q, q]);
                return Ok(i + 3);
            } else if chars[i] == '\n' {
                *open = Some(q);
                return Ok(i);
            } else {
                cur.text.push(chars[i]);
                i += 1;
            }
        }
        return Err(Error::Canonicalize("unterminated triple-quoted string".into()));
    }
    cur.text.push(q);
    i += 1;
    while i < n {
        let c = chars[i];
        if c == '\\' && i + 1 < n {
            cur.text.push(c);
            cur.text.push(chars[i + 1]);
            i += 2;
            continue;
        }
        if c == '\n' {
            break;
        }
        cur.text.push(c);
        i += 1;
        if c == q {
            return Ok(i);
        }
    }
    Err(Error::Canonicalize("unterminated string literal".into()))
}

fn kind_of(tokens: &[Tok]) -> &'static str {
    let first_name = tokens.iter().find_map(|t| match t {
        Tok::Name(n) if n != "async" => Some(n.as_str()),
        _ => None,
    });
    let decorated = matches!(tokens.first(), Some(Tok::Op(o)) if o == "@");
    if decorated {
        // The keyword follows the decorator lines; find the first def/class.
        for t in tokens {
            if let Tok::Name(n) = t {
                match n.as_str() {
                    "def" => return "def",
                    "class" => return "class",
                    _ => {}
                }
            }
        }
        return "other";
    }
    match first_name {
        Some("def") if matches!(tokens.first(), Some(Tok::Name(_))) => "def",
        Some("class") if matches!(tokens.first(), Some(Tok::Name(_))) => "class",
        Some("import") | Some("from") if matches!(tokens.first(), Some(Tok::Name(_))) => "import",
        _ => "other",
    }
}

fn names_of(kind: &str, tokens: &[Tok]) -> Vec<String> {
    let name_at = |i: usize| match tokens.get(i) {
        Some(Tok::Name(n)) => Some(n.clone()),
        _ => None,
    };
    let mut names = Vec::new();
    match kind {
        "def" | "class" => {
            let kw = if kind == "def" { "def" } else { "class" };
            if let Some(pos) = tokens.iter().position(|t| *t == Tok::Name(kw.into())) {
                names.extend(name_at(pos + 1));
            }
        }
        "import" => {
            let from = tokens.first() == Some(&Tok::Name("from".into()));
            let start = if from {
                tokens.iter().position(|t| *t == Tok::Name("import".into())).map_or(tokens.len(), |p| p + 1)
            } else {
                1
            };
            let mut i = start;
            while i < tokens.len() {
                let mut dotted = Vec::new();
                while let Some(Tok::Name(n)) = tokens.get(i) {
                    dotted.push(n.clone());
                    if tokens.get(i + 1) == Some(&Tok::Op(".".into())) {
                        i += 2;
                    } else {
                        i += 1;
                        break;
                    }
                }
                if tokens.get(i) == Some(&Tok::Name("as".into())) {
                    names.extend(name_at(i + 1));
                    i += 2;
                } else if let Some(first) = dotted.first() {
                    names.push(first.clone());
                }
                while i < tokens.len() && tokens[i] != Tok::Op(",".into()) {
                    i += 1;
                }
                i += 1;
            }
        }
        _ => {
            // Targets of a top-level assignment or augmented assignment.
            let mut depth = 0i32;
            let mut end = None;
            for (i, t) in tokens.iter().enumerate() {
                if let Tok::Op(o) = t {
                    match o.as_str() {
                        "(" | "[" | "{" => depth += 1,
                        ")" | "]" | "}" => depth -= 1,
                        "=" | "+=" | "-=" | "*=" | "/=" | "%=" | "&=" | "|=" | "^=" | "@=" if depth == 0 => {
                            end = Some(i);
                        }
                        _ => {}
                    }
                }
            }
            if let Some(end) = end {
                for (i, t) in tokens[..end].iter().enumerate() {
                    if let Tok::Name(n) = t {
                        let after_dot = i > 0 && tokens[i - 1] == Tok::Op(".".into());
                        if !after_dot && !KEYWORDS.contains(&n.as_str()) {
                            names.push(n.clone());
                        }
                    }
                }
            }
            names.sort();
            names.dedup();
        }
    }
    names
}

fn refs_of(tokens: &[Tok]) -> Vec<String> {
    let mut refs: Vec<String> = tokens
        .iter()
        .enumerate()
        .filter_map(|(i, t)| match t {
            Tok::Name(n) if !KEYWORDS.contains(&n.as_str()) => {
                let qualified = i > 0
                    && matches!(&tokens[i - 1], Tok::Op(o) if o == ".")
                    || matches!(i.checked_sub(1).map(|j| &tokens[j]), Some(Tok::Name(k)) if k == "def" || k == "class");
                (!qualified).then(|| n.clone())
            }
            _ => None,
        })
        .collect();
    refs.sort();
    refs.dedup();
    refs
}

/// Splits `code` into top-level statements.
pub(super) fn parse_items(code: &str) -> Result<Vec<ParsedItem>> {
    let lines = scan(code)?;
    let mut groups: Vec<Vec<&Line>> = Vec::new();
    let mut pending_decorators = false;
    for line in &lines {
        let blank = !line.in_string && line.text.trim().is_empty();
        if blank {
            continue;
        }
        let top_level = line.logical_start && !line.in_string && !line.text.starts_with([' ', '\t']);
        if top_level && !pending_decorators {
            groups.push(vec![line]);
        } else if let Some(g) = groups.last_mut() {
            g.push(line);
        } else {
            return Err(Error::Canonicalize("unexpected indent".into()));
        }
        if top_level {
            pending_decorators = line.text.trim_start().starts_with('@');
        }
    }
    Ok(groups
        .into_iter()
        .map(|g| {
            let tokens: Vec<Tok> = g.iter().flat_map(|l| l.tokens.iter().cloned()).collect();
            let kind = kind_of(&tokens);
            let src = g
                .iter()
                .map(|l| if l.in_string { l.text.as_str() } else { l.text.trim_end() })
                .collect::<Vec<_>>()
                .join("\n");
            ParsedItem {
                kind: kind.to_string(),
                names: names_of(kind, &tokens),
                refs: refs_of(&tokens),
                src,
            }
        })
        .collect())
}
