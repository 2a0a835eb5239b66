//! The Java fragment read by the augmentation pipeline: documented static
//! methods, method headers, and JUnit assertions over literals, array
//! literals and calls.

use std::collections::HashMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Kind {
    Ident,
    Num,
    Str,
    Char,
    /// A `/** ... */` comment.
    Doc,
    Punct,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Tok {
    pub kind: Kind,
    pub text: String,
    /// Byte range in the source.
    pub start: usize,
    pub end: usize,
}

impl Tok {
    fn is(&self, kind: Kind, text: &str) -> bool {
        self.kind == kind && self.text == text
    }

    fn punct(&self, text: &str) -> bool {
        self.is(Kind::Punct, text)
    }
}

fn convert_err(msg: impl Into<String>) -> Error {
    Error::Convert(msg.into())
}

pub(crate) fn lex(src: &str) -> Result<Vec<Tok>> {
    let chars: Vec<(usize, char)> = src.char_indices().collect();
    let at = |i: usize| chars.get(i).map(|&(_, c)| c);
    let offset = |i: usize| chars.get(i).map_or(src.len(), |&(b, _)| b);
    let mut toks = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i].1;
        let start = i;
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let kind = if c == '/' && at(i + 1) == Some('/') {
            while i < chars.len() && chars[i].1 != '\n' {
                i += 1;
            }
            continue;
        } else if c == '/' && at(i + 1) == Some('*') {
            let doc = at(i + 2) == Some('*') && at(i + 3) != Some('/');
            i += 2;
            loop {
                match at(i) {
                    None => return Err(convert_err("unterminated block comment")),
                    Some('*') if at(i + 1) == Some('/') => break,
                    _ => i += 1,
                }
            }
            i += 2;
            if !doc {
                continue;
            }
            Kind::Doc
        } else if c == '"' && at(i + 1) == Some('"') && at(i + 2) == Some('"') {
            i += 3;
            loop {
                match at(i) {
                    None => return Err(convert_err("unterminated text block")),
                    Some('\\') => i += 2,
                    Some('"') if at(i + 1) == Some('"') && at(i + 2) == Some('"') => break,
                    _ => i += 1,
                }
            }
            i += 3;
            Kind::Str
        } else if c == '"' || c == '\'' {
            i += 1;
            loop {
                match at(i) {
                    None | Some('\n') => return Err(convert_err("unterminated literal")),
                    Some('\\') => i += 2,
                    Some(q) if q == c => break,
                    _ => i += 1,
                }
            }
            i += 1;
            if c == '"' {
                Kind::Str
            } else {
                Kind::Char
            }
        } else if c.is_ascii_digit() || (c == '.' && at(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            let hex = c == '0' && matches!(at(i + 1), Some('x' | 'X'));
            while let Some(d) = at(i) {
                let exponent_sign = matches!(d, '+' | '-')
                    && matches!(at(i - 1), Some(e) if if hex { matches!(e, 'p' | 'P') } else { matches!(e, 'e' | 'E') });
                if d.is_ascii_alphanumeric() || d == '_' || d == '.' || exponent_sign {
                    i += 1;
                } else {
                    break;
                }
            }
            Kind::Num
        } else if c.is_alphabetic() || c == '_' || c == '$' {
            while at(i).is_some_and(|d| d.is_alphanumeric() || d == '_' || d == '$') {
                i += 1;
            }
            Kind::Ident
        } else if c == '.' && at(i + 1) == Some('.') && at(i + 2) == Some('.') {
            i += 3;
            Kind::Punct
        } else {
            i += 1;
            Kind::Punct
        };
        let (s, e) = (offset(start), offset(i));
        toks.push(Tok {
            kind,
            text: src[s..e].to_string(),
            start: s,
            end: e,
        });
    }
    Ok(toks)
}

const PYTHON_KEYWORDS: [&str; 35] = [
    "False", "None", "True", "and", "as", "assert", "async", "await", "break", "class", "continue", "def", "del",
    "elif", "else", "except", "finally", "for", "from", "global", "if", "import", "in", "is", "lambda", "nonlocal",
    "not", "or", "pass", "raise", "return", "try", "while", "with", "yield",
];

const MODIFIERS: [&str; 11] = [
    "public",
    "protected",
    "private",
    "static",
    "final",
    "abstract",
    "synchronized",
    "native",
    "strictfp",
    "default",
    "transient",
];

/// Rejects names the target language cannot declare.
fn target_name(name: &str) -> Result<&str> {
    if name.contains('$') || PYTHON_KEYWORDS.contains(&name) {
        return Err(convert_err(format!("`{name}` is not a valid target-language name")));
    }
    Ok(name)
}

/// Literal, array-literal and call expressions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum JExpr {
    Int(String),
    Float(String),
    /// Raw literal including quotes.
    Str(String),
    /// Raw literal including quotes.
    Char(String),
    Bool(bool),
    Null,
    Array {
        /// Element type of a `new T[] {...}` creation.
        elem: Option<String>,
        items: Vec<JExpr>,
    },
    Call {
        qualifier: Option<String>,
        name: String,
        args: Vec<JExpr>,
    },
    /// A variable or a qualified constant.
    Name(String),
    Neg(Box<JExpr>),
}

fn join(items: &[JExpr], f: impl Fn(&JExpr) -> Result<String>) -> Result<String> {
    Ok(items.iter().map(f).collect::<Result<Vec<_>>>()?.join(", "))
}

impl JExpr {
    pub fn to_java(&self) -> String {
        let java = |e: &JExpr| Ok(e.to_java());
        match self {
            JExpr::Int(s) | JExpr::Float(s) | JExpr::Str(s) | JExpr::Char(s) | JExpr::Name(s) => s.clone(),
            JExpr::Bool(b) => b.to_string(),
            JExpr::Null => "null".into(),
            JExpr::Array { elem: Some(t), items } => format!("new {t}[] {{{}}}", join(items, java).unwrap()),
            JExpr::Array { elem: None, items } => format!("{{{}}}", join(items, java).unwrap()),
            JExpr::Call { qualifier, name, args } => {
                let q = qualifier.as_ref().map(|q| format!("{q}.")).unwrap_or_default();
                format!("{q}{name}({})", join(args, java).unwrap())
            }
            JExpr::Neg(e) => format!("-{}", e.to_java()),
        }
    }

    pub fn to_python(&self) -> Result<String> {
        match self {
            JExpr::Int(s) => python_int(s),
            JExpr::Float(s) => python_float(s),
            JExpr::Str(s) => python_str(s),
            JExpr::Char(s) => Ok(python_char(s)),
            JExpr::Bool(true) => Ok("True".into()),
            JExpr::Bool(false) => Ok("False".into()),
            JExpr::Null => Ok("None".into()),
            JExpr::Array { items, .. } => Ok(format!("[{}]", join(items, JExpr::to_python)?)),
            JExpr::Call {
                qualifier: Some(q),
                name,
                ..
            } => Err(convert_err(format!("qualified call `{q}.{name}`"))),
            JExpr::Call { name, args, .. } => Ok(format!("{}({})", target_name(name)?, join(args, JExpr::to_python)?)),
            JExpr::Name(n) => Err(convert_err(format!("unresolved name `{n}`"))),
            JExpr::Neg(e) => Ok(format!("-{}", e.to_python()?)),
        }
    }

    fn is_numeric(&self) -> bool {
        match self {
            JExpr::Int(_) | JExpr::Float(_) => true,
            JExpr::Neg(e) => e.is_numeric(),
            _ => false,
        }
    }

    fn is_float(&self) -> bool {
        match self {
            JExpr::Float(_) => true,
            JExpr::Neg(e) => e.is_float(),
            _ => false,
        }
    }

    fn contains_call(&self) -> bool {
        match self {
            JExpr::Call { .. } => true,
            JExpr::Array { items, .. } => items.iter().any(JExpr::contains_call),
            JExpr::Neg(e) => e.contains_call(),
            _ => false,
        }
    }

    /// No free names and no qualified calls.
    fn is_closed(&self) -> bool {
        match self {
            JExpr::Name(_) | JExpr::Call { qualifier: Some(_), .. } => false,
            JExpr::Call { args: items, .. } | JExpr::Array { items, .. } => items.iter().all(JExpr::is_closed),
            JExpr::Neg(e) => e.is_closed(),
            _ => true,
        }
    }

    fn map_calls(&mut self, f: &mut impl FnMut(&mut Option<String>, &str)) {
        match self {
            JExpr::Call { qualifier, name, args } => {
                f(qualifier, name);
                args.iter_mut().for_each(|a| a.map_calls(f));
            }
            JExpr::Array { items, .. } => items.iter_mut().for_each(|a| a.map_calls(f)),
            JExpr::Neg(e) => e.map_calls(f),
            _ => {}
        }
    }

    /// Replaces variables by their bound expressions. `None` if a variable
    /// is bound to something outside the fragment.
    fn inline(&self, vars: &HashMap<String, Option<JExpr>>) -> Option<JExpr> {
        Some(match self {
            JExpr::Name(n) => match vars.get(n) {
                Some(bound) => bound.clone()?,
                None => self.clone(),
            },
            JExpr::Array { elem, items } => JExpr::Array {
                elem: elem.clone(),
                items: items.iter().map(|e| e.inline(vars)).collect::<Option<_>>()?,
            },
            JExpr::Call { qualifier, name, args } => JExpr::Call {
                qualifier: qualifier.clone(),
                name: name.clone(),
                args: args.iter().map(|e| e.inline(vars)).collect::<Option<_>>()?,
            },
            JExpr::Neg(e) => JExpr::Neg(Box::new(e.inline(vars)?)),
            _ => self.clone(),
        })
    }
}

fn python_int(raw: &str) -> Result<String> {
    let s = raw.strip_suffix(['l', 'L']).unwrap_or(raw);
    let digits = s.replace('_', "");
    if digits.len() > 1 && digits.starts_with('0') && digits.bytes().all(|b| b.is_ascii_digit()) {
        if digits.bytes().any(|b| b > b'7') {
            return Err(convert_err(format!("malformed octal literal `{raw}`")));
        }
        return Ok(format!("0o{}", &digits[1..]));
    }
    Ok(s.to_string())
}

fn python_float(raw: &str) -> Result<String> {
    if raw.starts_with("0x") || raw.starts_with("0X") {
        return Err(convert_err(format!("hexadecimal float `{raw}`")));
    }
    let s = raw.strip_suffix(['f', 'F', 'd', 'D']).unwrap_or(raw);
    if s.contains(['.', 'e', 'E']) {
        Ok(s.to_string())
    } else {
        Ok(format!("{s}.0"))
    }
}

/// Escape sequences are kept verbatim; the only one with a different
/// meaning in the target language, `\s`, is rejected.
fn python_str(raw: &str) -> Result<String> {
    if raw.starts_with("\"\"\"") {
        return Err(convert_err("text blocks are not supported"));
    }
    let mut chars = raw.chars();
    while let Some(c) = chars.next() {
        if c == '\\' && chars.next() == Some('s') {
            return Err(convert_err(format!("escape `\\s` in {raw}")));
        }
    }
    Ok(raw.to_string())
}

fn python_char(raw: &str) -> String {
    match &raw[1..raw.len() - 1] {
        "\"" => r#""\"""#.to_string(),
        "\\'" => "\"'\"".to_string(),
        inner => format!("\"{inner}\""),
    }
}

struct Parser<'a> {
    toks: &'a [Tok],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(toks: &'a [Tok]) -> Self {
        Parser { toks, pos: 0 }
    }

    fn peek(&self) -> Option<&'a Tok> {
        self.toks.get(self.pos)
    }

    fn peek_at(&self, k: usize) -> Option<&'a Tok> {
        self.toks.get(self.pos + k)
    }

    fn done(&self) -> bool {
        self.pos >= self.toks.len()
    }

    fn bump(&mut self) -> Option<&'a Tok> {
        let t = self.toks.get(self.pos);
        self.pos += 1;
        t
    }

    fn eat(&mut self, punct: &str) -> bool {
        if self.peek().is_some_and(|t| t.punct(punct)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, punct: &str) -> Result<()> {
        if self.eat(punct) {
            Ok(())
        } else {
            Err(convert_err(format!("expected `{punct}`, found {}", self.describe())))
        }
    }

    fn describe(&self) -> String {
        self.peek().map_or("end of input".into(), |t| format!("`{}`", t.text))
    }

    fn ident(&mut self) -> Result<&'a str> {
        match self.peek() {
            Some(t) if t.kind == Kind::Ident => {
                self.pos += 1;
                Ok(&t.text)
            }
            _ => Err(convert_err(format!("expected an identifier, found {}", self.describe()))),
        }
    }

    fn end(&self) -> Result<()> {
        if self.done() {
            Ok(())
        } else {
            Err(convert_err(format!("unexpected {}", self.describe())))
        }
    }

    /// Skips a balanced `<...>` group if one starts here.
    fn skip_angles(&mut self) -> Result<()> {
        if !self.eat("<") {
            return Ok(());
        }
        let mut depth = 1;
        while depth > 0 {
            match self.bump() {
                None => return Err(convert_err("unbalanced `<`")),
                Some(t) if t.punct("<") => depth += 1,
                Some(t) if t.punct(">") => depth -= 1,
                _ => {}
            }
        }
        Ok(())
    }

    fn skip_annotations(&mut self) -> Result<()> {
        while self.peek().is_some_and(|t| t.punct("@")) && self.peek_at(1).is_some_and(|t| t.kind == Kind::Ident) {
            self.pos += 1;
            self.dotted()?;
            if self.peek().is_some_and(|t| t.punct("(")) {
                self.skip_parens()?;
            }
        }
        Ok(())
    }

    fn skip_parens(&mut self) -> Result<()> {
        self.expect("(")?;
        let mut depth = 1;
        while depth > 0 {
            match self.bump() {
                None => return Err(convert_err("unbalanced `(`")),
                Some(t) if t.punct("(") => depth += 1,
                Some(t) if t.punct(")") => depth -= 1,
                _ => {}
            }
        }
        Ok(())
    }

    fn dotted(&mut self) -> Result<Vec<&'a str>> {
        let mut path = vec![self.ident()?];
        while self.peek().is_some_and(|t| t.punct(".")) && self.peek_at(1).is_some_and(|t| t.kind == Kind::Ident) {
            self.pos += 1;
            path.push(self.ident()?);
        }
        Ok(path)
    }

    /// `Name(.Name)* <...>? ([])*`, returned as written without spaces.
    fn ty(&mut self) -> Result<String> {
        let start = self.pos;
        self.dotted()?;
        self.skip_angles()?;
        while self.peek().is_some_and(|t| t.punct("[")) && self.peek_at(1).is_some_and(|t| t.punct("]")) {
            self.pos += 2;
        }
        Ok(self.toks[start..self.pos].iter().map(|t| t.text.as_str()).collect())
    }

    fn expr(&mut self) -> Result<JExpr> {
        let tok = self
            .peek()
            .ok_or_else(|| convert_err("expected an expression, found end of input"))?;
        let e = match tok.kind {
            Kind::Punct if tok.text == "-" => {
                self.pos += 1;
                JExpr::Neg(Box::new(self.expr()?))
            }
            Kind::Punct if tok.text == "+" => {
                self.pos += 1;
                self.expr()?
            }
            Kind::Punct if tok.text == "(" => self.paren_or_cast()?,
            Kind::Punct if tok.text == "{" => JExpr::Array {
                elem: None,
                items: self.initializer()?,
            },
            Kind::Num => {
                self.pos += 1;
                classify_number(&tok.text)?
            }
            Kind::Str => {
                self.pos += 1;
                JExpr::Str(tok.text.clone())
            }
            Kind::Char => {
                self.pos += 1;
                JExpr::Char(tok.text.clone())
            }
            Kind::Ident => match tok.text.as_str() {
                "true" | "false" => {
                    self.pos += 1;
                    JExpr::Bool(tok.text == "true")
                }
                "null" => {
                    self.pos += 1;
                    JExpr::Null
                }
                "new" => self.creation()?,
                _ => {
                    let mut path = self.dotted()?;
                    if self.peek().is_some_and(|t| t.punct("(")) {
                        let name = path.pop().unwrap().to_string();
                        let qualifier = (!path.is_empty()).then(|| path.join("."));
                        JExpr::Call {
                            qualifier,
                            name,
                            args: self.args()?,
                        }
                    } else {
                        JExpr::Name(path.join("."))
                    }
                }
            },
            _ => return Err(convert_err(format!("unsupported expression at `{}`", tok.text))),
        };
        match self.peek() {
            Some(t) if t.kind == Kind::Punct && !matches!(t.text.as_str(), "," | ")" | "}" | ";") => {
                Err(convert_err(format!("unsupported operator `{}`", t.text)))
            }
            _ => Ok(e),
        }
    }

    fn paren_or_cast(&mut self) -> Result<JExpr> {
        const INTEGRAL: [&str; 4] = ["byte", "short", "int", "long"];
        const FLOATING: [&str; 2] = ["float", "double"];
        if let (Some(t), Some(close)) = (self.peek_at(1), self.peek_at(2)) {
            if t.kind == Kind::Ident && close.punct(")") && (INTEGRAL.contains(&t.text.as_str()) || FLOATING.contains(&t.text.as_str())) {
                self.pos += 3;
                let inner = self.expr()?;
                let fits = if INTEGRAL.contains(&t.text.as_str()) {
                    inner.is_numeric() && !inner.is_float()
                } else {
                    inner.is_float()
                };
                if !fits {
                    return Err(convert_err(format!("cast to {} of {}", t.text, inner.to_java())));
                }
                return Ok(inner);
            }
        }
        self.expect("(")?;
        let inner = self.expr()?;
        self.expect(")")?;
        Ok(inner)
    }

    fn initializer(&mut self) -> Result<Vec<JExpr>> {
        self.expect("{")?;
        let mut items = Vec::new();
        while !self.eat("}") {
            items.push(self.expr()?);
            if !self.eat(",") {
                self.expect("}")?;
                break;
            }
        }
        Ok(items)
    }

    fn creation(&mut self) -> Result<JExpr> {
        self.pos += 1;
        let base = self.dotted()?.join(".");
        let mut dims = 0;
        while self.eat("[") {
            if !self.eat("]") {
                return Err(convert_err("sized array creation"));
            }
            dims += 1;
        }
        if dims == 0 {
            return Err(convert_err(format!("constructor call `new {base}`")));
        }
        Ok(JExpr::Array {
            elem: Some(format!("{base}{}", "[]".repeat(dims - 1))),
            items: self.initializer()?,
        })
    }

    fn args(&mut self) -> Result<Vec<JExpr>> {
        self.expect("(")?;
        let mut args = Vec::new();
        if self.eat(")") {
            return Ok(args);
        }
        loop {
            args.push(self.expr()?);
            if self.eat(")") {
                return Ok(args);
            }
            self.expect(",")?;
        }
    }
}

fn classify_number(raw: &str) -> Result<JExpr> {
    let lower = raw.to_ascii_lowercase();
    let hex = lower.starts_with("0x");
    let float = if hex {
        lower.contains('p') || lower.contains('.')
    } else {
        lower.contains(['.', 'e']) || lower.ends_with(['f', 'd'])
    };
    let valid = if float {
        !hex && raw.trim_end_matches(['f', 'F', 'd', 'D']).replace('_', "").parse::<f64>().is_ok()
    } else {
        let body = lower.trim_end_matches('l').replace('_', "");
        if hex {
            !body[2..].is_empty() && body[2..].bytes().all(|b| b.is_ascii_hexdigit())
        } else if let Some(bin) = body.strip_prefix("0b") {
            !bin.is_empty() && bin.bytes().all(|b| b == b'0' || b == b'1')
        } else {
            body.bytes().all(|b| b.is_ascii_digit())
        }
    };
    if !valid && !hex {
        return Err(convert_err(format!("malformed numeric literal `{raw}`")));
    }
    Ok(if float {
        JExpr::Float(raw.to_string())
    } else {
        JExpr::Int(raw.to_string())
    })
}

/// A parsed source-language method header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JavaSignature {
    pub name: String,
    pub params: Vec<String>,
    pub return_type: String,
    pub is_static: bool,
}

pub fn parse_signature(header: &str) -> Result<JavaSignature> {
    let toks = lex(header)?;
    let mut p = Parser::new(&toks);
    let mut is_static = false;
    loop {
        p.skip_annotations()?;
        match p.peek() {
            Some(t) if t.kind == Kind::Ident && MODIFIERS.contains(&t.text.as_str()) => {
                is_static |= t.text == "static";
                p.pos += 1;
            }
            _ => break,
        }
    }
    p.skip_angles()?;
    let return_type = p.ty()?;
    let name = p.ident()?.to_string();
    p.expect("(")?;
    let mut params = Vec::new();
    if !p.eat(")") {
        loop {
            p.skip_annotations()?;
            if p.peek().is_some_and(|t| t.is(Kind::Ident, "final")) {
                p.pos += 1;
            }
            p.skip_annotations()?;
            p.ty()?;
            p.eat("...");
            params.push(target_name(p.ident()?)?.to_string());
            while p.eat("[") {
                p.expect("]")?;
            }
            if p.eat(")") {
                break;
            }
            p.expect(",")?;
        }
    }
    if p.peek().is_some_and(|t| t.is(Kind::Ident, "throws")) {
        p.pos += 1;
        loop {
            p.ty()?;
            if !p.eat(",") {
                break;
            }
        }
    }
    p.end()?;
    target_name(&name)?;
    Ok(JavaSignature {
        name,
        params,
        return_type,
        is_static,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SourceAssertion {
    Equals {
        expected: JExpr,
        actual: JExpr,
        delta: Option<JExpr>,
    },
    True(JExpr),
    False(JExpr),
}

impl SourceAssertion {
    pub fn to_java(&self) -> String {
        match self {
            SourceAssertion::Equals { expected, actual, delta } => match delta {
                Some(d) => format!("assertEquals({}, {}, {});", expected.to_java(), actual.to_java(), d.to_java()),
                None => format!("assertEquals({}, {});", expected.to_java(), actual.to_java()),
            },
            SourceAssertion::True(e) => format!("assertTrue({});", e.to_java()),
            SourceAssertion::False(e) => format!("assertFalse({});", e.to_java()),
        }
    }

    /// The asserted outcome, as written.
    pub fn expected_key(&self) -> String {
        match self {
            SourceAssertion::Equals { expected, .. } => expected.to_java(),
            SourceAssertion::True(_) => "true".into(),
            SourceAssertion::False(_) => "false".into(),
        }
    }

    fn actual_mut(&mut self) -> &mut JExpr {
        match self {
            SourceAssertion::Equals { actual, .. } => actual,
            SourceAssertion::True(e) | SourceAssertion::False(e) => e,
        }
    }

    fn exprs(&self) -> Vec<&JExpr> {
        match self {
            SourceAssertion::Equals { expected, actual, delta } => {
                let mut v = vec![expected, actual];
                v.extend(delta);
                v
            }
            SourceAssertion::True(e) | SourceAssertion::False(e) => vec![e],
        }
    }
}

const ASSERTIONS: [&str; 4] = ["assertEquals", "assertArrayEquals", "assertTrue", "assertFalse"];

fn assertion_from(p: &mut Parser<'_>) -> Result<SourceAssertion> {
    let path = p.dotted()?;
    let name = *path.last().unwrap();
    if !ASSERTIONS.contains(&name) {
        return Err(convert_err(format!("unsupported assertion `{name}`")));
    }
    let mut args = p.args()?;
    p.eat(";");
    p.end()?;
    let has_message = |args: &[JExpr]| matches!(args.first(), Some(JExpr::Str(_)));
    let a = match (name, args.len()) {
        ("assertTrue" | "assertFalse", 1) => args.pop().unwrap(),
        ("assertTrue" | "assertFalse", 2) if has_message(&args) => args.pop().unwrap(),
        ("assertTrue" | "assertFalse", _) => return Err(convert_err(format!("{name} with {} arguments", args.len()))),
        (_, 2) => {
            let actual = args.pop().unwrap();
            let expected = args.pop().unwrap();
            return Ok(SourceAssertion::Equals {
                expected,
                actual,
                delta: None,
            });
        }
        (_, 3 | 4) => {
            if args.len() == 4 || (has_message(&args) && !args[2].is_numeric()) {
                if !has_message(&args) {
                    return Err(convert_err(format!("{name} with a non-string message")));
                }
                args.remove(0);
            }
            let delta = (args.len() == 3).then(|| args.pop().unwrap());
            if delta.as_ref().is_some_and(|d| !d.is_numeric()) {
                return Err(convert_err(format!("{name} with a non-numeric tolerance")));
            }
            let actual = args.pop().unwrap();
            let expected = args.pop().unwrap();
            return Ok(SourceAssertion::Equals { expected, actual, delta });
        }
        _ => return Err(convert_err(format!("{name} with {} arguments", args.len()))),
    };
    Ok(if name == "assertTrue" {
        SourceAssertion::True(a)
    } else {
        SourceAssertion::False(a)
    })
}

/// Parses one assertion statement, e.g. `assertEquals(581, max(0, 581));`.
pub fn parse_assertion(text: &str) -> Result<SourceAssertion> {
    let toks = lex(text)?;
    assertion_from(&mut Parser::new(&toks))
}

/// Emission mode for floating-point expected values.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum FloatMode {
    /// `assert f(x) == 0.5`
    #[default]
    Exact,
    /// `assert abs(f(x) - 0.5) <= tol`, using the assertion's own delta when
    /// it has one.
    Tolerance { tol: f64 },
}

/// Converts one source assertion to a target-language test statement.
pub fn convert_assertion(text: &str, mode: FloatMode) -> Result<String> {
    let a = parse_assertion(text)?;
    if !a.exprs().iter().any(|e| e.contains_call()) {
        return Err(convert_err(format!("assertion `{text}` makes no call")));
    }
    match &a {
        SourceAssertion::Equals { expected, actual, delta } => {
            let (exp, act) = (expected.to_python()?, actual.to_python()?);
            match mode {
                FloatMode::Tolerance { tol } if expected.is_float() => {
                    let tol = match delta {
                        Some(d) => d.to_python()?,
                        None => format!("{tol:?}"),
                    };
                    Ok(format!("assert abs({act} - {exp}) <= {tol}"))
                }
                _ => Ok(format!("assert {act} == {exp}")),
            }
        }
        SourceAssertion::True(e) => Ok(format!("assert {} == True", e.to_python()?)),
        SourceAssertion::False(e) => Ok(format!("assert {} == False", e.to_python()?)),
    }
}

/// A documented method found in a source file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct DocumentedMethod {
    pub doc: String,
    pub header: String,
    pub body: String,
    pub class_name: String,
    pub is_static: bool,
}

fn collapse(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Methods with a body that directly follow a doc comment.
pub(crate) fn documented_methods(src: &str) -> Result<Vec<DocumentedMethod>> {
    let toks = lex(src)?;
    let mut out = Vec::new();
    let mut classes: Vec<Option<String>> = Vec::new();
    let mut pending_class = None;
    for (i, t) in toks.iter().enumerate() {
        match t.kind {
            Kind::Ident if matches!(t.text.as_str(), "class" | "interface" | "enum" | "record") => {
                if let Some(n) = toks.get(i + 1).filter(|n| n.kind == Kind::Ident) {
                    pending_class = Some(n.text.clone());
                }
            }
            Kind::Punct if t.text == "{" => classes.push(pending_class.take()),
            Kind::Punct if t.text == "}" => {
                classes.pop();
            }
            Kind::Doc => {
                if let Some(m) = method_after(src, &toks, i, &classes)? {
                    out.push(m);
                }
            }
            _ => {}
        }
    }
    Ok(out)
}

fn method_after(src: &str, toks: &[Tok], doc: usize, classes: &[Option<String>]) -> Result<Option<DocumentedMethod>> {
    let mut p = Parser::new(&toks[doc + 1..]);
    p.skip_annotations()?;
    let header_start = p.pos;
    let mut has_paren = false;
    let open = loop {
        match p.peek() {
            None => return Ok(None),
            Some(t) if t.kind == Kind::Doc || t.punct(";") || t.punct("=") || t.punct("}") => return Ok(None),
            Some(t) if t.kind == Kind::Ident && matches!(t.text.as_str(), "class" | "interface" | "enum" | "record") => {
                return Ok(None)
            }
            Some(t) if t.punct("{") => break p.pos,
            Some(t) => {
                has_paren |= t.punct("(");
                p.pos += 1;
            }
        }
    };
    if !has_paren || open == header_start {
        return Ok(None);
    }
    let mut depth = 0;
    let mut close = None;
    for (k, t) in toks[doc + 1 + open..].iter().enumerate() {
        if t.punct("{") {
            depth += 1;
        } else if t.punct("}") {
            depth -= 1;
            if depth == 0 {
                close = Some(doc + 1 + open + k);
                break;
            }
        }
    }
    let Some(close) = close else {
        return Err(convert_err("unbalanced braces in method body"));
    };
    let header_toks = &toks[doc + 1 + header_start..doc + 1 + open];
    let header = collapse(&src[header_toks[0].start..header_toks.last().unwrap().end]);
    let is_static = header_toks.iter().any(|t| t.is(Kind::Ident, "static"));
    Ok(Some(DocumentedMethod {
        doc: toks[doc].text.clone(),
        header,
        body: src[toks[doc + 1 + open].start..toks[close].end].to_string(),
        class_name: classes.iter().rev().flatten().next().cloned().unwrap_or_default(),
        is_static,
    }))
}

/// Flattens a doc comment to one line: comment markers and inline-tag
/// braces go, block tags such as `@param` stay in place.
pub fn doc_text(raw: &str) -> String {
    let inner = raw.trim_start_matches("/**").trim_end_matches("*/");
    let lines: Vec<&str> = inner.lines().map(|l| l.trim_start().trim_start_matches('*')).collect();
    let mut text = collapse(&lines.join(" "));
    while let Some(s) = text.find("{@") {
        let Some(len) = text[s..].find('}') else { break };
        let tag = &text[s + 2..s + len];
        let content = tag.split_once(char::is_whitespace).map_or("", |(_, c)| c).trim().to_string();
        text.replace_range(s..s + len + 1, &content);
    }
    collapse(&strip_html(&text))
}

fn strip_html(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(i) = rest.find('<') {
        out.push_str(&rest[..i]);
        let after = &rest[i + 1..];
        let tag_like = after.trim_start_matches('/').starts_with(|c: char| c.is_ascii_alphabetic());
        match after.find('>').filter(|&j| tag_like && j <= 40 && !after[..j].contains('<')) {
            Some(j) => {
                out.push(' ');
                rest = &after[j + 1..];
            }
            None => {
                out.push('<');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

/// Assertions recovered from a generated test file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedTests {
    /// Self-contained assertion statements in source-language syntax.
    pub assertions: Vec<String>,
    /// Assertions outside the supported fragment.
    pub dropped: usize,
}

/// Reads JUnit test methods, inlines local variables into their
/// assertions and strips the `class_name` qualifier from calls. Statements
/// in nested blocks (expected-exception tests and the like) are ignored.
pub fn parse_generated_tests(src: &str, class_name: &str) -> Result<ParsedTests> {
    let toks = lex(src)?;
    let mut out = ParsedTests::default();
    let mut depth = 0usize;
    let mut braces: Vec<bool> = Vec::new();
    let mut stmt: Vec<Tok> = Vec::new();
    let mut compound = false;
    let mut vars: HashMap<String, Option<JExpr>> = HashMap::new();
    for (i, t) in toks.iter().enumerate() {
        if t.kind == Kind::Doc {
            continue;
        }
        if t.punct("{") {
            let initializer = braces.last() == Some(&true)
                || (i > 0 && toks[i - 1].kind == Kind::Punct && matches!(toks[i - 1].text.as_str(), "=" | "]" | "," | "("));
            braces.push(initializer);
            if initializer {
                if depth == 2 {
                    stmt.push(t.clone());
                }
                continue;
            }
            depth += 1;
            if depth == 2 {
                vars.clear();
                stmt.clear();
                compound = false;
            } else if depth == 3 {
                compound = true;
            }
            continue;
        }
        if t.punct("}") {
            if braces.pop() == Some(true) {
                if depth == 2 {
                    stmt.push(t.clone());
                }
                continue;
            }
            depth = depth.saturating_sub(1);
            if depth == 2 {
                let continues = toks
                    .get(i + 1)
                    .is_some_and(|n| n.kind == Kind::Ident && matches!(n.text.as_str(), "catch" | "finally" | "else"));
                if !continues {
                    poison(&stmt, &mut vars);
                    stmt.clear();
                    compound = false;
                }
            }
            continue;
        }
        if depth != 2 {
            continue;
        }
        if t.punct(";") {
            if compound {
                poison(&stmt, &mut vars);
            } else {
                statement(&stmt, class_name, &mut vars, &mut out);
            }
            stmt.clear();
            compound = false;
        } else {
            stmt.push(t.clone());
        }
    }
    Ok(out)
}

fn poison(stmt: &[Tok], vars: &mut HashMap<String, Option<JExpr>>) {
    for t in stmt.iter().filter(|t| t.kind == Kind::Ident) {
        if let Some(v) = vars.get_mut(&t.text) {
            *v = None;
        }
    }
}

fn statement(stmt: &[Tok], class_name: &str, vars: &mut HashMap<String, Option<JExpr>>, out: &mut ParsedTests) {
    if stmt.is_empty() {
        return;
    }
    let mut p = Parser::new(stmt);
    if let Ok(path) = p.dotted() {
        if path.last().is_some_and(|n| n.starts_with("assert")) {
            let mut q = Parser::new(stmt);
            match assertion_from(&mut q).and_then(|a| resolve(a, class_name, vars)) {
                Ok(a) => out.assertions.push(a.to_java()),
                Err(e) => {
                    log::debug!("dropping assertion: {e}");
                    out.dropped += 1;
                }
            }
            return;
        }
    }
    let mut p = Parser::new(stmt);
    if p.peek().is_some_and(|t| t.is(Kind::Ident, "final")) {
        p.pos += 1;
    }
    if p.ty().is_ok() {
        if let Ok(name) = p.ident() {
            let name = name.to_string();
            if p.done() {
                vars.insert(name, None);
                return;
            }
            if p.eat("=") {
                let value = p
                    .expr()
                    .ok()
                    .filter(|_| p.done())
                    .and_then(|e| e.inline(vars))
                    .filter(|e| !matches!(e, JExpr::Name(_)));
                vars.insert(name, value);
                return;
            }
        }
    }
    poison(stmt, vars);
}

fn resolve(mut a: SourceAssertion, class_name: &str, vars: &HashMap<String, Option<JExpr>>) -> Result<SourceAssertion> {
    let inline = |e: &JExpr| e.inline(vars).ok_or_else(|| convert_err("assertion depends on a mutated or opaque variable"));
    a = match &a {
        SourceAssertion::Equals { expected, actual, delta } => SourceAssertion::Equals {
            expected: inline(expected)?,
            actual: inline(actual)?,
            delta: delta.as_ref().map(inline).transpose()?,
        },
        SourceAssertion::True(e) => SourceAssertion::True(inline(e)?),
        SourceAssertion::False(e) => SourceAssertion::False(inline(e)?),
    };
    let strip = |q: &mut Option<String>, _: &str| {
        if q.as_deref().is_some_and(|q| q == class_name || q.ends_with(&format!(".{class_name}"))) {
            *q = None;
        }
    };
    let mut strip = strip;
    a.actual_mut().map_calls(&mut strip);
    if let SourceAssertion::Equals { expected, .. } = &mut a {
        expected.map_calls(&mut strip);
    }
    if !a.exprs().into_iter().all(JExpr::is_closed) {
        return Err(convert_err(format!("`{}` refers to objects outside the fragment", a.to_java())));
    }
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn signatures() {
        let s = parse_signature("public static int max(int a, int b)").unwrap();
        assert_eq!((s.name.as_str(), s.params.clone(), s.is_static), ("max", vec!["a".into(), "b".into()], true));
        let s = parse_signature("static <T extends Comparable<T>> java.util.List<T>[] f(final Map<String, int[]> m, @Nullable T... rest) throws IOException, X").unwrap();
        assert_eq!(s.params, vec!["m", "rest"]);
        assert_eq!(s.return_type, "java.util.List<T>[]");
        assert!(parse_signature("static int f(int lambda)").is_err());
        assert!(parse_signature("static int f(int a").is_err());
        assert!(parse_signature("def max(a, b):").is_err());
    }

    #[test]
    fn literals() {
        let py = |s: &str| convert_assertion(&format!("assertEquals({s}, f())"), FloatMode::Exact).unwrap();
        assert_eq!(py("0L"), "assert f() == 0");
        assert_eq!(py("017"), "assert f() == 0o17");
        assert_eq!(py("0x1FL"), "assert f() == 0x1F");
        assert_eq!(py("1.5F"), "assert f() == 1.5");
        assert_eq!(py("3d"), "assert f() == 3.0");
        assert_eq!(py("(-1)"), "assert f() == -1");
        assert_eq!(py("(short) 4"), "assert f() == 4");
        assert_eq!(py("'x'"), "assert f() == \"x\"");
        assert_eq!(py("'\"'"), "assert f() == \"\\\"\"");
        assert_eq!(py("'\\''"), "assert f() == \"'\"");
        assert_eq!(py("'\\n'"), "assert f() == \"\\n\"");
        assert_eq!(py("\"a\\tb\\u0041\""), "assert f() == \"a\\tb\\u0041\"");
        assert_eq!(py("new int[] {1, -2}"), "assert f() == [1, -2]");
        assert_eq!(py("null"), "assert f() == None");
        for bad in ["new Foo()", "1 + 2", "Integer.MAX_VALUE", "\"a\\sb\"", "0x1p3", "(char) 65", "new int[3]"] {
            assert!(convert_assertion(&format!("assertEquals({bad}, f())"), FloatMode::Exact).is_err(), "{bad}");
        }
    }

    #[test]
    fn assertion_shapes() {
        assert_eq!(
            convert_assertion("assertTrue(isOk(1));", FloatMode::Exact).unwrap(),
            "assert isOk(1) == True"
        );
        assert_eq!(
            convert_assertion("Assert.assertFalse(\"msg\", isOk(2))", FloatMode::Exact).unwrap(),
            "assert isOk(2) == False"
        );
        assert_eq!(
            convert_assertion("assertEquals(0.5, half(1), 0.01)", FloatMode::Exact).unwrap(),
            "assert half(1) == 0.5"
        );
        assert_eq!(
            convert_assertion("assertEquals(0.5, half(1), 0.01)", FloatMode::Tolerance { tol: 1e-6 }).unwrap(),
            "assert abs(half(1) - 0.5) <= 0.01"
        );
        assert_eq!(
            convert_assertion("assertEquals(0.5, half(1))", FloatMode::Tolerance { tol: 1e-6 }).unwrap(),
            "assert abs(half(1) - 0.5) <= 1e-6"
        );
        assert_eq!(
            convert_assertion("assertEquals(\"m\", 3, g(1))", FloatMode::Exact).unwrap(),
            "assert g(1) == 3"
        );
        assert!(convert_assertion("assertEquals(1, 1)", FloatMode::Exact).is_err());
        assert!(convert_assertion("assertNull(f())", FloatMode::Exact).is_err());
        assert!(convert_assertion("assertEquals(1, Util.f())", FloatMode::Exact).is_err());
    }

    #[test]
    fn doc_comments() {
        let raw = "/**\n * Returns the {@code max} of <b>a</b> and b.\n *\n * @param a first\n */";
        assert_eq!(doc_text(raw), "Returns the max of a and b. @param a first");
        assert_eq!(doc_text("/** x < y and y>z */"), "x < y and y>z");
    }

    #[test]
    fn finds_documented_methods() {
        let src = r#"
package p;
/** The class. */
public class Util {
    /** Doubles it. */
    @Deprecated
    public static int twice(int x) { if (x > 0) { return 2 * x; } return x + x; }
    /** A field. */
    static int COUNT = 3;
    /** Instance method. */
    int inst() { return 1; }
    static int undocumented() { return 0; }
    /** Abstract. */
    abstract int abs();
}
"#;
        let ms = documented_methods(src).unwrap();
        assert_eq!(ms.len(), 2);
        assert_eq!(ms[0].header, "public static int twice(int x)");
        assert_eq!(ms[0].body, "{ if (x > 0) { return 2 * x; } return x + x; }");
        assert_eq!(ms[0].class_name, "Util");
        assert!(ms[0].is_static && !ms[1].is_static);
    }

    #[test]
    fn generated_tests_are_inlined() {
        let src = r#"
public class Max_ESTest extends Max_ESTest_scaffolding {
  @Test(timeout = 4000)
  public void test0() throws Throwable {
      int int0 = Max.max(0, 581);
      assertEquals(581, int0);
  }
  @Test(timeout = 4000)
  public void test1() throws Throwable {
      int[] intArray0 = new int[] {1, 2};
      int int0 = Max.sum(intArray0);
      intArray0[0] = 7;
      assertEquals(3, int0);
      assertEquals(3, Max.sum(intArray0));
      Max max0 = new Max();
      assertEquals(1, max0.one());
      try {
        Max.max(1, 2);
        fail("Expecting exception");
      } catch(IllegalStateException e) {
        verifyException("Max", e);
      }
      assertNotNull(max0);
      assertTrue(Max.isPositive((-3)));
  }
}
"#;
        let parsed = parse_generated_tests(src, "Max").unwrap();
        assert_eq!(
            parsed.assertions,
            vec![
                "assertEquals(581, max(0, 581));",
                "assertEquals(3, sum(new int[] {1, 2}));",
                "assertTrue(isPositive(-3));",
            ]
        );
        assert_eq!(parsed.dropped, 3);
    }
}
