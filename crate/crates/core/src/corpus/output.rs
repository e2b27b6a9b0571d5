//! The entity-dictionary output format.
//!
//! Two dialects are understood. The canonical one is strict JSON with every
//! type present and `null` for empty lists. The other is the Python-repr
//! rendering (`{'Company': ['X'], 'Date': None}`) that annotators and
//! off-the-shelf tooling tend to produce. [`serialize_output`] always emits
//! the canonical dialect; [`parse_output`] accepts either, plus any mixture of
//! the two, since model generations are untrusted.

use std::fmt;

use super::{EntityMap, EntityType};

pub fn serialize_output(entities: &EntityMap) -> String {
    render(entities, |s| serde_json::to_string(s).expect("strings always serialize"), "null")
}

/// Python `repr()` of the equivalent dict.
pub fn serialize_repr(entities: &EntityMap) -> String {
    render(entities, py_repr_str, "None")
}

fn render(entities: &EntityMap, quote: impl Fn(&str) -> String, null: &str) -> String {
    let mut out = String::from("{");
    for (i, (ty, mentions)) in entities.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        out.push_str(&quote(ty.as_str()));
        out.push_str(": ");
        if mentions.is_empty() {
            out.push_str(null);
        } else {
            out.push('[');
            for (j, m) in mentions.iter().enumerate() {
                if j > 0 {
                    out.push_str(", ");
                }
                out.push_str(&quote(m));
            }
            out.push(']');
        }
    }
    out.push('}');
    out
}

fn py_repr_str(s: &str) -> String {
    let q = if s.contains('\'') && !s.contains('"') { '"' } else { '\'' };
    let mut out = String::with_capacity(s.len() + 2);
    out.push(q);
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if c == q => {
                out.push('\\');
                out.push(c);
            }
            c if (c as u32) < 0x20 || c as u32 == 0x7f => out.push_str(&format!("\\x{:02x}", c as u32)),
            c => out.push(c),
        }
    }
    out.push(q);
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseFailure {
    /// Byte offset into the input where parsing stopped.
    pub offset: usize,
    pub reason: String,
}

impl fmt::Display for ParseFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "at byte {}: {}", self.offset, self.reason)
    }
}

impl std::error::Error for ParseFailure {}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedOutput {
    pub entities: EntityMap,
    /// Keys that are not entity types; their values were dropped.
    pub unknown_keys: Vec<String>,
}

pub fn parse_output(text: &str) -> Result<ParsedOutput, ParseFailure> {
    Parser { src: text, pos: 0 }.document()
}

enum Value {
    Null,
    List(Vec<String>),
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl Parser<'_> {
    fn fail<T>(&self, reason: impl Into<String>) -> Result<T, ParseFailure> {
        Err(ParseFailure {
            offset: self.pos,
            reason: reason.into(),
        })
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        Some(c)
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(c) if c.is_whitespace()) {
            self.bump();
        }
    }

    fn expect(&mut self, want: char) -> Result<(), ParseFailure> {
        match self.peek() {
            Some(c) if c == want => {
                self.bump();
                Ok(())
            }
            Some(c) => self.fail(format!("expected {want:?}, found {c:?}")),
            None => self.fail(format!("expected {want:?}, found end of input")),
        }
    }

    fn eat_keyword(&mut self, kw: &str) -> bool {
        if self.src[self.pos..].starts_with(kw) {
            self.pos += kw.len();
            true
        } else {
            false
        }
    }

    fn document(mut self) -> Result<ParsedOutput, ParseFailure> {
        let mut entities = EntityMap::new();
        let mut seen = [false; 7];
        let mut unknown_keys = Vec::new();

        self.skip_ws();
        self.expect('{')?;
        self.skip_ws();
        if self.peek() != Some('}') {
            loop {
                self.skip_ws();
                if self.peek() == Some('}') {
                    break; // trailing comma
                }
                let key_at = self.pos;
                let key = self.string()?;
                self.skip_ws();
                self.expect(':')?;
                self.skip_ws();
                let value = self.value()?;
                match key.parse::<EntityType>() {
                    Ok(ty) => {
                        if seen[ty.index()] {
                            self.pos = key_at;
                            return self.fail(format!("duplicate key {key:?}"));
                        }
                        seen[ty.index()] = true;
                        if let Value::List(items) = value {
                            *entities.get_mut(ty) = items;
                        }
                    }
                    Err(_) => unknown_keys.push(key),
                }
                self.skip_ws();
                match self.peek() {
                    Some(',') => {
                        self.bump();
                    }
                    Some('}') => break,
                    Some(c) => return self.fail(format!("expected ',' or '}}', found {c:?}")),
                    None => return self.fail("unterminated dict"),
                }
            }
        }
        self.expect('}')?;
        self.skip_ws();
        if self.pos != self.src.len() {
            return self.fail("trailing characters after dict");
        }
        Ok(ParsedOutput {
            entities,
            unknown_keys,
        })
    }

    fn value(&mut self) -> Result<Value, ParseFailure> {
        if self.eat_keyword("null") || self.eat_keyword("None") {
            return Ok(Value::Null);
        }
        if self.peek() != Some('[') {
            return self.fail("expected a list, null or None");
        }
        self.bump();
        let mut items = Vec::new();
        loop {
            self.skip_ws();
            if self.peek() == Some(']') {
                self.bump();
                break;
            }
            items.push(self.string()?);
            self.skip_ws();
            match self.peek() {
                Some(',') => {
                    self.bump();
                }
                Some(']') => {
                    self.bump();
                    break;
                }
                Some(c) => return self.fail(format!("expected ',' or ']', found {c:?}")),
                None => return self.fail("unterminated list"),
            }
        }
        Ok(Value::List(items))
    }

    fn string(&mut self) -> Result<String, ParseFailure> {
        let quote = match self.peek() {
            Some(q @ ('"' | '\'')) => q,
            Some(c) => return self.fail(format!("expected a quoted string, found {c:?}")),
            None => return self.fail("expected a quoted string, found end of input"),
        };
        self.bump();
        let mut out = String::new();
        loop {
            let Some(c) = self.bump() else {
                return self.fail("unterminated string");
            };
            match c {
                c if c == quote => return Ok(out),
                '\\' => self.escape(&mut out)?,
                c => out.push(c),
            }
        }
    }

    fn escape(&mut self, out: &mut String) -> Result<(), ParseFailure> {
        let Some(c) = self.bump() else {
            return self.fail("unterminated escape");
        };
        match c {
            '"' | '\'' | '\\' | '/' => out.push(c),
            'n' => out.push('\n'),
            't' => out.push('\t'),
            'r' => out.push('\r'),
            'b' => out.push('\u{8}'),
            'f' => out.push('\u{c}'),
            'x' => {
                let v = self.hex(2)?;
                out.push(char::from_u32(v).expect("two hex digits are a valid scalar"));
            }
            'U' => {
                let v = self.hex(8)?;
                match char::from_u32(v) {
                    Some(ch) => out.push(ch),
                    None => return self.fail("invalid \\U escape"),
                }
            }
            'u' => {
                let hi = self.hex(4)?;
                let code = if (0xD800..0xDC00).contains(&hi) {
                    if !(self.eat_keyword("\\u")) {
                        return self.fail("unpaired surrogate");
                    }
                    let lo = self.hex(4)?;
                    if !(0xDC00..0xE000).contains(&lo) {
                        return self.fail("invalid low surrogate");
                    }
                    0x10000 + ((hi - 0xD800) << 10) + (lo - 0xDC00)
                } else {
                    hi
                };
                match char::from_u32(code) {
                    Some(ch) => out.push(ch),
                    None => return self.fail("invalid \\u escape"),
                }
            }
            other => {
                out.push('\\');
                out.push(other);
            }
        }
        Ok(())
    }

    fn hex(&mut self, digits: usize) -> Result<u32, ParseFailure> {
        let end = self.pos + digits;
        let chunk = self.src.get(self.pos..end);
        match chunk.and_then(|s| u32::from_str_radix(s, 16).ok().filter(|_| s.chars().all(|c| c.is_ascii_hexdigit()))) {
            Some(v) => {
                self.pos = end;
                Ok(v)
            }
            None => self.fail(format!("expected {digits} hex digits")),
        }
    }
}
