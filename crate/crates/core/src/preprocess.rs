//! Lexical normalization of C/C++ source.
//!
//! Comments are removed with a small literal-aware scanner, then newlines,
//! tabs and runs of spaces are collapsed to single spaces. Trigraphs and C++11
//! raw string literals are not recognised; an unterminated string or
//! character literal runs to the end of input.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub strip_comments: bool,
    pub collapse_whitespace: bool,
    pub normalize_indent: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            strip_comments: true,
            collapse_whitespace: true,
            normalize_indent: true,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum State {
    Code,
    LineComment,
    BlockComment,
    Str,
    Char,
}

/// Removes `//` and `/* */` comments, leaving string and character literals
/// untouched. A removed comment becomes a single space unless the text
/// emitted so far is empty or already ends in whitespace, so neighbouring
/// tokens never fuse. The newline that ends a line comment is kept.
pub fn strip_comments(code: &str) -> String {
    let chars: Vec<char> = code.chars().collect();
    let mut out = String::with_capacity(code.len());
    let mut state = State::Code;
    let mut i = 0;

    let separate = |out: &mut String| {
        if out.chars().next_back().is_some_and(|c| !is_layout_space(c)) {
            out.push(' ');
        }
    };

    while i < chars.len() {
        let c = chars[i];
        let next = chars.get(i + 1).copied();
        match state {
            State::Code => match (c, next) {
                ('/', Some('/')) => {
                    separate(&mut out);
                    state = State::LineComment;
                    i += 2;
                    continue;
                }
                ('/', Some('*')) => {
                    separate(&mut out);
                    state = State::BlockComment;
                    i += 2;
                    continue;
                }
                ('"', _) => {
                    state = State::Str;
                    out.push(c);
                }
                ('\'', _) => {
                    state = State::Char;
                    out.push(c);
                }
                _ => out.push(c),
            },
            State::LineComment => match (c, next) {
                // backslash-newline splices the next line into the comment
                ('\\', Some('\n')) => {
                    i += 2;
                    continue;
                }
                ('\\', Some('\r')) if chars.get(i + 2) == Some(&'\n') => {
                    i += 3;
                    continue;
                }
                ('\n', _) => {
                    state = State::Code;
                    out.push(c);
                }
                _ => {}
            },
            State::BlockComment => {
                if c == '*' && next == Some('/') {
                    state = State::Code;
                    i += 2;
                    continue;
                }
            }
            State::Str | State::Char => {
                let close = if state == State::Str { '"' } else { '\'' };
                out.push(c);
                if c == '\\' {
                    if let Some(n) = next {
                        out.push(n);
                        i += 2;
                        continue;
                    }
                } else if c == close {
                    state = State::Code;
                }
            }
        }
        i += 1;
    }
    out
}

fn is_layout_space(c: char) -> bool {
    matches!(c, ' ' | '\t' | '\n' | '\r' | '\x0b' | '\x0c')
}

/// Replaces newlines and tabs with spaces, collapses runs of spaces into one
/// and trims both ends.
pub fn normalize_whitespace(code: &str) -> String {
    let mut out = String::with_capacity(code.len());
    for word in code.split(is_layout_space).filter(|w| !w.is_empty()) {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

/// Collapses runs of spaces/tabs at the start of each line into one space.
fn normalize_line_indent(code: &str) -> String {
    let mut out = String::with_capacity(code.len());
    for (i, line) in code.split('\n').enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let body = line.trim_start_matches([' ', '\t']);
        if body.len() != line.len() {
            out.push(' ');
        }
        out.push_str(body);
    }
    out
}

/// Comment stripping followed by whitespace normalization, as enabled by
/// `cfg`. With every flag on this is
/// `normalize_whitespace(strip_comments(code))` and is idempotent.
pub fn preprocess(code: &str, cfg: &PreprocessConfig) -> String {
    let stripped;
    let code = if cfg.strip_comments {
        stripped = strip_comments(code);
        stripped.as_str()
    } else {
        code
    };
    match (cfg.collapse_whitespace, cfg.normalize_indent) {
        (true, _) => normalize_whitespace(code),
        (false, true) => normalize_line_indent(code),
        (false, false) => code.to_string(),
    }
}
