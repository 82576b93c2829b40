//! C/C++ lexer: comment stripping and maximal-munch tokenization.
//!
//! No preprocessing and no AST construction; the downstream pipeline only
//! consumes the flat token sequence.

use serde::Serialize;

pub mod tables;

/// Classification of a lexical token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum TokenKind {
    Keyword,
    Punctuation,
    Literal,
    Identifier,
    Unknown,
}

/// One lexical unit of C/C++ code.
///
/// `span` is a byte range into the comment-stripped source.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LexToken {
    pub text: String,
    pub kind: TokenKind,
    pub start: usize,
    pub end: usize,
}

impl LexToken {
    /// JSON-lines debug representation: `{text, kind, start, end}`.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("token serialization cannot fail")
    }
}

/// Remove `//...` and `/*...*/` comments, replacing each comment region with
/// a single space. Comment-like text inside string and character literals is
/// preserved. Newlines outside comments are preserved. Idempotent.
///
/// An unterminated block comment is stripped to end of input with a warning.
pub fn strip_comments(source: &str) -> String {
    let bytes = source.as_bytes();
    let mut out = String::with_capacity(source.len());
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'/' if i + 1 < bytes.len() && bytes[i + 1] == b'/' => {
                // line comment: replaced by one space, newline kept
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
                out.push(' ');
            }
            b'/' if i + 1 < bytes.len() && bytes[i + 1] == b'*' => {
                let mut closed = false;
                let mut j = i + 2;
                while j < bytes.len() {
                    if bytes[j] == b'*' && j + 1 < bytes.len() && bytes[j + 1] == b'/' {
                        closed = true;
                        j += 2;
                        break;
                    }
                    j += 1;
                }
                if !closed {
                    log::warn!("unterminated block comment; stripped to end of input");
                    j = bytes.len();
                }
                out.push(' ');
                i = j;
            }
            q @ (b'"' | b'\'') => {
                // literal: copy verbatim up to the closing quote or end of line
                let lit_end = scan_literal(bytes, i, q);
                out.push_str(&source[i..lit_end]);
                i = lit_end;
            }
            _ => {
                let ch_len = utf8_len(bytes[i]);
                out.push_str(&source[i..i + ch_len]);
                i += ch_len;
            }
        }
    }
    out
}

/// Scan a string or character literal starting at the opening quote.
/// Returns the byte offset just past the closing quote, or past the last
/// byte before the newline / end of input if unterminated.
fn scan_literal(bytes: &[u8], start: usize, quote: u8) -> usize {
    let mut i = start + 1;
    while i < bytes.len() {
        match bytes[i] {
            b'\\' if i + 1 < bytes.len() => i += 2,
            b'\n' => return i,
            b if b == quote => return i + 1,
            _ => i += 1,
        }
    }
    bytes.len()
}

fn utf8_len(first: u8) -> usize {
    match first {
        0x00..=0x7f => 1,
        0xc0..=0xdf => 2,
        0xe0..=0xef => 3,
        _ => 4,
    }
}

fn is_ident_start(b: u8) -> bool {
    b.is_ascii_alphabetic() || b == b'_'
}

fn is_ident_continue(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_'
}

/// Tokenize C/C++ source into classified tokens. Comments are stripped
/// first; spans refer to the comment-stripped source (see [`lex_stripped`]).
pub fn lex(source: &str) -> Vec<LexToken> {
    let stripped = strip_comments(source);
    lex_stripped(&stripped)
}

/// Tokenize source that has already been comment-stripped.
pub fn lex_stripped(source: &str) -> Vec<LexToken> {
    let bytes = source.as_bytes();
    let tables = tables::token_tables();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        if b.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        if is_ident_start(b) {
            let start = i;
            while i < bytes.len() && is_ident_continue(bytes[i]) {
                i += 1;
            }
            let text = &source[start..i];
            let kind = if tables.is_keyword(text) {
                TokenKind::Keyword
            } else {
                TokenKind::Identifier
            };
            tokens.push(token(text, kind, start, i));
            continue;
        }
        if b.is_ascii_digit() || (b == b'.' && i + 1 < bytes.len() && bytes[i + 1].is_ascii_digit())
        {
            // pp-number munch: digits, letters, dots, and exponent signs
            let start = i;
            i += 1;
            while i < bytes.len() {
                let c = bytes[i];
                if is_ident_continue(c) || c == b'.' {
                    i += 1;
                } else if (c == b'+' || c == b'-')
                    && matches!(bytes[i - 1], b'e' | b'E' | b'p' | b'P')
                {
                    i += 1;
                } else {
                    break;
                }
            }
            tokens.push(token(&source[start..i], TokenKind::Literal, start, i));
            continue;
        }
        if b == b'"' || b == b'\'' {
            let start = i;
            let end = scan_literal(bytes, i, b);
            if end == bytes.len() || bytes[end.saturating_sub(1)] != b {
                log::warn!("unterminated literal at byte {start}; consumed to end of line");
            }
            tokens.push(token(&source[start..end], TokenKind::Literal, start, end));
            i = end;
            continue;
        }
        // punctuation, longest match first
        let mut matched = false;
        for len in (1..=3).rev() {
            if i + len <= bytes.len() {
                if let Some(text) = source.get(i..i + len) {
                    if tables.is_punctuation(text) {
                        tokens.push(token(text, TokenKind::Punctuation, i, i + len));
                        i += len;
                        matched = true;
                        break;
                    }
                }
            }
        }
        if matched {
            continue;
        }
        // anything else: a single unknown character
        let ch_len = utf8_len(b);
        let end = (i + ch_len).min(bytes.len());
        tokens.push(token(&source[i..end], TokenKind::Unknown, i, end));
        i = end;
    }
    tokens
}

fn token(text: &str, kind: TokenKind, start: usize, end: usize) -> LexToken {
    LexToken {
        text: text.to_string(),
        kind,
        start,
        end,
    }
}
