//! Whitespace + edge-punctuation tokenizer with byte offsets.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    /// Byte offset of the first character.
    pub start: usize,
    /// Byte offset one past the last character.
    pub end: usize,
}

pub fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || matches!(c, '“' | '”' | '‘' | '’' | '«' | '»' | '–' | '—' | '…' | '¿' | '¡' | '·')
}

fn push(out: &mut Vec<Token>, text: &str, start: usize, end: usize) {
    out.push(Token {
        text: text[start..end].to_string(),
        start,
        end,
    });
}

/// Split on whitespace, then peel punctuation characters off both ends of
/// each piece as single-character tokens. Interior punctuation stays put.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let mut chunk_start: Option<usize> = None;
    let mut chunks = Vec::new();
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = chunk_start.take() {
                chunks.push((s, i));
            }
        } else if chunk_start.is_none() {
            chunk_start = Some(i);
        }
    }
    if let Some(s) = chunk_start {
        chunks.push((s, text.len()));
    }
    for (s, e) in chunks {
        let piece = &text[s..e];
        let chars: Vec<(usize, char)> = piece.char_indices().collect();
        let mut lo = 0;
        while lo < chars.len() && is_punct(chars[lo].1) {
            lo += 1;
        }
        let mut hi = chars.len();
        while hi > lo && is_punct(chars[hi - 1].1) {
            hi -= 1;
        }
        let byte = |k: usize| if k == chars.len() { e } else { s + chars[k].0 };
        for k in 0..lo {
            push(&mut out, text, byte(k), byte(k + 1));
        }
        if hi > lo {
            push(&mut out, text, byte(lo), byte(hi));
        }
        for k in hi.max(lo)..chars.len() {
            push(&mut out, text, byte(k), byte(k + 1));
        }
    }
    out
}

/// Byte offset of the `n`-th character (or `text.len()` at the end).
pub fn char_to_byte(text: &str, n: usize) -> Option<usize> {
    if n == text.chars().count() {
        return Some(text.len());
    }
    text.char_indices().nth(n).map(|(b, _)| b)
}
