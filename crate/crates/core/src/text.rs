//! Shared token and number scanning used by the lexical scorer, numeric
//! verification and token-F1.

use std::collections::BTreeSet;

/// Lowercased tokens with punctuation removed. Apostrophes are dropped
/// ("patient's" -> "patients"); any other non-alphanumeric char splits.
pub fn tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else if ch == '\'' || ch == '\u{2019}' {
            continue;
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

pub fn token_set(text: &str) -> BTreeSet<String> {
    tokens(text).into_iter().collect()
}

/// A decimal-number token located in free text.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NumberToken {
    pub value: f64,
    pub start: usize,
    pub end: usize,
}

/// All maximal decimal-number tokens: digits with an optional single decimal
/// point and an optional leading sign. A sign only counts when it is not glued
/// to a preceding letter or digit ("covid-19" yields 19, not -19).
pub fn number_tokens(text: &str) -> Vec<NumberToken> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let starts_digit = bytes[i].is_ascii_digit();
        let starts_signed = (bytes[i] == b'-' || bytes[i] == b'+')
            && i + 1 < bytes.len()
            && bytes[i + 1].is_ascii_digit()
            && (i == 0 || !bytes[i - 1].is_ascii_alphanumeric());
        if !(starts_digit || starts_signed) {
            i += 1;
            continue;
        }
        let start = i;
        if starts_signed {
            i += 1;
        }
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
        if i + 1 < bytes.len() && bytes[i] == b'.' && bytes[i + 1].is_ascii_digit() {
            i += 1;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
        }
        // slice is pure ASCII, always parses
        if let Ok(value) = text[start..i].parse::<f64>() {
            out.push(NumberToken {
                value,
                start,
                end: i,
            });
        }
    }
    out
}

pub fn first_number(text: &str) -> Option<NumberToken> {
    number_tokens(text).into_iter().next()
}

/// Collapse runs of whitespace to single spaces and trim.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}
