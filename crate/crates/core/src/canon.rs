//! Canonical-form normalization for hypothesis texts.
//!
//! The canonical form is what equivalence testing and merging operate on:
//! lowercase, single-spaced, numerals reduced to a canonical decimal form,
//! and spacing stripped around arithmetic operators. The transform is total
//! and idempotent.

use sha2::{Digest, Sha256};

const OPERATORS: &[char] = &['+', '-', '*', '/', '=', '^'];

/// Normalizes `text` into its canonical form.
pub fn canonicalize(text: &str) -> String {
    let lowered = text.to_lowercase();
    let collapsed = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    let renumbered = normalize_numerals(&collapsed);
    strip_operator_spacing(&renumbered)
}

/// Hex SHA-256 of a canon string; the stable key used by embedding files
/// and relation label caches.
pub fn canon_hash(canon: &str) -> String {
    let digest = Sha256::digest(canon.as_bytes());
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

/// Whitespace tokens of a canon string, as a set.
pub fn token_set(canon: &str) -> std::collections::BTreeSet<&str> {
    canon.split_whitespace().collect()
}

/// Splits a single-equation canon into (head, rhs); `None` unless exactly
/// one '=' is present.
pub fn assignment_parts(canon: &str) -> Option<(&str, &str)> {
    let mut it = canon.splitn(2, '=');
    let head = it.next()?;
    let rhs = it.next()?;
    if rhs.contains('=') {
        return None;
    }
    Some((head.trim(), rhs.trim()))
}

pub fn parse_number(s: &str) -> Option<f64> {
    s.parse::<f64>().ok().filter(|x| x.is_finite())
}

/// Numeric equation claims inside a canon string: every token of the form
/// `head=value` with a numeric value, plus the whole string when it is one
/// equation ("total cost = 12" canonicalizes to "total cost=12").
pub fn equation_claims(canon: &str) -> Vec<(&str, f64)> {
    let mut out = Vec::new();
    for token in canon.split_whitespace() {
        if let Some((head, rhs)) = assignment_parts(token) {
            if let Some(v) = parse_number(rhs) {
                if !head.is_empty() {
                    out.push((head, v));
                }
            }
        }
    }
    if out.is_empty() {
        if let Some((head, rhs)) = assignment_parts(canon) {
            if let Some(v) = parse_number(rhs) {
                if !head.is_empty() {
                    out.push((head, v));
                }
            }
        }
    }
    out
}

/// Rewrites every maximal numeric run into canonical decimal form:
/// leading zeros stripped, trailing fractional zeros stripped, a bare
/// trailing dot dropped, and a leading dot given an explicit zero.
fn normalize_numerals(s: &str) -> String {
    let chars: Vec<char> = s.chars().collect();
    let mut out = String::with_capacity(s.len());
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let starts_number = c.is_ascii_digit()
            || (c == '.' && i + 1 < chars.len() && chars[i + 1].is_ascii_digit());
        if !starts_number {
            out.push(c);
            i += 1;
            continue;
        }
        let mut int_part = String::new();
        while i < chars.len() && chars[i].is_ascii_digit() {
            int_part.push(chars[i]);
            i += 1;
        }
        let mut frac_part = String::new();
        if i < chars.len() && chars[i] == '.' {
            // Consume the dot when digits follow ("0.5"), or swallow a bare
            // trailing dot after digits ("4." -> "4") -- but never when yet
            // another dot follows, or repeated passes would keep eating one
            // dot at a time and break idempotence.
            let next = chars.get(i + 1);
            let has_frac_digit = next.is_some_and(|c| c.is_ascii_digit());
            if has_frac_digit || (!int_part.is_empty() && next != Some(&'.')) {
                i += 1;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    frac_part.push(chars[i]);
                    i += 1;
                }
            }
        }
        out.push_str(&canonical_number(&int_part, &frac_part));
    }
    out
}

fn canonical_number(int_part: &str, frac_part: &str) -> String {
    let int_trimmed = int_part.trim_start_matches('0');
    let int_canon = if int_trimmed.is_empty() { "0" } else { int_trimmed };
    let frac_trimmed = frac_part.trim_end_matches('0');
    if frac_trimmed.is_empty() {
        int_canon.to_string()
    } else {
        format!("{int_canon}.{frac_trimmed}")
    }
}

fn strip_operator_spacing(s: &str) -> String {
    let chars: Vec<char> = s.chars().collect();
    let mut out = String::with_capacity(s.len());
    for (i, &c) in chars.iter().enumerate() {
        if c == ' ' {
            let prev_is_op = out.chars().last().is_some_and(|p| OPERATORS.contains(&p));
            let next_is_op = chars.get(i + 1).is_some_and(|n| OPERATORS.contains(n));
            if prev_is_op || next_is_op {
                continue;
            }
        }
        out.push(c);
    }
    out
}
