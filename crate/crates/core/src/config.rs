//! Flat `key = value` configuration text.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Keys are normalized so `batch-size` and `batch_size` are the same key.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KvEntry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

pub fn normalize_key(key: &str) -> String {
    key.trim().replace('-', "_")
}

/// Parses config text; a key given twice is an error naming both lines.
pub fn parse_kv(text: &str) -> Result<Vec<KvEntry>> {
    let mut out: Vec<KvEntry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (k, v) = content.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "line {line}: expected `key = value`, got `{content}`"
            ))
        })?;
        let key = normalize_key(k);
        if key.is_empty() {
            return Err(Error::Config(format!("line {line}: empty key")));
        }
        if let Some(prev) = out.iter().find(|e| e.key == key) {
            return Err(Error::Config(format!(
                "duplicate key `{key}` on lines {} and {line}",
                prev.line
            )));
        }
        out.push(KvEntry {
            key,
            value: v.trim().to_string(),
            line,
        });
    }
    Ok(out)
}

pub fn format_kv<K: Display, V: Display>(pairs: impl IntoIterator<Item = (K, V)>) -> String {
    pairs
        .into_iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

/// Parses one value, naming the key and expected type on failure.
pub fn parse_value<T: FromStr>(key: &str, value: &str, expected: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("key `{key}`: expected {expected}, got `{value}`")))
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "key `{key}`: expected bool, got `{value}`"
        ))),
    }
}

/// Comma-separated list, e.g. `1,2,2`.
pub fn parse_list<T: FromStr>(key: &str, value: &str, expected: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|v| parse_value(key, v, expected))
        .collect()
}

pub fn parse_array3(key: &str, value: &str) -> Result<[usize; 3]> {
    let v: Vec<usize> = parse_list(key, value, "three comma-separated integers")?;
    v.try_into().map_err(|_| {
        Error::Config(format!(
            "key `{key}`: expected three comma-separated integers, got `{value}`"
        ))
    })
}

pub fn join<T: Display>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

/// A block of settings addressable by flat keys.
pub trait ConfigSection {
    /// Current `(key, value)` pairs in a stable order.
    fn entries(&self) -> Vec<(&'static str, String)>;

    /// Sets `key` if this section owns it; returns whether it did.
    fn set(&mut self, key: &str, value: &str) -> Result<bool>;

    fn apply(&mut self, entries: &[KvEntry]) -> Result<()> {
        for e in entries {
            if !self.set(&e.key, &e.value)? {
                return Err(Error::Config(format!(
                    "unknown key `{}` on line {}",
                    e.key, e.line
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_normalizes_keys() {
        let e = parse_kv("# header\nlr = 1e-3  # trailing\n\nbatch-size=4\n").unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!(
            (e[0].key.as_str(), e[0].value.as_str(), e[0].line),
            ("lr", "1e-3", 2)
        );
        assert_eq!(
            (e[1].key.as_str(), e[1].value.as_str(), e[1].line),
            ("batch_size", "4", 4)
        );
    }

    #[test]
    fn duplicate_key_names_both_lines() {
        let msg = parse_kv("lr = 1\nseed = 2\nlr = 3\n")
            .unwrap_err()
            .to_string();
        assert!(
            msg.contains("`lr`") && msg.contains("1") && msg.contains("3"),
            "{msg}"
        );
    }

    #[test]
    fn type_errors_name_key_and_type() {
        let msg = parse_value::<f64>("lr", "abc", "float")
            .unwrap_err()
            .to_string();
        assert!(msg.contains("lr") && msg.contains("float"), "{msg}");
        assert!(parse_array3("encoder_blocks", "1,2").is_err());
        assert_eq!(parse_array3("encoder_blocks", "1, 2,2").unwrap(), [1, 2, 2]);
    }

    #[test]
    fn format_round_trips() {
        let text = format_kv([("a", "1"), ("b", "x,y")]);
        let e = parse_kv(&text).unwrap();
        assert_eq!(e[1].value, "x,y");
    }
}
