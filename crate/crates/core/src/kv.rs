//! `key=value` text, one pair per line, `#` starts a comment.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Where a value came from, for error messages.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Origin {
    Line(usize),
    Flag,
}

impl Display for Origin {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Origin::Line(n) => write!(f, "line {n}"),
            Origin::Flag => f.write_str("command line"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub origin: Origin,
    pub key: String,
    pub value: String,
}

pub fn parse(text: &str) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", i + 1)))?;
        out.push(Entry {
            origin: Origin::Line(i + 1),
            key: key.trim().to_string(),
            value: value.trim().to_string(),
        });
    }
    Ok(out)
}

pub fn value<V: FromStr>(entry: &Entry) -> Result<V> {
    entry.value.parse().map_err(|_| {
        Error::Config(format!(
            "{}: `{}` has invalid value `{}` (expected {})",
            entry.origin,
            entry.key,
            entry.value,
            std::any::type_name::<V>()
        ))
    })
}

pub fn list(entry: &Entry) -> Result<Vec<usize>> {
    entry
        .value
        .split(',')
        .map(|s| {
            s.trim().parse().map_err(|_| {
                Error::Config(format!(
                    "{}: `{}` expects a comma-separated list of integers, got `{}`",
                    entry.origin, entry.key, entry.value
                ))
            })
        })
        .collect()
}

pub fn join(values: &[usize]) -> String {
    values.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Looks up a required key in a flat entry list.
pub fn require<'a>(entries: &'a [Entry], key: &str) -> Result<&'a Entry> {
    entries
        .iter()
        .rev()
        .find(|e| e.key == key)
        .ok_or_else(|| Error::Config(format!("missing key `{key}`")))
}
