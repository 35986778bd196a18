//! Plain-text `key = value` documents with `[section]` headers.
//!
//! Keys before the first header live in the unnamed section `""`. Lines
//! starting with `#` are comments.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvDoc {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl KvDoc {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = Self::new();
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config(format!("line {}: unterminated section header", n + 1)))?;
                section = name.trim().to_string();
                doc.sections.entry(section.clone()).or_default();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", n + 1)));
            }
            doc.set(&section, k, v.trim());
        }
        Ok(doc)
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl ToString) {
        self.sections
            .entry(section.to_string())
            .or_default()
            .insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(String::as_str)
    }

    /// Parsed value, `Ok(None)` when absent.
    pub fn get_parsed<V: FromStr>(&self, section: &str, key: &str) -> Result<Option<V>> {
        match self.get(section, key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("[{section}] {key}: cannot parse `{raw}`"))),
        }
    }

    pub fn require<V: FromStr>(&self, section: &str, key: &str) -> Result<V> {
        self.get_parsed(section, key)?
            .ok_or_else(|| Error::Config(format!("[{section}] {key} is required")))
    }

    /// Comma-separated list.
    pub fn get_list<V: FromStr>(&self, section: &str, key: &str) -> Result<Option<Vec<V>>> {
        let Some(raw) = self.get(section, key) else {
            return Ok(None);
        };
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::Config(format!("[{section}] {key}: cannot parse `{s}`")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    /// Overlays `other` on top of `self`; values in `other` win.
    pub fn merge(&mut self, other: &KvDoc) {
        for (sec, kv) in &other.sections {
            for (k, v) in kv {
                self.set(sec, k, v);
            }
        }
    }

    pub fn sections(&self) -> impl Iterator<Item = (&str, &BTreeMap<String, String>)> {
        self.sections.iter().map(|(k, v)| (k.as_str(), v))
    }
}

impl fmt::Display for KvDoc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (sec, kv) in &self.sections {
            if kv.is_empty() {
                continue;
            }
            if !sec.is_empty() {
                if !first {
                    writeln!(f)?;
                }
                writeln!(f, "[{sec}]")?;
            }
            for (k, v) in kv {
                writeln!(f, "{k} = {v}")?;
            }
            first = false;
        }
        Ok(())
    }
}

pub fn join_list<V: fmt::Display>(items: &[V]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}
