//! Flat `key = value` configuration text with `[section]` headers.
//!
//! Keys are addressed as `section.key` (or just `key` before any header).
//! Consumers take the keys they understand; [`Config::finish`] then rejects
//! whatever is left, naming the key and its line.

use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: cannot parse `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { key: String, line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { key: String, line: usize },
    #[error("line {line}: key `{key}` has invalid value `{value}` (expected {expected})")]
    BadValue {
        key: String,
        line: usize,
        value: String,
        expected: &'static str,
    },
    #[error("{0}")]
    Contradiction(String),
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    key: String,
    value: String,
    line: usize,
    used: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    entries: Vec<Entry>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut section = String::new();
        let mut entries: Vec<Entry> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let s = raw.split('#').next().unwrap_or("").trim();
            if s.is_empty() {
                continue;
            }
            if let Some(rest) = s.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                    line,
                    text: raw.to_string(),
                })?;
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = s.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                text: raw.to_string(),
            })?;
            let k = k.trim();
            if k.is_empty() || k.contains(char::is_whitespace) {
                return Err(ConfigError::Syntax {
                    line,
                    text: raw.to_string(),
                });
            }
            let key = if section.is_empty() {
                k.to_string()
            } else {
                format!("{section}.{k}")
            };
            if entries.iter().any(|e| e.key == key) {
                return Err(ConfigError::Duplicate { key, line });
            }
            entries.push(Entry {
                key,
                value: v.trim().to_string(),
                line,
                used: false,
            });
        }
        Ok(Config { entries })
    }

    pub fn from_pairs(pairs: &[(&str, &str)]) -> Self {
        Config {
            entries: pairs
                .iter()
                .map(|(k, v)| Entry {
                    key: k.to_string(),
                    value: v.to_string(),
                    line: 0,
                    used: false,
                })
                .collect(),
        }
    }

    /// Sets or replaces a key (used for command-line overrides).
    pub fn set(&mut self, key: &str, value: &str) {
        match self.entries.iter_mut().find(|e| e.key == key) {
            Some(e) => e.value = value.to_string(),
            None => self.entries.push(Entry {
                key: key.to_string(),
                value: value.to_string(),
                line: 0,
                used: false,
            }),
        }
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.iter().any(|e| e.key == key)
    }

    fn take(&mut self, key: &str) -> Option<(String, usize)> {
        self.entries.iter_mut().find(|e| e.key == key).map(|e| {
            e.used = true;
            (e.value.clone(), e.line)
        })
    }

    pub fn str_or(&mut self, key: &str, default: &str) -> String {
        self.take(key).map(|(v, _)| v).unwrap_or_else(|| default.to_string())
    }

    fn parsed<T: std::str::FromStr>(&mut self, key: &str, default: T, expected: &'static str) -> Result<T, ConfigError> {
        match self.take(key) {
            None => Ok(default),
            Some((v, line)) => v.parse().map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                line,
                value: v,
                expected,
            }),
        }
    }

    pub fn f64_or(&mut self, key: &str, default: f64) -> Result<f64, ConfigError> {
        self.parsed(key, default, "a real number")
    }

    pub fn usize_or(&mut self, key: &str, default: usize) -> Result<usize, ConfigError> {
        self.parsed(key, default, "a non-negative integer")
    }

    pub fn u64_or(&mut self, key: &str, default: u64) -> Result<u64, ConfigError> {
        self.parsed(key, default, "a non-negative integer")
    }

    pub fn bool_or(&mut self, key: &str, default: bool) -> Result<bool, ConfigError> {
        self.parsed(key, default, "true or false")
    }

    pub fn list_or(&mut self, key: &str, default: &[&str]) -> Vec<String> {
        match self.take(key) {
            None => default.iter().map(|s| s.to_string()).collect(),
            Some((v, _)) => v
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect(),
        }
    }

    /// Errors on the first key nobody consumed.
    pub fn finish(&self) -> Result<(), ConfigError> {
        match self.entries.iter().filter(|e| !e.used).min_by_key(|e| e.line) {
            Some(e) => Err(ConfigError::UnknownKey {
                key: e.key.clone(),
                line: e.line,
            }),
            None => Ok(()),
        }
    }

    /// SHA-256 over sorted `key=value` lines; independent of key order and comments.
    pub fn hash(&self) -> String {
        let mut lines: Vec<String> = self.entries.iter().map(|e| format!("{}={}", e.key, e.value)).collect();
        lines.sort();
        let mut h = Sha256::new();
        for l in lines {
            h.update(l.as_bytes());
            h.update(b"\n");
        }
        crate::rng::hex(&h.finalize())
    }

    /// Canonical text form: sorted `key = value` lines grouped under section headers.
    pub fn canonical(&self) -> String {
        let mut pairs: Vec<(&str, &str)> = self.entries.iter().map(|e| (e.key.as_str(), e.value.as_str())).collect();
        pairs.sort();
        let mut out = String::new();
        let mut current = "";
        for (k, v) in pairs {
            let (sec, name) = k.rsplit_once('.').unwrap_or(("", k));
            if sec != current {
                out.push_str(&format!("[{sec}]\n"));
                current = sec;
            }
            out.push_str(&format!("{name} = {v}\n"));
        }
        out
    }
}
