//! Line-based `key = value` files with `#` comments.

use std::fmt::Display;
use std::str::FromStr;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected key=value, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for {key}: {detail}")]
    BadValue {
        line: usize,
        key: String,
        detail: String,
    },
    #[error("line {line}: duplicate key {key:?}")]
    Duplicate { line: usize, key: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Something that can be configured one key at a time.
pub trait KeyValueConfig: Default {
    /// Returns `Ok(false)` for keys this type does not know.
    fn set(&mut self, key: &str, value: &str) -> Result<bool, String>;

    /// Checks cross-field invariants after all keys are applied.
    fn validate(&self) -> Result<(), String> {
        Ok(())
    }

    fn to_pairs(&self) -> Vec<(&'static str, String)>;

    fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    /// Applies overrides from `text` on top of the current values.
    fn apply(&mut self, text: &str) -> Result<(), ConfigError> {
        let mut seen = std::collections::HashSet::new();
        for (key, value, line) in pairs(text)? {
            if !seen.insert(key.clone()) {
                return Err(ConfigError::Duplicate { line, key });
            }
            match self.set(&key, &value) {
                Ok(true) => {}
                Ok(false) => return Err(ConfigError::UnknownKey { line, key }),
                Err(detail) => return Err(ConfigError::BadValue { line, key, detail }),
            }
        }
        self.validate().map_err(ConfigError::Invalid)
    }

    fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        }
        s
    }
}

/// Splits into `(key, value, line number)` triples, skipping blanks and comments.
pub fn pairs(text: &str) -> Result<Vec<(String, String, usize)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: i + 1,
            text: raw.to_string(),
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            });
        }
        out.push((k.to_string(), v.to_string(), i + 1));
    }
    Ok(out)
}

/// Parses `value` into `slot`.
pub fn set_parsed<T>(slot: &mut T, value: &str) -> Result<bool, String>
where
    T: FromStr,
    T::Err: Display,
{
    *slot = value.parse().map_err(|e: T::Err| e.to_string())?;
    Ok(true)
}

/// Parses a comma-separated list.
pub fn parse_list<T>(value: &str) -> Result<Vec<T>, String>
where
    T: FromStr,
    T::Err: Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|e: T::Err| e.to_string()))
        .collect()
}
