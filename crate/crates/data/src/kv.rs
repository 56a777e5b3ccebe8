//! Line-oriented `key=value` text shared by every config and metadata file.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::DataError;

/// Parsed `key=value` lines. Blank lines and `#` comments are skipped;
/// duplicate keys are rejected.
#[derive(Clone, Debug, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self, DataError> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| DataError::Parse(format!("line {}: expected key=value, got '{line}'", n + 1)))?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(DataError::Parse(format!("line {}: empty key", n + 1)));
            }
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(DataError::Parse(format!("line {}: duplicate key '{key}'", n + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn take(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    /// Overwrites `slot` when `key` is present.
    pub fn take_parsed<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<(), DataError> {
        if let Some(v) = self.entries.remove(key) {
            *slot = v.parse().map_err(|_| DataError::Parse(format!("bad value '{v}' for key '{key}'")))?;
        }
        Ok(())
    }

    pub fn require<T: FromStr>(&mut self, key: &str) -> Result<T, DataError> {
        let v = self.entries.remove(key).ok_or_else(|| DataError::Parse(format!("missing key '{key}'")))?;
        v.parse().map_err(|_| DataError::Parse(format!("bad value '{v}' for key '{key}'")))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    /// Errors if any key was left unconsumed.
    pub fn finish(self) -> Result<(), DataError> {
        match self.entries.keys().next() {
            None => Ok(()),
            Some(k) => Err(DataError::Config(format!("unknown key '{k}'"))),
        }
    }
}
