//! Flat `key=value` text files, used for manifests and config files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys keep their
//! insertion order when written.

use std::path::Path;

use crate::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvFile {
    entries: Vec<(String, String)>,
}

impl KvFile {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sets `key`, replacing an existing value in place.
    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((key, value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("missing key `{key}`")))
    }

    pub fn parse_value<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`"))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KvFile::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected key=value, got `{line}`"),
            })?;
            kv.set(k.trim(), v.trim());
        }
        Ok(kv)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_string()).map_err(|e| Error::io(path, e))
    }
}

impl std::fmt::Display for KvFile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_skips_comments_and_keeps_last_value() {
        let kv = KvFile::parse("# c\nseed = 3\n\ncap=4\nseed=5\n").unwrap();
        assert_eq!(kv.get("seed"), Some("5"));
        assert_eq!(kv.parse_value::<u32>("cap").unwrap(), Some(4));
        assert_eq!(kv.to_string(), "seed=5\ncap=4\n");
    }

    #[test]
    fn parse_rejects_bare_words() {
        let err = KvFile::parse("ok=1\nnope\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }
}
