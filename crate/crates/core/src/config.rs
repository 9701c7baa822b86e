//! Key-value text configuration: `key = value` lines with `#` comments.
//! The CLI merges built-in defaults, then a config file, then command
//! line flags, and echoes the effective result to a `run.cfg` artifact.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigMap {
    entries: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Format(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::Format(format!("line {}: empty key", lineno + 1)));
            }
            entries.insert(key.to_string(), v.trim().to_string());
        }
        Ok(ConfigMap { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    /// Overlays `other` on top of `self` (other wins on conflicts).
    pub fn merge(&mut self, other: &ConfigMap) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Format(format!("missing config key `{key}`")))
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(s) => s
                .parse()
                .map(Some)
                .map_err(|_| Error::Format(format!("bad value `{s}` for key `{key}`"))),
        }
    }

    pub fn get_or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get_parsed(key)?.unwrap_or(default))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    /// Writes the effective configuration, sorted by key.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let cfg = ConfigMap::parse(
            "# header\nlambda = 0.01  # inline\n\n  epochs=30\nname = base run\n",
        )
        .unwrap();
        assert_eq!(cfg.get("lambda"), Some("0.01"));
        assert_eq!(cfg.get("epochs"), Some("30"));
        assert_eq!(cfg.get("name"), Some("base run"));
        assert_eq!(cfg.get_or::<f64>("lambda", 1.0).unwrap(), 0.01);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(ConfigMap::parse("just words\n").is_err());
        assert!(ConfigMap::parse("= value\n").is_err());
    }

    #[test]
    fn merge_precedence() {
        let mut base = ConfigMap::parse("a = 1\nb = 2\n").unwrap();
        let over = ConfigMap::parse("b = 9\nc = 3\n").unwrap();
        base.merge(&over);
        assert_eq!(base.get("a"), Some("1"));
        assert_eq!(base.get("b"), Some("9"));
        assert_eq!(base.get("c"), Some("3"));
    }

    #[test]
    fn bad_typed_value_is_an_error() {
        let cfg = ConfigMap::parse("epochs = many\n").unwrap();
        assert!(cfg.get_or::<usize>("epochs", 1).is_err());
    }

    #[test]
    fn write_round_trips() {
        let mut cfg = ConfigMap::new();
        cfg.set("lambda", 0.01);
        cfg.set("seed", 7u64);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        cfg.write(&path).unwrap();
        let back = ConfigMap::load(&path).unwrap();
        assert_eq!(back, cfg);
    }
}
