//! Flat key=value configuration files: UTF-8 lines, '#' comments.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::HarnessError;

#[derive(Clone, Debug, Default)]
pub struct KeyValueConfig {
    entries: BTreeMap<String, String>,
}

impl KeyValueConfig {
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                HarnessError::Config(format!("line {}: expected key=value", lineno + 1))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(HarnessError::Config(format!("line {}: empty key", lineno + 1)));
            }
            entries.insert(key.to_string(), value.trim().to_string());
        }
        Ok(KeyValueConfig { entries })
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, HarnessError>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| HarnessError::Config(format!("bad value for '{key}': {e}"))),
        }
    }

    /// Comma-separated list value.
    pub fn get_list<T: std::str::FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, HarnessError>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|e| HarnessError::Config(format!("bad value for '{key}': {e}")))
                })
                .collect::<Result<Vec<T>, _>>()
                .map(Some),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_values_comments_and_whitespace() {
        let cfg = KeyValueConfig::parse(
            "epochs = 12\n# full comment\nlr=0.05 # trailing\n\nsweep = 2, 4, 8\n",
        )
        .unwrap();
        assert_eq!(cfg.get_parsed::<usize>("epochs").unwrap(), Some(12));
        assert_eq!(cfg.get_parsed::<f64>("lr").unwrap(), Some(0.05));
        assert_eq!(cfg.get_list::<f64>("sweep").unwrap(), Some(vec![2.0, 4.0, 8.0]));
        assert_eq!(cfg.get("missing"), None);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(KeyValueConfig::parse("no equals sign").is_err());
        assert!(KeyValueConfig::parse("= value").is_err());
        assert!(KeyValueConfig::parse("lr=abc").unwrap().get_parsed::<f64>("lr").is_err());
    }
}
