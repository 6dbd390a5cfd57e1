//! Flat `key = value` configuration files with `#` comments.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    path: PathBuf,
    entries: BTreeMap<String, (usize, String)>,
}

impl ConfigFile {
    pub fn parse(text: &str, path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    path,
                    line: line_no,
                    reason: format!("expected `key = value`, got {line:?}"),
                });
            };
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(Error::Parse {
                    path,
                    line: line_no,
                    reason: "empty key".into(),
                });
            }
            if let Some((first, _)) = entries.insert(key.clone(), (line_no, value.trim().to_string())) {
                return Err(Error::Parse {
                    path,
                    line: line_no,
                    reason: format!("duplicate key `{key}` (first set on line {first})"),
                });
            }
        }
        Ok(Self { path, entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    /// Typed lookup; `Ok(None)` when the key is absent.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        let Some((line, value)) = self.entries.get(key) else {
            return Ok(None);
        };
        value.parse().map(Some).map_err(|_| Error::Parse {
            path: self.path.clone(),
            line: *line,
            reason: format!("invalid value {value:?} for `{key}`"),
        })
    }

    /// Fails on the first key not in `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        for (key, (line, _)) in &self.entries {
            if !allowed.contains(&key.as_str()) {
                return Err(Error::Parse {
                    path: self.path.clone(),
                    line: *line,
                    reason: format!("unknown key `{key}`"),
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_values() {
        let c = ConfigFile::parse("# header\nbatch_size = 32\n\nlearning_rate=0.01  # inline\n", "x.conf").unwrap();
        assert_eq!(c.get::<usize>("batch_size").unwrap(), Some(32));
        assert_eq!(c.get::<f64>("learning_rate").unwrap(), Some(0.01));
        assert_eq!(c.get::<f64>("missing").unwrap(), None);
    }

    #[test]
    fn errors_cite_lines() {
        assert!(matches!(ConfigFile::parse("a = 1\nnonsense\n", "x"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(ConfigFile::parse("a = 1\na = 2\n", "x"), Err(Error::Parse { line: 2, .. })));
        let c = ConfigFile::parse("n = many\n", "x").unwrap();
        assert!(matches!(c.get::<usize>("n"), Err(Error::Parse { line: 1, .. })));
        assert!(c.check_keys(&["m"]).is_err());
        assert!(c.check_keys(&["n"]).is_ok());
    }
}
