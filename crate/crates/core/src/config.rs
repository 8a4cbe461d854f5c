//! Flat `name = value` configuration files.
//!
//! One assignment per line, `#` starts a comment, values are either a
//! single number (`inf` / `-inf` allowed) or a comma-separated list.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct KeyValueFile {
    values: BTreeMap<String, String>,
}

impl KeyValueFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::input(format!("line {}: expected `name = value`", lineno + 1))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::input(format!("line {}: empty key", lineno + 1)));
            }
            values.insert(key.to_string(), value.trim().to_string());
        }
        Ok(KeyValueFile { values })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    fn raw(&self, key: &str) -> Result<&str> {
        self.values
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::input(format!("missing key `{key}`")))
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        parse_f64(self.raw(key)?).map_err(|e| Error::input(format!("key `{key}`: {e}")))
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        if self.contains(key) {
            self.f64(key)
        } else {
            Ok(default)
        }
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.raw(key)?
            .parse::<usize>()
            .map_err(|e| Error::input(format!("key `{key}`: {e}")))
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        if self.contains(key) {
            self.usize(key)
        } else {
            Ok(default)
        }
    }

    pub fn f64_list(&self, key: &str) -> Result<Vec<f64>> {
        self.raw(key)?
            .split(',')
            .map(|tok| parse_f64(tok).map_err(|e| Error::input(format!("key `{key}`: {e}"))))
            .collect()
    }

    pub fn f64_list_or(&self, key: &str, default: &[f64]) -> Result<Vec<f64>> {
        if self.contains(key) {
            self.f64_list(key)
        } else {
            Ok(default.to_vec())
        }
    }
}

fn parse_f64(tok: &str) -> std::result::Result<f64, String> {
    let t = tok.trim();
    match t {
        "inf" | "+inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        _ => t.parse::<f64>().map_err(|e| format!("bad number `{t}`: {e}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_lists() {
        let kv = KeyValueFile::parse(
            "# header\nm = 1200.0\nb_lower = -inf, -3, 0.5 # trailing\n\nN = 35\n",
        )
        .unwrap();
        assert_eq!(kv.f64("m").unwrap(), 1200.0);
        assert_eq!(kv.usize("N").unwrap(), 35);
        let list = kv.f64_list("b_lower").unwrap();
        assert_eq!(list.len(), 3);
        assert!(list[0].is_infinite() && list[0] < 0.0);
        assert_eq!(list[2], 0.5);
    }

    #[test]
    fn rejects_bare_lines() {
        assert!(KeyValueFile::parse("novalue\n").is_err());
    }

    #[test]
    fn missing_key_is_input_error() {
        let kv = KeyValueFile::parse("a = 1\n").unwrap();
        assert!(kv.f64("b").unwrap_err().is_input());
    }
}
