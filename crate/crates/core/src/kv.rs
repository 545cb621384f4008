//! Plain `key = value` configuration files with optional `[section]` headers.
//!
//! Keys inside a section are addressed as `section.key`. `#` and `;` start
//! comment lines. Every key must be consumed, so typos surface as errors.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvConfig {
    entries: BTreeMap<String, (usize, String)>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config(format!("line {}: unterminated section header", n + 1)))?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", n + 1)));
            }
            let full = if section.is_empty() {
                key.to_string()
            } else {
                format!("{section}.{key}")
            };
            if entries.insert(full.clone(), (n + 1, value.trim().to_string())).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{full}`", n + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Removes and parses `key`, if present.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|e| Error::Config(format!("line {line}: bad value for `{key}`: {e}"))),
        }
    }

    /// Overwrites `*slot` if `key` is present.
    pub fn take_into<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Splits off every `section.*` key as its own config with the prefix stripped.
    pub fn section(&mut self, name: &str) -> KvConfig {
        let prefix = format!("{name}.");
        let keys: Vec<String> = self.entries.keys().filter(|k| k.starts_with(&prefix)).cloned().collect();
        let mut out = KvConfig::default();
        for k in keys {
            let v = self.entries.remove(&k).expect("key listed above");
            out.entries.insert(k[prefix.len()..].to_string(), v);
        }
        out
    }

    /// Errors if any key was left unconsumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((k, (line, _))) => Err(Error::Config(format!("line {line}: unknown key `{k}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_and_comments() {
        let mut c = KvConfig::parse("# top\nseed = 7\n\n[train]\nlearning_rate=0.01\n; note\nmode = full\n").unwrap();
        assert_eq!(c.take::<u64>("seed").unwrap(), Some(7));
        let mut t = c.section("train");
        assert_eq!(t.take::<f64>("learning_rate").unwrap(), Some(0.01));
        assert_eq!(t.take::<String>("mode").unwrap().as_deref(), Some("full"));
        t.finish().unwrap();
        c.finish().unwrap();
    }

    #[test]
    fn unknown_and_duplicate_keys() {
        let mut c = KvConfig::parse("a = 1\nb = 2\n").unwrap();
        c.take::<u32>("a").unwrap();
        let err = c.finish().unwrap_err().to_string();
        assert!(err.contains("unknown key `b`") && err.contains("line 2"), "{err}");
        assert!(KvConfig::parse("a = 1\na = 2").is_err());
        assert!(KvConfig::parse("[x\n").is_err());
        assert!(KvConfig::parse("novalue\n").is_err());
    }

    #[test]
    fn bad_value_names_the_key() {
        let mut c = KvConfig::parse("steps = many").unwrap();
        let err = c.take::<usize>("steps").unwrap_err().to_string();
        assert!(err.contains("steps") && err.contains("line 1"), "{err}");
    }
}
