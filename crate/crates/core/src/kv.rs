//! Plain-text `key=value` configuration format.
//!
//! One pair per line, `#` starts a comment, blank lines are ignored.
//! Serialization is canonical (keys sorted), so equal configurations hash
//! equally. Used for config files, run manifests and the config block
//! embedded in checkpoints.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Parse `key=value` text into an ordered map.
pub fn parse(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(at) => &raw[..at],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Format(format!(
                "line {}: expected key=value, got `{raw}`",
                lineno + 1
            )));
        };
        let key = key.trim().to_string();
        if key.is_empty() {
            return Err(Error::Format(format!("line {}: empty key", lineno + 1)));
        }
        if map.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(Error::Format(format!("line {}: duplicate key `{key}`", lineno + 1)));
        }
    }
    Ok(map)
}

/// Canonical serialization: sorted keys, one pair per line.
pub fn serialize(map: &BTreeMap<String, String>) -> String {
    let mut out = String::new();
    for (k, v) in map {
        out.push_str(k);
        out.push('=');
        out.push_str(v);
        out.push('\n');
    }
    out
}

/// Hex sha256 of canonical text.
pub fn content_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    let mut hex = String::with_capacity(64);
    for byte in digest {
        hex.push_str(&format!("{byte:02x}"));
    }
    hex
}

/// Typed accessors over a parsed map that track which keys were consumed,
/// so unknown keys can be rejected.
pub struct KvReader {
    map: BTreeMap<String, String>,
    consumed: std::cell::RefCell<Vec<String>>,
}

impl KvReader {
    pub fn new(map: BTreeMap<String, String>) -> KvReader {
        KvReader { map, consumed: std::cell::RefCell::new(Vec::new()) }
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        let v = self.map.get(key).map(String::as_str);
        if v.is_some() {
            self.consumed.borrow_mut().push(key.to_string());
        }
        v
    }

    pub fn parse_as<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some(s) => s.parse::<T>().map(Some).map_err(|_| {
                Error::Config(format!("key `{key}`: cannot parse `{s}`"))
            }),
        }
    }

    pub fn parse_bool(&self, key: &str) -> Result<Option<bool>> {
        match self.raw(key) {
            None => Ok(None),
            Some("true") | Some("1") => Ok(Some(true)),
            Some("false") | Some("0") => Ok(Some(false)),
            Some(other) => Err(Error::Config(format!(
                "key `{key}`: expected true/false, got `{other}`"
            ))),
        }
    }

    /// Error if any keys were never consumed. Unknown keys are mistakes,
    /// not extensions.
    pub fn finish(self) -> Result<()> {
        let consumed = self.consumed.into_inner();
        let unknown: Vec<&String> =
            self.map.keys().filter(|k| !consumed.contains(k)).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "unknown key{} {}",
                if unknown.len() == 1 { "" } else { "s" },
                unknown.iter().map(|k| format!("`{k}`")).collect::<Vec<_>>().join(", ")
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_skips_comments_and_blanks() {
        let map = parse("# header\n\na=1\nb = two # trailing\n").unwrap();
        assert_eq!(map.get("a").unwrap(), "1");
        assert_eq!(map.get("b").unwrap(), "two");
    }

    #[test]
    fn parse_rejects_bad_lines_and_duplicates() {
        assert!(parse("no_equals_here").is_err());
        assert!(parse("a=1\na=2").is_err());
    }

    #[test]
    fn serialization_is_canonical() {
        let a = parse("b=2\na=1").unwrap();
        let b = parse("a=1\n# comment\nb=2").unwrap();
        assert_eq!(serialize(&a), serialize(&b));
        assert_eq!(content_hash(&serialize(&a)), content_hash(&serialize(&b)));
    }

    #[test]
    fn reader_rejects_unknown_keys() {
        let r = KvReader::new(parse("known=1\nmystery=2").unwrap());
        assert_eq!(r.parse_as::<u32>("known").unwrap(), Some(1));
        let err = r.finish().unwrap_err();
        assert!(err.to_string().contains("mystery"));
    }
}
