//! Flat `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. Later assignments of a key
//! override earlier ones.

use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::str::FromStr;

pub type KeyValues = BTreeMap<String, String>;

pub fn parse_kv(text: &str) -> Result<KeyValues> {
    let mut out = KeyValues::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Parses one `key=value` assignment.
pub fn parse_assignment(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("expected key=value, got {s:?}")))?;
    if k.trim().is_empty() {
        return Err(Error::Config(format!("empty key in {s:?}")));
    }
    Ok((k.trim().to_string(), v.trim().to_string()))
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean {value:?} for {key}"))),
    }
}

pub fn parse_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}
