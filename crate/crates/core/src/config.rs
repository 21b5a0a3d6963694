//! Run configuration: `key = value` text files (or JSON objects) plus
//! `key=value` overrides, resolved into a typed command config.
//!
//! Values are parsed as JSON when possible (`3`, `true`, `[16, 32]`,
//! `"x"`) and taken as plain strings otherwise, so `mode = denoising` works.
//! Unknown keys are errors.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub type Overrides = Map<String, Value>;

pub fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn split_pair(line: &str) -> Option<(&str, &str)> {
    let (k, v) = line.split_once('=')?;
    let k = k.trim();
    (!k.is_empty()).then_some((k, v))
}

/// Parses `key = value` lines; `#` starts a comment line.
pub fn parse_kv(text: &str, origin: &str) -> Result<Overrides> {
    let mut map = Map::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = split_pair(line)
            .ok_or_else(|| Error::Config(format!("{origin}:{}: expected `key = value`, got `{line}`", i + 1)))?;
        if map.insert(k.to_string(), parse_value(v)).is_some() {
            return Err(Error::Config(format!("{origin}:{}: key `{k}` given twice", i + 1)));
        }
    }
    Ok(map)
}

/// Reads a config file: a JSON object when the file starts with `{`,
/// `key = value` lines otherwise.
pub fn load_file(path: &Path) -> Result<Overrides> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.trim_start().starts_with('{') {
        match serde_json::from_str(&text) {
            Ok(Value::Object(m)) => Ok(m),
            Ok(_) => Err(Error::Config(format!("{}: expected a JSON object", path.display()))),
            Err(e) => Err(Error::Config(format!("{}: {e}", path.display()))),
        }
    } else {
        parse_kv(&text, &path.display().to_string())
    }
}

/// Merges file settings and `--set` overrides (later wins).
pub fn gather(file: Option<&Path>, sets: &[String]) -> Result<Overrides> {
    let mut map = match file {
        Some(p) => load_file(p)?,
        None => Map::new(),
    };
    for s in sets {
        let (k, v) = split_pair(s).ok_or_else(|| Error::Config(format!("override `{s}` is not `key=value`")))?;
        map.insert(k.to_string(), parse_value(v));
    }
    Ok(map)
}

/// Builds `C` from its defaults plus `overrides`.
pub fn resolve<C: DeserializeOwned + Serialize + Default>(overrides: Overrides) -> Result<C> {
    let mut base = match serde_json::to_value(C::default())? {
        Value::Object(m) => m,
        _ => return Err(Error::Config("config type must serialize to an object".into())),
    };
    for (k, v) in overrides {
        base.insert(k, v);
    }
    serde_json::from_value(Value::Object(base)).map_err(|e| Error::Config(e.to_string()))
}

pub fn to_pretty_json<C: Serialize>(cfg: &C) -> Result<String> {
    Ok(serde_json::to_string_pretty(cfg)? + "\n")
}
