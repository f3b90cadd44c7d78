//! Flat `key=value` text descriptors with a fixed field order.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

pub(crate) struct Fields {
    map: BTreeMap<String, String>,
}

pub(crate) fn parse(text: &str) -> Result<Fields> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("descriptor line {} has no '=': {line}", n + 1)))?;
        if map.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Format(format!("descriptor repeats key '{}'", k.trim())));
        }
    }
    Ok(Fields { map })
}

impl Fields {
    pub(crate) fn string(&self, key: &str) -> Result<String> {
        self.map.get(key).cloned().ok_or_else(|| Error::Format(format!("descriptor is missing '{key}'")))
    }

    pub(crate) fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.string(key)?;
        raw.parse().map_err(|_| Error::Format(format!("descriptor field '{key}' has invalid value '{raw}'")))
    }

    pub(crate) fn optional(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    /// Fail on keys that no reader consumed.
    pub(crate) fn finish_with(&self, known: &[&str]) -> Result<()> {
        match self.map.keys().find(|k| !known.contains(&k.as_str())) {
            Some(k) => Err(Error::Format(format!("descriptor has unknown key '{k}'"))),
            None => Ok(()),
        }
    }
}
