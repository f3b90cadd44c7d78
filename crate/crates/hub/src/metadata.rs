//! Hub metadata files: one YAML document per published adapter.

use std::path::Path;

use adaptkit::{AdapterType, Preset};
use serde::{Deserialize, Serialize};
use serde_yaml::Value;

use crate::error::{HubError, Result, Violation};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HubEntry {
    pub id: String,
    #[serde(rename = "type")]
    pub adapter_type: AdapterType,
    /// Second explore level: a task category or a language code.
    pub category: String,
    /// Third explore level: dataset or domain.
    pub dataset: String,
    pub model_type: String,
    pub model_hash: String,
    pub config_hash: String,
    /// Preset name, or `custom`.
    pub config: String,
    pub url: String,
    pub sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reduction_factor: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub author: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub github: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub twitter: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<String>,
}

pub const REQUIRED_FIELDS: [&str; 10] =
    ["id", "type", "category", "dataset", "model_type", "model_hash", "config_hash", "config", "url", "sha256"];
pub const OPTIONAL_FIELDS: [&str; 6] = ["reduction_factor", "description", "author", "github", "twitter", "training"];

pub fn is_sha256_hex(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

fn violation(path: &str, message: impl Into<String>) -> Violation {
    Violation { path: path.to_string(), message: message.into() }
}

impl HubEntry {
    /// The identity of an entry within an index.
    pub fn key(&self) -> (&str, &str, &str) {
        (&self.id, &self.model_hash, &self.config_hash)
    }

    /// Semantic checks on an already well-typed entry.
    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        for (path, value) in [
            ("id", &self.id),
            ("category", &self.category),
            ("dataset", &self.dataset),
            ("model_type", &self.model_type),
            ("config", &self.config),
            ("url", &self.url),
        ] {
            if value.trim().is_empty() {
                out.push(violation(path, "must not be empty"));
            }
        }
        if self.id.chars().any(|c| c.is_whitespace() || c == '/') {
            out.push(violation("id", "must not contain whitespace or '/'"));
        }
        for (path, value) in [("model_hash", &self.model_hash), ("config_hash", &self.config_hash), ("sha256", &self.sha256)] {
            if !is_sha256_hex(value) {
                out.push(violation(path, "must be 64 lowercase hex digits"));
            }
        }
        if !self.config.is_empty() && self.config != "custom" && self.config.parse::<Preset>().is_err() {
            out.push(violation("config", format!("'{}' is neither a preset name nor 'custom'", self.config)));
        }
        if !self.url.is_empty() {
            match url::Url::parse(&self.url) {
                Ok(u) if matches!(u.scheme(), "http" | "https" | "file") => {}
                Ok(u) => out.push(violation("url", format!("unsupported scheme '{}'", u.scheme()))),
                Err(e) => out.push(violation("url", format!("not a well-formed url: {e}"))),
            }
        }
        if self.reduction_factor == Some(0) {
            out.push(violation("reduction_factor", "must be positive"));
        }
        out
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("entries serialize")
    }
}

fn string_field(map: &serde_yaml::Mapping, key: &str, required: bool, out: &mut Vec<Violation>) -> Option<String> {
    match map.get(key) {
        None | Some(Value::Null) if required => {
            out.push(violation(key, "missing required field"));
            None
        }
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => {
            out.push(violation(key, "expected a string"));
            None
        }
    }
}

/// Parse and validate one metadata document, reporting every violation at once.
pub fn ingest_metadata(text: &str) -> Result<HubEntry> {
    let value: Value = serde_yaml::from_str(text).map_err(|e| HubError::Parse(e.to_string()))?;
    let Value::Mapping(map) = value else {
        return Err(HubError::Validation(vec![violation("$", "expected a mapping of fields")]));
    };
    let mut out = Vec::new();
    for key in map.keys() {
        match key.as_str() {
            Some(k) if REQUIRED_FIELDS.contains(&k) || OPTIONAL_FIELDS.contains(&k) => {}
            Some(k) => out.push(violation(k, "unknown field")),
            None => out.push(violation("$", "field names must be strings")),
        }
    }
    let mut req = |key: &str| string_field(&map, key, true, &mut out);
    let id = req("id");
    let adapter_type = req("type");
    let category = req("category");
    let dataset = req("dataset");
    let model_type = req("model_type");
    let model_hash = req("model_hash");
    let config_hash = req("config_hash");
    let config = req("config");
    let url = req("url");
    let sha256 = req("sha256");
    let mut opt = |key: &str| string_field(&map, key, false, &mut out);
    let description = opt("description");
    let author = opt("author");
    let github = opt("github");
    let twitter = opt("twitter");
    let training = opt("training");
    let reduction_factor = match map.get("reduction_factor") {
        None | Some(Value::Null) => None,
        Some(v) => match v.as_u64() {
            Some(n) => Some(n as usize),
            None => {
                out.push(violation("reduction_factor", "expected a positive integer"));
                None
            }
        },
    };
    let adapter_type = adapter_type.and_then(|t| match t.parse::<AdapterType>() {
        Ok(t) => Some(t),
        Err(_) => {
            out.push(violation("type", format!("'{t}' is not one of text_task, text_lang")));
            None
        }
    });

    let entry = match (id, adapter_type, category, dataset, model_type, model_hash, config_hash, config, url, sha256) {
        (
            Some(id),
            Some(adapter_type),
            Some(category),
            Some(dataset),
            Some(model_type),
            Some(model_hash),
            Some(config_hash),
            Some(config),
            Some(url),
            Some(sha256),
        ) => Some(HubEntry {
            id,
            adapter_type,
            category,
            dataset,
            model_type,
            model_hash,
            config_hash,
            config,
            url,
            sha256,
            reduction_factor,
            description,
            author,
            github,
            twitter,
            training,
        }),
        _ => None,
    };
    match entry {
        Some(e) => {
            out.extend(e.violations());
            if out.is_empty() {
                Ok(e)
            } else {
                Err(HubError::Validation(out))
            }
        }
        None => {
            // Report semantic problems of the fields that did parse as well.
            let partial = |k: &str| map.get(k).and_then(Value::as_str).unwrap_or("").to_string();
            let probe = HubEntry {
                id: partial("id"),
                adapter_type: AdapterType::TextTask,
                category: partial("category"),
                dataset: partial("dataset"),
                model_type: partial("model_type"),
                model_hash: partial("model_hash"),
                config_hash: partial("config_hash"),
                config: partial("config"),
                url: partial("url"),
                sha256: partial("sha256"),
                reduction_factor,
                description: None,
                author: None,
                github: None,
                twitter: None,
                training: None,
            };
            for v in probe.violations() {
                if !out.iter().any(|o| o.path == v.path) {
                    out.push(v);
                }
            }
            Err(HubError::Validation(out))
        }
    }
}

pub fn ingest_file(path: &Path) -> Result<HubEntry> {
    ingest_metadata(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const HASH: &str = "0123456789abcdef0123456789abcdef0123456789abcdef0123456789abcdef";

    fn valid() -> String {
        format!(
            "id: sst-2\ntype: text_task\ncategory: sentiment\ndataset: sst-2\nmodel_type: mini-bert\n\
             model_hash: {HASH}\nconfig_hash: {HASH}\nconfig: pfeiffer\nurl: file:///tmp/sst-2.zip\nsha256: {HASH}\n\
             author: someone\n"
        )
    }

    fn violations(text: &str) -> Vec<Violation> {
        match ingest_metadata(text) {
            Err(HubError::Validation(v)) => v,
            other => panic!("expected violations, got {other:?}"),
        }
    }

    #[test]
    fn valid_entry_is_accepted_unchanged() {
        let e = ingest_metadata(&valid()).unwrap();
        assert_eq!(e.id, "sst-2");
        assert_eq!(e.author.as_deref(), Some("someone"));
        assert_eq!(ingest_metadata(&e.to_yaml()).unwrap(), e);
    }

    #[test]
    fn missing_url_is_exactly_one_violation() {
        let text: String = valid().lines().filter(|l| !l.starts_with("url:")).map(|l| format!("{l}\n")).collect();
        let v = violations(&text);
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].path, "url");
    }

    #[test]
    fn every_violation_is_reported() {
        let text = valid()
            .replace("type: text_task", "type: text_vision")
            .replace(&format!("model_hash: {HASH}"), "model_hash: xyz")
            .replace("config: pfeiffer", "config: nope")
            .replace("file:///tmp/sst-2.zip", "ftp://host/x.zip")
            + "colour: blue\n";
        let paths: Vec<String> = violations(&text).into_iter().map(|v| v.path).collect();
        for p in ["type", "model_hash", "config", "url", "colour"] {
            assert!(paths.contains(&p.to_string()), "{p} missing from {paths:?}");
        }
    }

    #[test]
    fn wrong_types_and_non_mappings() {
        let v = violations(&valid().replace("id: sst-2", "id: [a, b]"));
        assert_eq!(v[0].path, "id");
        assert!(matches!(ingest_metadata("- a\n- b\n"), Err(HubError::Validation(_))));
        assert!(matches!(ingest_metadata("id: [unclosed"), Err(HubError::Parse(_))));
    }
}
