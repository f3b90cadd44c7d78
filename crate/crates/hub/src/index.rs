//! The hub index, its explore tree and name resolution.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use adaptkit::AdapterType;
use serde::{Deserialize, Serialize};

use crate::error::{HubError, Result};
use crate::metadata::{is_sha256_hex, HubEntry};

pub const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Level1 {
    Task,
    Language,
}

impl Level1 {
    pub fn of(adapter_type: AdapterType) -> Self {
        match adapter_type {
            AdapterType::TextTask => Level1::Task,
            AdapterType::TextLang => Level1::Language,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Level1::Task => "task",
            Level1::Language => "language",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "task" => Some(Level1::Task),
            "language" | "lang" => Some(Level1::Language),
            _ => None,
        }
    }
}

impl fmt::Display for Level1 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// level 1 → category → dataset → indices into the index entries.
pub type ExploreTree = BTreeMap<Level1, BTreeMap<String, BTreeMap<String, Vec<usize>>>>;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HubIndex {
    entries: Vec<HubEntry>,
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    version: u32,
    entries: Vec<HubEntry>,
}

impl HubIndex {
    /// Validate and sort `entries`; any duplicate key rejects the whole set.
    pub fn build(entries: impl IntoIterator<Item = HubEntry>) -> Result<Self> {
        let mut entries: Vec<HubEntry> = entries.into_iter().collect();
        for e in &entries {
            let v = e.violations();
            if !v.is_empty() {
                return Err(HubError::Validation(v));
            }
        }
        entries.sort_by(|a, b| a.key().cmp(&b.key()));
        if let Some(w) = entries.windows(2).find(|w| w[0].key() == w[1].key()) {
            let e = &w[1];
            return Err(HubError::Duplicate {
                id: e.id.clone(),
                model_hash: e.model_hash.clone(),
                config_hash: e.config_hash.clone(),
            });
        }
        Ok(Self { entries })
    }

    /// Rebuild with one more entry, rejecting duplicates of existing keys.
    pub fn with_entry(&self, entry: HubEntry) -> Result<Self> {
        Self::build(self.entries.iter().cloned().chain([entry]))
    }

    pub fn entries(&self) -> &[HubEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_json(&self) -> String {
        let file = IndexFile { version: INDEX_VERSION, entries: self.entries.clone() };
        serde_json::to_string_pretty(&file).expect("index serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: IndexFile = serde_json::from_str(text).map_err(|e| HubError::Index(e.to_string()))?;
        if file.version != INDEX_VERSION {
            return Err(HubError::Index(format!("unsupported index version {}", file.version)));
        }
        Self::build(file.entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        adaptkit::package::write_atomic(path, self.to_json().as_bytes())?;
        Ok(())
    }

    pub fn explore_tree(&self) -> ExploreTree {
        let mut tree = ExploreTree::new();
        for (i, e) in self.entries.iter().enumerate() {
            tree.entry(Level1::of(e.adapter_type))
                .or_default()
                .entry(e.category.clone())
                .or_default()
                .entry(e.dataset.clone())
                .or_default()
                .push(i);
        }
        tree
    }

    /// Indented text rendering of the tree, optionally restricted to one branch.
    pub fn render_tree(&self, level1: Option<Level1>, level2: Option<&str>) -> String {
        let tree = self.explore_tree();
        let mut out = String::new();
        for (l1, categories) in tree.iter().filter(|(k, _)| level1.is_none_or(|l| l == **k)) {
            out.push_str(&format!("{l1}\n"));
            for (cat, datasets) in categories.iter().filter(|(k, _)| level2.is_none_or(|c| c == k.as_str())) {
                out.push_str(&format!("  {cat}\n"));
                for (ds, idx) in datasets {
                    out.push_str(&format!("    {ds}\n"));
                    for &i in idx {
                        let e = &self.entries[i];
                        out.push_str(&format!(
                            "      {} [{}, {}, model {}]\n",
                            e.id,
                            e.model_type,
                            e.config,
                            &e.model_hash[..12]
                        ));
                    }
                }
            }
        }
        out
    }

    /// Find the single entry matching `query` for a live model.
    ///
    /// Candidates are compatible entries (same model hash, and the requested
    /// configuration when given) whose id contains `query`, ignoring case. An
    /// exact id match wins over longer ids that merely contain the query.
    pub fn resolve(&self, query: &str, model_hash: &str, config: Option<&str>) -> Result<&HubEntry> {
        let q = query.to_lowercase();
        let compatible: Vec<&HubEntry> = self
            .entries
            .iter()
            .filter(|e| e.model_hash == model_hash)
            .filter(|e| config.is_none_or(|c| config_matches(e, c)))
            .collect();
        let matching: Vec<&HubEntry> = compatible.iter().copied().filter(|e| e.id.to_lowercase().contains(&q)).collect();
        let exact: Vec<&HubEntry> = matching.iter().copied().filter(|e| e.id.to_lowercase() == q).collect();
        let candidates = if exact.is_empty() { matching } else { exact };
        match candidates.as_slice() {
            [one] => Ok(one),
            [] => Err(HubError::NotFound { query: query.to_string(), nearest: self.nearest_ids(&q, 3) }),
            many => Err(HubError::Ambiguous {
                query: query.to_string(),
                candidates: many.iter().map(|e| describe(e)).collect(),
            }),
        }
    }

    fn nearest_ids(&self, query: &str, n: usize) -> Vec<String> {
        let ids: BTreeSet<&str> = self.entries.iter().map(|e| e.id.as_str()).collect();
        let mut scored: Vec<(usize, &str)> =
            ids.into_iter().map(|id| (strsim::levenshtein(query, &id.to_lowercase()), id)).collect();
        scored.sort();
        scored.into_iter().take(n).map(|(_, id)| id.to_string()).collect()
    }
}

fn describe(e: &HubEntry) -> String {
    format!("{} ({}, {})", e.id, e.config, &e.config_hash[..12])
}

fn config_matches(e: &HubEntry, config: &str) -> bool {
    if is_sha256_hex(config) {
        e.config_hash == config
    } else {
        e.config.eq_ignore_ascii_case(config)
    }
}
