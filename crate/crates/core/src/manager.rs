//! A backbone plus its registry of adapters and prediction heads.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapter::{preset, AdapterConfig, AdapterLayerWeights, InsertionPoint, StackedAdapter};
use crate::autodiff::{Tape, Var};
use crate::backbone::{embed, layer_forward, BackboneWeights, LayerAdapters, LayerSublayerOutputs, ModelConfig};
use crate::error::{Error, Result};
use crate::params::{Binder, Initializer, Parameter};
use crate::tensor::Tensor;
use crate::train::{HeadKind, PredictionHead};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterType {
    TextTask,
    TextLang,
}

impl AdapterType {
    pub fn as_str(self) -> &'static str {
        match self {
            AdapterType::TextTask => "text_task",
            AdapterType::TextLang => "text_lang",
        }
    }
}

impl fmt::Display for AdapterType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AdapterType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text_task" => Ok(AdapterType::TextTask),
            "text_lang" | "text_language" => Ok(AdapterType::TextLang),
            other => Err(Error::InvalidConfig(format!("unknown adapter type '{other}', expected text_task or text_lang"))),
        }
    }
}

/// Either a named preset or an explicit configuration.
#[derive(Debug, Clone)]
pub enum AdapterSpec {
    Preset(String),
    Config(AdapterConfig),
}

impl From<&str> for AdapterSpec {
    fn from(name: &str) -> Self {
        AdapterSpec::Preset(name.to_string())
    }
}

impl From<AdapterConfig> for AdapterSpec {
    fn from(cfg: AdapterConfig) -> Self {
        AdapterSpec::Config(cfg)
    }
}

impl AdapterSpec {
    pub fn resolve(&self) -> Result<AdapterConfig> {
        let cfg = match self {
            AdapterSpec::Preset(name) => preset(name)?,
            AdapterSpec::Config(cfg) => cfg.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterLayer {
    pub attention: Option<AdapterLayerWeights>,
    pub output: Option<AdapterLayerWeights>,
}

impl AdapterLayer {
    pub fn at(&self, point: InsertionPoint) -> Option<&AdapterLayerWeights> {
        match point {
            InsertionPoint::Attention => self.attention.as_ref(),
            InsertionPoint::Output => self.output.as_ref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterEntry {
    pub name: String,
    pub adapter_type: AdapterType,
    pub config: AdapterConfig,
    pub layers: Vec<AdapterLayer>,
    pub trained: bool,
}

/// Prefix of every parameter name owned by the adapter `name`.
pub fn adapter_prefix(name: &str) -> String {
    format!("{name}/")
}

pub(crate) fn validate_name(kind: &str, name: &str) -> Result<()> {
    if name.is_empty() || name.chars().any(|c| c == '/' || c.is_whitespace() || c.is_control() || c == '=') {
        return Err(Error::InvalidArgument(format!(
            "{kind} name '{name}' must be nonempty without '/', '=' or whitespace"
        )));
    }
    Ok(())
}

impl AdapterEntry {
    /// Freshly initialized adapter (identity on its residual path).
    pub fn new(name: &str, adapter_type: AdapterType, config: AdapterConfig, model: &ModelConfig, seed: u64) -> Self {
        let mut init = Initializer::derived(seed, &format!("adapter:{name}"));
        let prefix = adapter_prefix(name);
        let h = model.hidden_size;
        let layers = (0..model.num_layers)
            .map(|l| AdapterLayer {
                attention: config
                    .mh_adapter
                    .then(|| AdapterLayerWeights::init(&prefix, l, InsertionPoint::Attention, h, &config, &mut init)),
                output: config
                    .output_adapter
                    .then(|| AdapterLayerWeights::init(&prefix, l, InsertionPoint::Output, h, &config, &mut init)),
            })
            .collect();
        Self { name: name.to_string(), adapter_type, config, layers, trained: false }
    }

    /// Parameters in canonical order: layer ascending, attention before output.
    pub fn parameters(&self) -> Vec<&Parameter> {
        self.layers
            .iter()
            .flat_map(|l| [&l.attention, &l.output].into_iter().flatten().flat_map(|w| w.parameters()))
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [&mut l.attention, &mut l.output].into_iter().flatten().flat_map(|w| w.parameters_mut())
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.parameters().iter().map(|p| p.value().numel()).sum()
    }

    pub fn round_to_f32(&mut self) {
        for p in self.parameters_mut() {
            p.value_mut().round_to_f32();
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ActivationState {
    pub active_stack: Vec<String>,
    pub frozen_base: bool,
    pub trainable: Vec<String>,
}

/// Output of [`Model::encode`].
#[derive(Debug, Clone)]
pub struct Encoding {
    pub hidden: Tensor,
    /// Hidden state of the first position, shape `[1, h]`.
    pub pooled: Tensor,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    seed: u64,
    backbone: BackboneWeights,
    adapters: Vec<AdapterEntry>,
    heads: Vec<PredictionHead>,
    state: ActivationState,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let backbone = BackboneWeights::init(&config, seed)?;
        Ok(Self::from_backbone(config, backbone, seed))
    }

    pub fn from_backbone(config: ModelConfig, backbone: BackboneWeights, seed: u64) -> Self {
        Self { config, seed, backbone, adapters: Vec::new(), heads: Vec::new(), state: ActivationState::default() }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn backbone(&self) -> &BackboneWeights {
        &self.backbone
    }

    pub fn backbone_mut(&mut self) -> &mut BackboneWeights {
        &mut self.backbone
    }

    pub fn state(&self) -> &ActivationState {
        &self.state
    }

    pub fn base_digest(&self) -> String {
        self.backbone.digest()
    }

    pub fn add_adapter(
        &mut self,
        name: &str,
        adapter_type: AdapterType,
        spec: impl Into<AdapterSpec>,
    ) -> Result<&AdapterEntry> {
        validate_name("adapter", name)?;
        if self.adapter(name).is_ok() {
            return Err(Error::DuplicateAdapter(name.to_string()));
        }
        let config = spec.into().resolve()?;
        let entry = AdapterEntry::new(name, adapter_type, config, &self.config, self.seed);
        self.adapters.push(entry);
        Ok(self.adapters.last().unwrap())
    }

    /// Register a pre-built entry, e.g. one decoded from a package.
    pub fn insert_adapter(&mut self, entry: AdapterEntry) -> Result<&AdapterEntry> {
        validate_name("adapter", &entry.name)?;
        if self.adapter(&entry.name).is_ok() {
            return Err(Error::DuplicateAdapter(entry.name));
        }
        if entry.layers.len() != self.config.num_layers {
            return Err(Error::InvalidConfig(format!(
                "adapter has {} layers, model has {}",
                entry.layers.len(),
                self.config.num_layers
            )));
        }
        self.adapters.push(entry);
        Ok(self.adapters.last().unwrap())
    }

    pub fn adapter(&self, name: &str) -> Result<&AdapterEntry> {
        self.adapters.iter().find(|a| a.name == name).ok_or_else(|| Error::UnknownAdapter(name.to_string()))
    }

    pub fn adapter_mut(&mut self, name: &str) -> Result<&mut AdapterEntry> {
        self.adapters.iter_mut().find(|a| a.name == name).ok_or_else(|| Error::UnknownAdapter(name.to_string()))
    }

    /// Registered adapters in insertion order.
    pub fn list_adapters(&self) -> Vec<&AdapterEntry> {
        self.adapters.iter().collect()
    }

    pub fn adapter_names(&self) -> Vec<String> {
        self.adapters.iter().map(|a| a.name.clone()).collect()
    }

    pub fn delete_adapter(&mut self, name: &str) -> Result<AdapterEntry> {
        let idx = self
            .adapters
            .iter()
            .position(|a| a.name == name)
            .ok_or_else(|| Error::UnknownAdapter(name.to_string()))?;
        if self.state.active_stack.iter().any(|n| n == name) {
            return Err(Error::AdapterActive(name.to_string()));
        }
        self.state.trainable.retain(|n| n != name);
        Ok(self.adapters.remove(idx))
    }

    fn check_names(&self, names: &[String]) -> Result<()> {
        for n in names {
            self.adapter(n)?;
        }
        Ok(())
    }

    /// Activate an ordered stack; the first name is applied first at every insertion point.
    pub fn set_active<S: AsRef<str>>(&mut self, stack: &[S]) -> Result<()> {
        let stack: Vec<String> = stack.iter().map(|s| s.as_ref().to_string()).collect();
        self.check_names(&stack)?;
        self.state.active_stack = stack;
        Ok(())
    }

    pub fn active_stack(&self) -> &[String] {
        &self.state.active_stack
    }

    /// Freeze the backbone and mark exactly `names` as trainable. When the
    /// active stack does not already contain all of them, it becomes `names`.
    pub fn train_adapter<S: AsRef<str>>(&mut self, names: &[S]) -> Result<()> {
        let names: Vec<String> = names.iter().map(|s| s.as_ref().to_string()).collect();
        if names.is_empty() {
            return Err(Error::InvalidArgument("train_adapter needs at least one adapter name".into()));
        }
        self.check_names(&names)?;
        if !names.iter().all(|n| self.state.active_stack.contains(n)) {
            self.state.active_stack = names.clone();
        }
        self.state.frozen_base = true;
        self.state.trainable = names;
        Ok(())
    }

    /// Undo [`Model::train_adapter`]: nothing adapter-specific is trainable and the base is unfrozen.
    pub fn unfreeze(&mut self) {
        self.state.frozen_base = false;
        self.state.trainable.clear();
    }

    pub fn add_head(&mut self, name: &str, kind: HeadKind) -> Result<&PredictionHead> {
        validate_name("head", name)?;
        if self.head(name).is_ok() {
            return Err(Error::InvalidArgument(format!("head '{name}' already exists")));
        }
        let head = PredictionHead::new(name, kind, &self.config, self.seed);
        self.heads.push(head);
        Ok(self.heads.last().unwrap())
    }

    /// Attach a head built elsewhere (e.g. decoded from a package), replacing any head of the same name.
    pub fn attach_head(&mut self, head: PredictionHead) -> Result<()> {
        if head.model_hash() != self.config.hash() {
            return Err(Error::IncompatibleModel { package: head.model_hash().to_string(), live: self.config.hash() });
        }
        self.heads.retain(|h| h.name() != head.name());
        self.heads.push(head);
        Ok(())
    }

    pub fn head(&self, name: &str) -> Result<&PredictionHead> {
        self.heads.iter().find(|h| h.name() == name).ok_or_else(|| Error::UnknownHead(name.to_string()))
    }

    pub fn head_mut(&mut self, name: &str) -> Result<&mut PredictionHead> {
        self.heads.iter_mut().find(|h| h.name() == name).ok_or_else(|| Error::UnknownHead(name.to_string()))
    }

    pub fn heads(&self) -> &[PredictionHead] {
        &self.heads
    }

    fn layer_adapters<'a>(&'a self, stack: &[&'a AdapterEntry], layer: usize) -> LayerAdapters<'a> {
        let mut out = LayerAdapters::default();
        for entry in stack {
            let l = &entry.layers[layer];
            if let Some(w) = &l.attention {
                out.attention.push(StackedAdapter { config: &entry.config, weights: w });
            }
            if let Some(w) = &l.output {
                out.output.push(StackedAdapter { config: &entry.config, weights: w });
            }
        }
        out
    }

    fn resolve_stack<S: AsRef<str>>(&self, stack: &[S]) -> Result<Vec<&AdapterEntry>> {
        stack.iter().map(|n| self.adapter(n.as_ref())).collect()
    }

    /// Forward pass on a tape; returns the hidden states and the pooled `[1, h]` vector.
    pub fn forward<S: AsRef<str>>(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        token_ids: &[usize],
        stack: &[S],
    ) -> Result<(Var, Var)> {
        let (hidden, _) = self.forward_with_hooks(tape, binder, token_ids, stack)?;
        let pooled = tape.pool_first(hidden)?;
        Ok((hidden, pooled))
    }

    pub fn forward_with_hooks<S: AsRef<str>>(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        token_ids: &[usize],
        stack: &[S],
    ) -> Result<(Var, Vec<crate::backbone::LayerHooks>)> {
        let entries = self.resolve_stack(stack)?;
        let mut x = embed(tape, binder, &self.backbone, &self.config, token_ids)?;
        let mut hooks = Vec::with_capacity(self.config.num_layers);
        for (l, layer) in self.backbone.layers.iter().enumerate() {
            let adapters = self.layer_adapters(&entries, l);
            let (next, h) = layer_forward(tape, binder, layer, &self.config, x, &adapters)?;
            hooks.push(h);
            x = next;
        }
        Ok((x, hooks))
    }

    /// Encode with the currently active stack.
    pub fn encode(&self, token_ids: &[usize]) -> Result<Encoding> {
        let stack = self.state.active_stack.clone();
        self.encode_with(token_ids, &stack)
    }

    pub fn encode_with<S: AsRef<str>>(&self, token_ids: &[usize], stack: &[S]) -> Result<Encoding> {
        let mut tape = Tape::new();
        let mut binder = Binder::frozen();
        let (hidden, pooled) = self.forward(&mut tape, &mut binder, token_ids, stack)?;
        Ok(Encoding { hidden: tape.value(hidden).clone(), pooled: tape.value(pooled).clone() })
    }

    /// Per-layer hook signals for inspection.
    pub fn sublayer_outputs<S: AsRef<str>>(&self, token_ids: &[usize], stack: &[S]) -> Result<Vec<LayerSublayerOutputs>> {
        let mut tape = Tape::new();
        let mut binder = Binder::frozen();
        let (_, hooks) = self.forward_with_hooks(&mut tape, &mut binder, token_ids, stack)?;
        Ok(hooks.iter().map(|h| LayerSublayerOutputs::from_hooks(&tape, h)).collect())
    }

    /// Every parameter: backbone, then adapters in registry order, then heads.
    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut out = self.backbone.parameters();
        for a in &self.adapters {
            out.extend(a.parameters());
        }
        for h in &self.heads {
            out.extend(h.parameters());
        }
        out
    }

    pub(crate) fn parameters_by_name_mut(&mut self) -> HashMap<String, &mut Parameter> {
        let mut out: HashMap<String, &mut Parameter> = HashMap::new();
        for p in self.backbone.parameters_mut() {
            out.insert(p.name().to_string(), p);
        }
        for a in &mut self.adapters {
            for p in a.parameters_mut() {
                out.insert(p.name().to_string(), p);
            }
        }
        for h in &mut self.heads {
            for p in h.parameters_mut() {
                out.insert(p.name().to_string(), p);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model {
        Model::new(ModelConfig::desk(), 5).unwrap()
    }

    #[test]
    fn add_list_delete() {
        let mut m = model();
        assert!(m.list_adapters().is_empty());
        m.add_adapter("sst-2", AdapterType::TextTask, "pfeiffer").unwrap();
        assert_eq!(m.adapter_names(), vec!["sst-2"]);
        assert!(matches!(
            m.add_adapter("sst-2", AdapterType::TextTask, "pfeiffer"),
            Err(Error::DuplicateAdapter(_))
        ));
        assert!(matches!(m.add_adapter("x", AdapterType::TextTask, "nope"), Err(Error::UnknownPreset { .. })));
        m.add_adapter("b", AdapterType::TextLang, "houlsby").unwrap();
        m.delete_adapter("sst-2").unwrap();
        assert_eq!(m.adapter_names(), vec!["b"]);
    }

    #[test]
    fn deleting_active_adapter_fails() {
        let mut m = model();
        m.add_adapter("a", AdapterType::TextTask, "pfeiffer").unwrap();
        m.set_active(&["a"]).unwrap();
        assert!(matches!(m.delete_adapter("a"), Err(Error::AdapterActive(_))));
    }

    #[test]
    fn unknown_names_rejected() {
        let mut m = model();
        assert!(m.set_active(&["missing"]).is_err());
        assert!(matches!(m.train_adapter(&["missing"]), Err(Error::UnknownAdapter(_))));
        assert!(m.encode_with(&[1, 2], &["missing"]).is_err());
    }

    #[test]
    fn invalid_names_rejected() {
        let mut m = model();
        for bad in ["", "a/b", "has space"] {
            assert!(m.add_adapter(bad, AdapterType::TextTask, "pfeiffer").is_err());
        }
    }

    #[test]
    fn train_adapter_freezes_and_activates() {
        let mut m = model();
        m.add_adapter("a", AdapterType::TextTask, "pfeiffer").unwrap();
        m.train_adapter(&["a"]).unwrap();
        assert!(m.state().frozen_base);
        assert_eq!(m.active_stack(), ["a"]);
        assert_eq!(m.state().trainable, ["a"]);
    }

    #[test]
    fn fresh_adapter_leaves_encoding_unchanged() {
        let mut m = model();
        let ids = [3, 17, 4, 99, 1];
        let plain = m.encode(&ids).unwrap();
        m.add_adapter("sst-2", AdapterType::TextTask, "pfeiffer").unwrap();
        m.add_adapter("h", AdapterType::TextTask, "houlsby").unwrap();
        m.set_active(&["sst-2", "h"]).unwrap();
        let with = m.encode(&ids).unwrap();
        assert!(plain.hidden.bit_eq(&with.hidden));
        assert_eq!(with.pooled.shape(), &[1, 64]);
    }

    #[test]
    fn out_of_range_tokens_and_lengths_rejected() {
        let m = model();
        assert!(matches!(m.encode(&[128]), Err(Error::TokenOutOfRange { .. })));
        assert!(matches!(m.encode(&[]), Err(Error::SequenceLength { .. })));
        assert!(matches!(m.encode(&[1; 33]), Err(Error::SequenceLength { .. })));
    }

    #[test]
    fn single_token_single_layer_shape() {
        let mut cfg = ModelConfig::desk();
        cfg.num_layers = 1;
        let m = Model::new(cfg, 1).unwrap();
        assert_eq!(m.encode(&[7]).unwrap().hidden.shape(), &[1, 64]);
    }

    #[test]
    fn encoding_is_deterministic() {
        let a = model().encode(&[1, 2, 3]).unwrap();
        let b = model().encode(&[1, 2, 3]).unwrap();
        assert!(a.hidden.bit_eq(&b.hidden));
    }
}
