//! Post-LN BERT-style encoder: frozen backbone weights and the forward pass
//! with adapter insertion points after the attention and feed-forward sublayers.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{apply_adapter_stack, StackedAdapter};
use crate::autodiff::{Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{digest_parameters, Binder, Initializer, Ownership, Parameter};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub model_type: String,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub layer_norm_epsilon: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Small configuration used for training and gradient checks.
    pub fn desk() -> Self {
        Self {
            model_type: "mini-bert".into(),
            hidden_size: 64,
            num_layers: 2,
            num_heads: 4,
            ffn_size: 256,
            vocab_size: 128,
            max_seq_len: 32,
            layer_norm_epsilon: 1e-12,
        }
    }

    pub fn bert_base() -> Self {
        Self {
            model_type: "bert-base".into(),
            hidden_size: 768,
            num_layers: 12,
            num_heads: 12,
            ffn_size: 3072,
            vocab_size: 30522,
            max_seq_len: 512,
            layer_norm_epsilon: 1e-12,
        }
    }

    pub fn bert_large() -> Self {
        Self {
            model_type: "bert-large".into(),
            hidden_size: 1024,
            num_layers: 24,
            num_heads: 16,
            ffn_size: 4096,
            vocab_size: 30522,
            max_seq_len: 512,
            layer_norm_epsilon: 1e-12,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden_size", self.hidden_size),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("ffn_size", self.ffn_size),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{field} must be positive")));
            }
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(Error::InvalidConfig(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if !(self.layer_norm_epsilon > 0.0) {
            return Err(Error::InvalidConfig("layer_norm_epsilon must be positive".into()));
        }
        if self.model_type.is_empty() || self.model_type.contains(['\n', '=']) {
            return Err(Error::InvalidConfig(format!("invalid model_type '{}'", self.model_type)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    /// Canonical `key=value` descriptor, one field per line in fixed order.
    pub fn descriptor(&self) -> String {
        format!(
            "model_type={}\nhidden_size={}\nnum_layers={}\nnum_heads={}\nffn_size={}\nvocab_size={}\nmax_seq_len={}\nlayer_norm_epsilon={:?}\n",
            self.model_type,
            self.hidden_size,
            self.num_layers,
            self.num_heads,
            self.ffn_size,
            self.vocab_size,
            self.max_seq_len,
            self.layer_norm_epsilon
        )
    }

    pub fn from_descriptor(text: &str) -> Result<Self> {
        let kv = crate::descriptor::parse(text)?;
        let cfg = Self {
            model_type: kv.string("model_type")?,
            hidden_size: kv.parse("hidden_size")?,
            num_layers: kv.parse("num_layers")?,
            num_heads: kv.parse("num_heads")?,
            ffn_size: kv.parse("ffn_size")?,
            vocab_size: kv.parse("vocab_size")?,
            max_seq_len: kv.parse("max_seq_len")?,
            layer_norm_epsilon: kv.parse("layer_norm_epsilon")?,
        };
        kv.finish_with(&[
            "model_type",
            "hidden_size",
            "num_layers",
            "num_heads",
            "ffn_size",
            "vocab_size",
            "max_seq_len",
            "layer_norm_epsilon",
        ])?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Identity hash: two configs are compatible iff their hashes are equal.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.descriptor().as_bytes()))
    }
}

/// Exact number of backbone parameters, embeddings and layer norms included.
pub fn count_backbone_params(config: &ModelConfig) -> usize {
    let h = config.hidden_size;
    let f = config.ffn_size;
    let embeddings = config.vocab_size * h + config.max_seq_len * h + 2 * h;
    let attention = 4 * (h * h + h);
    let ffn = h * f + f + f * h + h;
    let norms = 2 * 2 * h;
    embeddings + config.num_layers * (attention + ffn + norms)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub query_weight: Parameter,
    pub query_bias: Parameter,
    pub key_weight: Parameter,
    pub key_bias: Parameter,
    pub value_weight: Parameter,
    pub value_bias: Parameter,
    pub attention_output_weight: Parameter,
    pub attention_output_bias: Parameter,
    pub attention_norm_gamma: Parameter,
    pub attention_norm_beta: Parameter,
    pub ffn_in_weight: Parameter,
    pub ffn_in_bias: Parameter,
    pub ffn_out_weight: Parameter,
    pub ffn_out_bias: Parameter,
    pub ffn_norm_gamma: Parameter,
    pub ffn_norm_beta: Parameter,
}

impl LayerWeights {
    fn init(config: &ModelConfig, layer: usize, init: &mut Initializer) -> Self {
        let h = config.hidden_size;
        let f = config.ffn_size;
        let p = |suffix: &str, t: Tensor| Parameter::new(format!("layer.{layer}.{suffix}"), Ownership::Base, t);
        Self {
            query_weight: p("attention.query.weight", init.truncated_normal(&[h, h], INIT_STD)),
            query_bias: p("attention.query.bias", Tensor::zeros(&[h])),
            key_weight: p("attention.key.weight", init.truncated_normal(&[h, h], INIT_STD)),
            key_bias: p("attention.key.bias", Tensor::zeros(&[h])),
            value_weight: p("attention.value.weight", init.truncated_normal(&[h, h], INIT_STD)),
            value_bias: p("attention.value.bias", Tensor::zeros(&[h])),
            attention_output_weight: p("attention.output.weight", init.truncated_normal(&[h, h], INIT_STD)),
            attention_output_bias: p("attention.output.bias", Tensor::zeros(&[h])),
            attention_norm_gamma: p("attention.norm.gamma", Tensor::ones(&[h])),
            attention_norm_beta: p("attention.norm.beta", Tensor::zeros(&[h])),
            ffn_in_weight: p("ffn.in.weight", init.truncated_normal(&[h, f], INIT_STD)),
            ffn_in_bias: p("ffn.in.bias", Tensor::zeros(&[f])),
            ffn_out_weight: p("ffn.out.weight", init.truncated_normal(&[f, h], INIT_STD)),
            ffn_out_bias: p("ffn.out.bias", Tensor::zeros(&[h])),
            ffn_norm_gamma: p("ffn.norm.gamma", Tensor::ones(&[h])),
            ffn_norm_beta: p("ffn.norm.beta", Tensor::zeros(&[h])),
        }
    }

    pub fn parameters(&self) -> [&Parameter; 16] {
        [
            &self.query_weight,
            &self.query_bias,
            &self.key_weight,
            &self.key_bias,
            &self.value_weight,
            &self.value_bias,
            &self.attention_output_weight,
            &self.attention_output_bias,
            &self.attention_norm_gamma,
            &self.attention_norm_beta,
            &self.ffn_in_weight,
            &self.ffn_in_bias,
            &self.ffn_out_weight,
            &self.ffn_out_bias,
            &self.ffn_norm_gamma,
            &self.ffn_norm_beta,
        ]
    }

    pub fn parameters_mut(&mut self) -> [&mut Parameter; 16] {
        [
            &mut self.query_weight,
            &mut self.query_bias,
            &mut self.key_weight,
            &mut self.key_bias,
            &mut self.value_weight,
            &mut self.value_bias,
            &mut self.attention_output_weight,
            &mut self.attention_output_bias,
            &mut self.attention_norm_gamma,
            &mut self.attention_norm_beta,
            &mut self.ffn_in_weight,
            &mut self.ffn_in_bias,
            &mut self.ffn_out_weight,
            &mut self.ffn_out_bias,
            &mut self.ffn_norm_gamma,
            &mut self.ffn_norm_beta,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneWeights {
    pub token_embeddings: Parameter,
    pub position_embeddings: Parameter,
    pub embedding_norm_gamma: Parameter,
    pub embedding_norm_beta: Parameter,
    pub layers: Vec<LayerWeights>,
}

impl BackboneWeights {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Initializer::new(seed);
        let h = config.hidden_size;
        let p = |name: &str, t: Tensor| Parameter::new(name, Ownership::Base, t);
        let token_embeddings = p("embeddings.token", init.truncated_normal(&[config.vocab_size, h], INIT_STD));
        let position_embeddings =
            p("embeddings.position", init.truncated_normal(&[config.max_seq_len, h], INIT_STD));
        let layers = (0..config.num_layers).map(|l| LayerWeights::init(config, l, &mut init)).collect();
        Ok(Self {
            token_embeddings,
            position_embeddings,
            embedding_norm_gamma: p("embeddings.norm.gamma", Tensor::ones(&[h])),
            embedding_norm_beta: p("embeddings.norm.beta", Tensor::zeros(&[h])),
            layers,
        })
    }

    /// All parameters in canonical order.
    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut out = vec![
            &self.token_embeddings,
            &self.position_embeddings,
            &self.embedding_norm_gamma,
            &self.embedding_norm_beta,
        ];
        for layer in &self.layers {
            out.extend(layer.parameters());
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = vec![
            &mut self.token_embeddings,
            &mut self.position_embeddings,
            &mut self.embedding_norm_gamma,
            &mut self.embedding_norm_beta,
        ];
        for layer in &mut self.layers {
            out.extend(layer.parameters_mut());
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.parameters().iter().map(|p| p.value().numel()).sum()
    }

    pub fn digest(&self) -> String {
        digest_parameters(self.parameters())
    }

    /// Rebuild from named tensors, checking every expected name and shape is present.
    pub fn from_named(config: &ModelConfig, mut named: std::collections::HashMap<String, Tensor>) -> Result<Self> {
        let mut weights = Self::init(config, 0)?;
        for p in weights.parameters_mut() {
            let t = named
                .remove(p.name())
                .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor '{}'", p.name())))?;
            if t.shape() != p.shape() {
                return Err(Error::Format(format!(
                    "tensor '{}' has shape {:?}, expected {:?}",
                    p.name(),
                    t.shape(),
                    p.shape()
                )));
            }
            *p.value_mut() = t;
        }
        if let Some(extra) = named.keys().next() {
            return Err(Error::Format(format!("unexpected tensor '{extra}' in checkpoint")));
        }
        Ok(weights)
    }
}

/// Signals at the insertion points of one layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerHooks {
    /// Attention sublayer output before the residual add.
    pub attention_output: Var,
    pub attention_residual: Var,
    pub attention_normed: Var,
    /// Feed-forward sublayer output before the residual add.
    pub ffn_output: Var,
    pub ffn_residual: Var,
    pub ffn_normed: Var,
}

/// Materialized [`LayerHooks`] for one layer.
#[derive(Debug, Clone)]
pub struct LayerSublayerOutputs {
    pub attention_output: Tensor,
    pub attention_residual: Tensor,
    pub attention_normed: Tensor,
    pub ffn_output: Tensor,
    pub ffn_residual: Tensor,
    pub ffn_normed: Tensor,
}

impl LayerSublayerOutputs {
    pub fn from_hooks(tape: &Tape, hooks: &LayerHooks) -> Self {
        let v = |x: Var| tape.value(x).clone();
        Self {
            attention_output: v(hooks.attention_output),
            attention_residual: v(hooks.attention_residual),
            attention_normed: v(hooks.attention_normed),
            ffn_output: v(hooks.ffn_output),
            ffn_residual: v(hooks.ffn_residual),
            ffn_normed: v(hooks.ffn_normed),
        }
    }
}

/// Adapters active at each insertion point of one layer, innermost first.
#[derive(Debug, Clone, Default)]
pub struct LayerAdapters<'a> {
    pub attention: Vec<StackedAdapter<'a>>,
    pub output: Vec<StackedAdapter<'a>>,
}

/// Token + position embeddings followed by the embedding layer norm.
pub fn embed(
    tape: &mut Tape,
    binder: &mut Binder,
    weights: &BackboneWeights,
    config: &ModelConfig,
    token_ids: &[usize],
) -> Result<Var> {
    if token_ids.is_empty() || token_ids.len() > config.max_seq_len {
        return Err(Error::SequenceLength { len: token_ids.len(), max: config.max_seq_len });
    }
    if let Some(&id) = token_ids.iter().find(|&&id| id >= config.vocab_size) {
        return Err(Error::TokenOutOfRange { id, vocab_size: config.vocab_size });
    }
    let tok_table = binder.bind(tape, &weights.token_embeddings);
    let pos_table = binder.bind(tape, &weights.position_embeddings);
    let tokens = tape.embedding_lookup(tok_table, token_ids)?;
    let positions: Vec<usize> = (0..token_ids.len()).collect();
    let pos = tape.embedding_lookup(pos_table, &positions)?;
    let sum = tape.add(tokens, pos)?;
    let gamma = binder.bind(tape, &weights.embedding_norm_gamma);
    let beta = binder.bind(tape, &weights.embedding_norm_beta);
    tape.layer_norm(sum, gamma, beta, config.layer_norm_epsilon)
}

fn linear(tape: &mut Tape, binder: &mut Binder, x: Var, w: &Parameter, b: &Parameter) -> Result<Var> {
    let wv = binder.bind(tape, w);
    let bv = binder.bind(tape, b);
    let y = tape.matmul(x, wv)?;
    tape.add_bias(y, bv)
}

/// Multi-head self-attention sublayer output (before residual and norm).
pub fn attention(
    tape: &mut Tape,
    binder: &mut Binder,
    layer: &LayerWeights,
    config: &ModelConfig,
    x: Var,
) -> Result<Var> {
    let q = linear(tape, binder, x, &layer.query_weight, &layer.query_bias)?;
    let k = linear(tape, binder, x, &layer.key_weight, &layer.key_bias)?;
    let v = linear(tape, binder, x, &layer.value_weight, &layer.value_bias)?;
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(config.num_heads);
    for head in 0..config.num_heads {
        let qh = tape.slice_cols(q, head * dh, dh)?;
        let kh = tape.slice_cols(k, head * dh, dh)?;
        let vh = tape.slice_cols(v, head * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale)?;
        let probs = tape.softmax_rows(scores)?;
        heads.push(tape.matmul(probs, vh)?);
    }
    let context = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    linear(tape, binder, context, &layer.attention_output_weight, &layer.attention_output_bias)
}

pub fn feed_forward(tape: &mut Tape, binder: &mut Binder, layer: &LayerWeights, x: Var) -> Result<Var> {
    let inner = linear(tape, binder, x, &layer.ffn_in_weight, &layer.ffn_in_bias)?;
    let inner = tape.activation(inner, Activation::Gelu)?;
    linear(tape, binder, inner, &layer.ffn_out_weight, &layer.ffn_out_bias)
}

/// One transformer layer with adapters threaded through both insertion points.
pub fn layer_forward(
    tape: &mut Tape,
    binder: &mut Binder,
    layer: &LayerWeights,
    config: &ModelConfig,
    x: Var,
    adapters: &LayerAdapters,
) -> Result<(Var, LayerHooks)> {
    let eps = config.layer_norm_epsilon;
    let attn = attention(tape, binder, layer, config, x)?;
    let g1 = binder.bind(tape, &layer.attention_norm_gamma);
    let b1 = binder.bind(tape, &layer.attention_norm_beta);
    let h1 = apply_adapter_stack(tape, binder, x, attn, (g1, b1), eps, &adapters.attention)?;
    let ffn = feed_forward(tape, binder, layer, h1)?;
    let g2 = binder.bind(tape, &layer.ffn_norm_gamma);
    let b2 = binder.bind(tape, &layer.ffn_norm_beta);
    let h2 = apply_adapter_stack(tape, binder, h1, ffn, (g2, b2), eps, &adapters.output)?;
    let hooks = LayerHooks {
        attention_output: attn,
        attention_residual: x,
        attention_normed: h1,
        ffn_output: ffn,
        ffn_residual: h1,
        ffn_normed: h2,
    };
    Ok((h2, hooks))
}
