//! Bottleneck adapters: configuration space, presets, parameter accounting
//! and the per-layer computation.
//!
//! An adapter at an insertion point computes
//!
//! ```text
//! out = ln_after( residual + up( act( down( ln_before(input) ) ) ) )
//! ```
//!
//! where `input` and `residual` are picked from the hook signals of the
//! surrounding "Add & Norm" block according to [`AdapterInput`] and
//! [`ResidualSource`]. The up-projection starts at zero, so a fresh adapter
//! without new layer norms returns `residual` bit for bit.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Activation, Tape, Var};
use crate::backbone::{ModelConfig, INIT_STD};
use crate::error::{Error, Result};
use crate::params::{Binder, Initializer, Ownership, Parameter};
use crate::tensor::Tensor;

/// Which hook signal feeds the adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterInput {
    /// Sublayer output before the residual add.
    SublayerOutput,
    /// Output of the block's original layer norm.
    AfterOriginalLn,
}

/// Which signal the adapter's skip connection adds back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualSource {
    AdapterInput,
    /// The residual stream of the block: the block input when the adapter
    /// reads the sublayer output, or the pre-norm sum when it reads the
    /// normalized output.
    PreSublayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InsertionPoint {
    Attention,
    Output,
}

impl InsertionPoint {
    pub fn as_str(self) -> &'static str {
        match self {
            InsertionPoint::Attention => "attention",
            InsertionPoint::Output => "output",
        }
    }
}

impl AdapterInput {
    pub fn as_str(self) -> &'static str {
        match self {
            AdapterInput::SublayerOutput => "sublayer_output",
            AdapterInput::AfterOriginalLn => "after_original_ln",
        }
    }
}

impl FromStr for AdapterInput {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sublayer_output" => Ok(AdapterInput::SublayerOutput),
            "after_original_ln" => Ok(AdapterInput::AfterOriginalLn),
            other => Err(Error::InvalidConfig(format!("unknown adapter_input '{other}'"))),
        }
    }
}

impl ResidualSource {
    pub fn as_str(self) -> &'static str {
        match self {
            ResidualSource::AdapterInput => "adapter_input",
            ResidualSource::PreSublayer => "pre_sublayer",
        }
    }
}

impl FromStr for ResidualSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adapter_input" => Ok(ResidualSource::AdapterInput),
            "pre_sublayer" => Ok(ResidualSource::PreSublayer),
            other => Err(Error::InvalidConfig(format!("unknown residual_source '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub reduction_factor: usize,
    pub non_linearity: Activation,
    pub mh_adapter: bool,
    pub output_adapter: bool,
    pub new_ln_before: bool,
    pub new_ln_after: bool,
    pub adapter_input: AdapterInput,
    pub residual_source: ResidualSource,
}

const DESCRIPTOR_KEYS: [&str; 8] = [
    "reduction_factor",
    "non_linearity",
    "mh_adapter",
    "output_adapter",
    "new_ln_before",
    "new_ln_after",
    "adapter_input",
    "residual_source",
];

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reduction_factor == 0 {
            return Err(Error::InvalidConfig("reduction_factor must be positive".into()));
        }
        if !self.mh_adapter && !self.output_adapter {
            return Err(Error::InvalidConfig("at least one of mh_adapter, output_adapter must be set".into()));
        }
        Ok(())
    }

    pub fn with_reduction_factor(mut self, reduction_factor: usize) -> Self {
        self.reduction_factor = reduction_factor;
        self
    }

    pub fn insertion_points(&self) -> Vec<InsertionPoint> {
        let mut points = Vec::with_capacity(2);
        if self.mh_adapter {
            points.push(InsertionPoint::Attention);
        }
        if self.output_adapter {
            points.push(InsertionPoint::Output);
        }
        points
    }

    pub fn has_new_layer_norms(&self) -> bool {
        self.new_ln_before || self.new_ln_after
    }

    /// Canonical descriptor; its hash identifies the architecture.
    pub fn descriptor(&self) -> String {
        format!(
            "reduction_factor={}\nnon_linearity={}\nmh_adapter={}\noutput_adapter={}\nnew_ln_before={}\nnew_ln_after={}\nadapter_input={}\nresidual_source={}\n",
            self.reduction_factor,
            self.non_linearity,
            self.mh_adapter,
            self.output_adapter,
            self.new_ln_before,
            self.new_ln_after,
            self.adapter_input.as_str(),
            self.residual_source.as_str(),
        )
    }

    pub fn from_descriptor(text: &str) -> Result<Self> {
        let kv = crate::descriptor::parse(text)?;
        let cfg = Self {
            reduction_factor: kv.parse("reduction_factor")?,
            non_linearity: kv.string("non_linearity")?.parse()?,
            mh_adapter: kv.parse("mh_adapter")?,
            output_adapter: kv.parse("output_adapter")?,
            new_ln_before: kv.parse("new_ln_before")?,
            new_ln_after: kv.parse("new_ln_after")?,
            adapter_input: kv.string("adapter_input")?.parse()?,
            residual_source: kv.string("residual_source")?.parse()?,
        };
        kv.finish_with(&DESCRIPTOR_KEYS)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.descriptor().as_bytes()))
    }

    /// Name of the preset this configuration equals, ignoring the reduction factor.
    pub fn matching_preset(&self) -> Option<Preset> {
        Preset::ALL
            .into_iter()
            .find(|p| p.config().with_reduction_factor(self.reduction_factor) == *self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Preset {
    Pfeiffer,
    Houlsby,
    Bapna,
}

pub const DEFAULT_REDUCTION_FACTOR: usize = 16;

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Pfeiffer, Preset::Houlsby, Preset::Bapna];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Pfeiffer => "pfeiffer",
            Preset::Houlsby => "houlsby",
            Preset::Bapna => "bapna",
        }
    }

    pub fn config(self) -> AdapterConfig {
        let base = AdapterConfig {
            reduction_factor: DEFAULT_REDUCTION_FACTOR,
            non_linearity: Activation::Relu,
            mh_adapter: false,
            output_adapter: true,
            new_ln_before: false,
            new_ln_after: false,
            adapter_input: AdapterInput::SublayerOutput,
            residual_source: ResidualSource::AdapterInput,
        };
        match self {
            Preset::Pfeiffer => base,
            Preset::Houlsby => AdapterConfig { mh_adapter: true, non_linearity: Activation::Swish, ..base },
            Preset::Bapna => AdapterConfig { new_ln_before: true, ..base },
        }
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| Error::UnknownPreset {
            name: s.to_string(),
            valid: Preset::ALL.map(Preset::name).join(", "),
        })
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn preset(name: &str) -> Result<AdapterConfig> {
    Ok(name.parse::<Preset>()?.config())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bottleneck {
    pub size: usize,
    /// Set when `hidden` is not divisible by the reduction factor or the
    /// quotient had to be clamped up to 1.
    pub inexact: bool,
}

pub fn resolve_bottleneck(hidden: usize, reduction_factor: usize) -> Bottleneck {
    let rf = reduction_factor.max(1);
    let raw = hidden / rf;
    Bottleneck { size: raw.max(1), inexact: !hidden.is_multiple_of(rf) || raw == 0 }
}

/// Exact number of adapter parameters over all layers and insertion points.
pub fn count_adapter_params(model: &ModelConfig, config: &AdapterConfig) -> usize {
    let h = model.hidden_size;
    let b = resolve_bottleneck(h, config.reduction_factor).size;
    let norms = 2 * h * (config.new_ln_before as usize + config.new_ln_after as usize);
    let per_point = h * b + b + b * h + h + norms;
    model.num_layers * config.insertion_points().len() * per_point
}

/// Down- and up-projection parameters only, layer norms excluded.
pub fn count_projection_params(model: &ModelConfig, config: &AdapterConfig) -> usize {
    let h = model.hidden_size;
    let b = resolve_bottleneck(h, config.reduction_factor).size;
    model.num_layers * config.insertion_points().len() * (h * b + b + b * h + h)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub gamma: Parameter,
    pub beta: Parameter,
}

/// Adapter weights at one insertion point of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterLayerWeights {
    pub point: InsertionPoint,
    pub down_weight: Parameter,
    pub down_bias: Parameter,
    pub up_weight: Parameter,
    pub up_bias: Parameter,
    pub norm_before: Option<NormParams>,
    pub norm_after: Option<NormParams>,
}

/// Name of a tensor inside an adapter, relative to the adapter itself.
pub fn adapter_tensor_name(layer: usize, point: InsertionPoint, suffix: &str) -> String {
    format!("layer.{layer}.{}.{suffix}", point.as_str())
}

impl AdapterLayerWeights {
    /// Fresh weights: truncated-normal down-projection, zero up-projection and biases.
    pub fn init(
        prefix: &str,
        layer: usize,
        point: InsertionPoint,
        hidden: usize,
        config: &AdapterConfig,
        init: &mut Initializer,
    ) -> Self {
        let b = resolve_bottleneck(hidden, config.reduction_factor).size;
        let p = |suffix: &str, t: Tensor| {
            Parameter::new(format!("{prefix}{}", adapter_tensor_name(layer, point, suffix)), Ownership::Adapter, t)
        };
        let norm = |which: &str| NormParams {
            gamma: p(&format!("{which}.gamma"), Tensor::ones(&[hidden])),
            beta: p(&format!("{which}.beta"), Tensor::zeros(&[hidden])),
        };
        Self {
            point,
            down_weight: p("down.weight", init.truncated_normal(&[hidden, b], INIT_STD)),
            down_bias: p("down.bias", Tensor::zeros(&[b])),
            up_weight: p("up.weight", Tensor::zeros(&[b, hidden])),
            up_bias: p("up.bias", Tensor::zeros(&[hidden])),
            norm_before: config.new_ln_before.then(|| norm("norm_before")),
            norm_after: config.new_ln_after.then(|| norm("norm_after")),
        }
    }

    /// Parameters in canonical order.
    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut out = vec![&self.down_weight, &self.down_bias, &self.up_weight, &self.up_bias];
        for n in [&self.norm_before, &self.norm_after].into_iter().flatten() {
            out.push(&n.gamma);
            out.push(&n.beta);
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = vec![&mut self.down_weight, &mut self.down_bias, &mut self.up_weight, &mut self.up_bias];
        for n in [&mut self.norm_before, &mut self.norm_after].into_iter().flatten() {
            out.push(&mut n.gamma);
            out.push(&mut n.beta);
        }
        out
    }

    pub fn hidden_size(&self) -> usize {
        self.down_weight.shape()[0]
    }

    fn check(&self, config: &AdapterConfig) -> Result<()> {
        if config.new_ln_before != self.norm_before.is_some() || config.new_ln_after != self.norm_after.is_some() {
            return Err(Error::InvalidConfig("adapter weights do not match the layer-norm settings".into()));
        }
        let expected = resolve_bottleneck(self.hidden_size(), config.reduction_factor).size;
        if self.down_weight.shape()[1] != expected {
            return Err(Error::InvalidConfig(format!(
                "bottleneck is {} but the configuration implies {expected}",
                self.down_weight.shape()[1]
            )));
        }
        Ok(())
    }
}

/// One adapter taking part in a stack at some insertion point.
#[derive(Debug, Clone, Copy)]
pub struct StackedAdapter<'a> {
    pub config: &'a AdapterConfig,
    pub weights: &'a AdapterLayerWeights,
}

fn norm(tape: &mut Tape, binder: &mut Binder, x: Var, p: &NormParams, eps: f64) -> Result<Var> {
    let g = binder.bind(tape, &p.gamma);
    let b = binder.bind(tape, &p.beta);
    tape.layer_norm(x, g, b, eps)
}

/// The bottleneck computation for one adapter.
pub fn adapter_forward(
    tape: &mut Tape,
    binder: &mut Binder,
    hidden: Var,
    residual: Var,
    weights: &AdapterLayerWeights,
    config: &AdapterConfig,
    epsilon: f64,
) -> Result<Var> {
    weights.check(config)?;
    let input = match &weights.norm_before {
        Some(n) => norm(tape, binder, hidden, n, epsilon)?,
        None => hidden,
    };
    let wd = binder.bind(tape, &weights.down_weight);
    let bd = binder.bind(tape, &weights.down_bias);
    let wu = binder.bind(tape, &weights.up_weight);
    let bu = binder.bind(tape, &weights.up_bias);
    let down = tape.matmul(input, wd)?;
    let down = tape.add_bias(down, bd)?;
    let act = tape.activation(down, config.non_linearity)?;
    let up = tape.matmul(act, wu)?;
    let up = tape.add_bias(up, bu)?;
    let out = tape.add(residual, up)?;
    match &weights.norm_after {
        Some(n) => norm(tape, binder, out, n, epsilon),
        None => Ok(out),
    }
}

/// The "Add & Norm" block of a sublayer with a stack of adapters.
///
/// The first adapter of the stack decides the wiring; each later adapter
/// takes the previous adapter's output as both input and residual.
pub fn apply_adapter_stack(
    tape: &mut Tape,
    binder: &mut Binder,
    block_input: Var,
    sublayer_output: Var,
    original_norm: (Var, Var),
    epsilon: f64,
    stack: &[StackedAdapter],
) -> Result<Var> {
    let (gamma, beta) = original_norm;
    let Some(first) = stack.first() else {
        let sum = tape.add(block_input, sublayer_output)?;
        return tape.layer_norm(sum, gamma, beta, epsilon);
    };
    let chain = |tape: &mut Tape, binder: &mut Binder, input: Var, residual: Var| -> Result<Var> {
        let mut z = adapter_forward(tape, binder, input, residual, first.weights, first.config, epsilon)?;
        for next in &stack[1..] {
            z = adapter_forward(tape, binder, z, z, next.weights, next.config, epsilon)?;
        }
        Ok(z)
    };
    match (first.config.adapter_input, first.config.residual_source) {
        (AdapterInput::SublayerOutput, ResidualSource::AdapterInput) => {
            let z = chain(tape, binder, sublayer_output, sublayer_output)?;
            let sum = tape.add(block_input, z)?;
            tape.layer_norm(sum, gamma, beta, epsilon)
        }
        (AdapterInput::SublayerOutput, ResidualSource::PreSublayer) => {
            let z = chain(tape, binder, sublayer_output, block_input)?;
            let sum = tape.add(z, sublayer_output)?;
            tape.layer_norm(sum, gamma, beta, epsilon)
        }
        (AdapterInput::AfterOriginalLn, ResidualSource::AdapterInput) => {
            let sum = tape.add(block_input, sublayer_output)?;
            let normed = tape.layer_norm(sum, gamma, beta, epsilon)?;
            chain(tape, binder, normed, normed)
        }
        (AdapterInput::AfterOriginalLn, ResidualSource::PreSublayer) => {
            let sum = tape.add(block_input, sublayer_output)?;
            let normed = tape.layer_norm(sum, gamma, beta, epsilon)?;
            let z = chain(tape, binder, normed, sum)?;
            tape.layer_norm(z, gamma, beta, epsilon)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;

    #[test]
    fn bottleneck_sizes() {
        assert_eq!(resolve_bottleneck(768, 64), Bottleneck { size: 12, inexact: false });
        assert_eq!(resolve_bottleneck(768, 16), Bottleneck { size: 48, inexact: false });
        assert_eq!(resolve_bottleneck(64, 128), Bottleneck { size: 1, inexact: true });
        assert_eq!(resolve_bottleneck(100, 3), Bottleneck { size: 33, inexact: true });
    }

    #[test]
    fn presets_resolve() {
        let pf = preset("pfeiffer").unwrap();
        assert!(!pf.mh_adapter && pf.output_adapter);
        let ho = preset("houlsby").unwrap();
        assert!(ho.mh_adapter && ho.output_adapter);
        assert_eq!(ho.non_linearity, Activation::Swish);
        let ba = preset("bapna").unwrap();
        assert!(ba.new_ln_before && !ba.mh_adapter);
        let err = preset("nonexistent").unwrap_err().to_string();
        assert!(err.contains("pfeiffer, houlsby, bapna"), "{err}");
    }

    #[test]
    fn descriptor_round_trip_and_preset_detection() {
        for p in Preset::ALL {
            let cfg = p.config().with_reduction_factor(8);
            let back = AdapterConfig::from_descriptor(&cfg.descriptor()).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.matching_preset(), Some(p));
        }
        assert_ne!(preset("pfeiffer").unwrap().hash(), preset("houlsby").unwrap().hash());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = preset("pfeiffer").unwrap();
        cfg.output_adapter = false;
        assert!(cfg.validate().is_err());
        assert!(AdapterConfig::from_descriptor("reduction_factor=0\n").is_err());
    }

    #[test]
    fn base_table_counts() {
        let base = ModelConfig::bert_base();
        let pf = preset("pfeiffer").unwrap();
        assert_eq!(count_adapter_params(&base, &pf.clone().with_reduction_factor(64)), 230_544);
        assert_eq!(count_adapter_params(&base, &pf.with_reduction_factor(16)), 894_528);
    }

    fn weights_for(h: usize, cfg: &AdapterConfig, seed: u64) -> AdapterLayerWeights {
        AdapterLayerWeights::init("t/", 0, InsertionPoint::Output, h, cfg, &mut Initializer::new(seed))
    }

    #[test]
    fn fresh_adapter_is_exact_identity_on_residual() {
        let cfg = preset("pfeiffer").unwrap().with_reduction_factor(2);
        let w = weights_for(4, &cfg, 1);
        let mut tape = Tape::new();
        let mut binder = Binder::frozen();
        let hidden = tape.constant(Tensor::new(vec![2, 4], vec![0.3, -1.0, 2.0, 0.1, 5.0, -0.2, 0.0, 1.5]).unwrap());
        let residual = tape.constant(Tensor::new(vec![2, 4], vec![1.0, -2.0, 3.5, -0.25, 0.0, 7.0, -1e-3, 2.0]).unwrap());
        let out = adapter_forward(&mut tape, &mut binder, hidden, residual, &w, &cfg, 1e-12).unwrap();
        assert!(tape.value(out).bit_eq(tape.value(residual)));
    }

    #[test]
    fn identity_projections_reproduce_nonnegative_input() {
        let cfg = preset("pfeiffer").unwrap().with_reduction_factor(1);
        let mut w = weights_for(3, &cfg, 1);
        let eye = Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        *w.down_weight.value_mut() = eye.clone();
        *w.up_weight.value_mut() = eye;
        let mut tape = Tape::new();
        let mut binder = Binder::frozen();
        let x = Tensor::new(vec![2, 3], vec![0.5, 0.0, 2.0, 1.0, 3.0, 0.25]).unwrap();
        let hidden = tape.constant(x.clone());
        let residual = tape.constant(Tensor::zeros(&[2, 3]));
        let out = adapter_forward(&mut tape, &mut binder, hidden, residual, &w, &cfg, 1e-12).unwrap();
        assert_eq!(tape.value(out), &x);
    }

    #[test]
    fn gradient_wrt_down_projection_matches_finite_differences() {
        for (i, p) in Preset::ALL.into_iter().enumerate() {
            let cfg = p.config().with_reduction_factor(2);
            let mut w = weights_for(6, &cfg, 10 + i as u64);
            let mut init = Initializer::new(99);
            *w.up_weight.value_mut() = init.truncated_normal(&[3, 6], 0.5);
            *w.up_bias.value_mut() = init.truncated_normal(&[6], 0.5);
            *w.down_bias.value_mut() = init.truncated_normal(&[3], 0.5);
            let hidden = init.truncated_normal(&[3, 6], 1.0);
            let residual = init.truncated_normal(&[3, 6], 1.0);
            let down = init.truncated_normal(&[6, 3], 0.5);
            let err = finite_difference_check(
                |tape, wd| {
                    let mut w = w.clone();
                    *w.down_weight.value_mut() = tape.value(wd).clone();
                    let mut binder = Binder::frozen();
                    // swap the bound leaf for the probed variable
                    binder.alias(w.down_weight.name(), wd);
                    let h = tape.constant(hidden.clone());
                    let r = tape.constant(residual.clone());
                    let out = adapter_forward(tape, &mut binder, h, r, &w, &cfg, 1e-12)?;
                    tape.sum(out)
                },
                &down,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{p}: {err}");
        }
    }

    #[test]
    fn houlsby_projection_count_is_twice_pfeiffer() {
        for model in [ModelConfig::bert_base(), ModelConfig::bert_large(), ModelConfig::desk()] {
            for rf in [2, 16, 64] {
                let pf = preset("pfeiffer").unwrap().with_reduction_factor(rf);
                let ho = preset("houlsby").unwrap().with_reduction_factor(rf);
                assert_eq!(count_projection_params(&model, &ho), 2 * count_projection_params(&model, &pf));
            }
        }
    }
}
