//! Prediction heads, synthetic tasks, metrics and the training loop.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{ModelConfig, INIT_STD};
use crate::error::{Error, Result};
use crate::manager::{adapter_prefix, Model};
use crate::params::{Binder, Initializer, Ownership, Parameter};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum HeadKind {
    Classification { num_classes: usize },
    Regression,
}

impl HeadKind {
    pub fn outputs(self) -> usize {
        match self {
            HeadKind::Classification { num_classes } => num_classes,
            HeadKind::Regression => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionHead {
    name: String,
    kind: HeadKind,
    model_hash: String,
    weight: Parameter,
    bias: Parameter,
}

pub fn head_prefix(name: &str) -> String {
    format!("head.{name}/")
}

impl PredictionHead {
    pub fn new(name: &str, kind: HeadKind, model: &ModelConfig, seed: u64) -> Self {
        let out = kind.outputs().max(1);
        let mut init = Initializer::derived(seed, &format!("head:{name}"));
        let prefix = head_prefix(name);
        Self {
            name: name.to_string(),
            kind,
            model_hash: model.hash(),
            weight: Parameter::new(
                format!("{prefix}weight"),
                Ownership::Head,
                init.truncated_normal(&[model.hidden_size, out], INIT_STD),
            ),
            bias: Parameter::new(format!("{prefix}bias"), Ownership::Head, Tensor::zeros(&[out])),
        }
    }

    /// Rebuild from stored tensors; shapes are checked against `kind` and `model`.
    pub fn from_tensors(name: &str, kind: HeadKind, model: &ModelConfig, weight: Tensor, bias: Tensor) -> Result<Self> {
        let mut head = Self::new(name, kind, model, 0);
        if weight.shape() != head.weight.shape() || bias.shape() != head.bias.shape() {
            return Err(Error::Format(format!(
                "head tensors have shapes {:?}/{:?}, expected {:?}/{:?}",
                weight.shape(),
                bias.shape(),
                head.weight.shape(),
                head.bias.shape()
            )));
        }
        *head.weight.value_mut() = weight;
        *head.bias.value_mut() = bias;
        Ok(head)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> HeadKind {
        self.kind
    }

    pub fn model_hash(&self) -> &str {
        &self.model_hash
    }

    pub fn weight(&self) -> &Parameter {
        &self.weight
    }

    pub fn bias(&self) -> &Parameter {
        &self.bias
    }

    pub fn parameters(&self) -> [&Parameter; 2] {
        [&self.weight, &self.bias]
    }

    pub fn parameters_mut(&mut self) -> [&mut Parameter; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn round_to_f32(&mut self) {
        for p in self.parameters_mut() {
            p.value_mut().round_to_f32();
        }
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, pooled: Var) -> Result<Var> {
        let w = binder.bind(tape, &self.weight);
        let b = binder.bind(tape, &self.bias);
        let y = tape.matmul(pooled, w)?;
        tape.add_bias(y, b)
    }

    fn loss(&self, tape: &mut Tape, output: Var, example: &Example) -> Result<Var> {
        match self.kind {
            HeadKind::Classification { .. } => tape.cross_entropy(output, example.label),
            HeadKind::Regression => tape.squared_error(output, example.label as f64),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    AdapterOnly,
    FullFinetune,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::AdapterOnly => "adapter_only",
            TrainMode::FullFinetune => "full_finetune",
        }
    }
}

impl FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adapter_only" => Ok(TrainMode::AdapterOnly),
            "full_finetune" => Ok(TrainMode::FullFinetune),
            other => Err(Error::InvalidArgument(format!("unknown mode '{other}', expected adapter_only or full_finetune"))),
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub mode: TrainMode,
    /// Evaluate on the dev split every this many steps (0: only at the end).
    #[serde(default)]
    pub eval_every: usize,
}

impl TrainConfig {
    pub fn new(mode: TrainMode, seed: u64) -> Self {
        let learning_rate = match mode {
            TrainMode::AdapterOnly => 1e-3,
            TrainMode::FullFinetune => 1e-4,
        };
        Self {
            seed,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 16,
            max_steps: 500,
            mode,
            eval_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate must be non-negative, got {}", self.learning_rate)));
        }
        if self.max_steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("max_steps and batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument("adam betas must lie in [0, 1) and epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction. State is keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self { lr: cfg.learning_rate, beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.epsilon, t: 0, moments: HashMap::new() }
    }

    /// Advance the step counter; call once per optimizer step before any [`Adam::update`].
    pub fn tick(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, param: &mut Parameter, grad: &Tensor) {
        let n = grad.numel();
        let (m, v) = self
            .moments
            .entry(param.name().to_string())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), mi), vi) in param.value_mut().data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
            *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }

    /// Names of every parameter that has optimizer state, sorted.
    pub fn state_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.moments.keys().cloned().collect();
        names.sort();
        names
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    MajorityToken,
    ParityOfToken,
    CopyFirstLabel,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::MajorityToken, TaskKind::ParityOfToken, TaskKind::CopyFirstLabel];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::MajorityToken => "majority-token",
            TaskKind::ParityOfToken => "parity-of-token",
            TaskKind::CopyFirstLabel => "copy-first-label",
        }
    }

    pub fn rule(self) -> &'static str {
        match self {
            TaskKind::MajorityToken => "label = 1 iff token 1 occurs more often than token 2",
            TaskKind::ParityOfToken => "label = number of occurrences of token 3 (at most one), modulo 2",
            TaskKind::CopyFirstLabel => "label = 1 iff the first token lies in [12, 20), 0 iff in [4, 12)",
        }
    }
}

impl FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| Error::UnknownTask(s.to_string()))
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Tokens used by the synthetic tasks all lie below this id.
pub const TASK_VOCAB: usize = 32;
pub const CLS_TOKEN: usize = 0;
pub const MAJORITY_A: usize = 1;
pub const MAJORITY_B: usize = 2;
pub const PARITY_TOKEN: usize = 3;
pub const DEFAULT_SEQ_LEN: usize = 16;
const TRAIN_SIZE: usize = 2000;
const DEV_SIZE: usize = 400;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTask {
    pub kind: TaskKind,
    pub seed: u64,
    pub seq_len: usize,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
}

impl ToyTask {
    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn rule(&self) -> &'static str {
        self.kind.rule()
    }
}

pub fn generate_toy_task(name: &str, seed: u64) -> Result<ToyTask> {
    generate_toy_task_with_len(name, seed, DEFAULT_SEQ_LEN)
}

pub fn generate_toy_task_with_len(name: &str, seed: u64, seq_len: usize) -> Result<ToyTask> {
    let kind: TaskKind = name.parse()?;
    if seq_len < 8 {
        return Err(Error::InvalidArgument(format!("toy tasks need seq_len >= 8, got {seq_len}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut draw_split = |size: usize, rng: &mut ChaCha8Rng| {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            let label = out.len() % 2;
            let ex = sample_example(kind, label, seq_len, rng);
            if seen.insert(ex.tokens.clone()) {
                out.push(ex);
            }
        }
        out.shuffle(rng);
        out
    };
    let train = draw_split(TRAIN_SIZE, &mut rng);
    let dev = draw_split(DEV_SIZE, &mut rng);
    Ok(ToyTask { kind, seed, seq_len, train, dev })
}

fn fill(rng: &mut ChaCha8Rng, len: usize, lo: usize) -> Vec<usize> {
    (0..len).map(|_| rng.random_range(lo..TASK_VOCAB)).collect()
}

fn place(rng: &mut ChaCha8Rng, body: &mut [usize], token: usize, count: usize, taken: &mut Vec<usize>) {
    let mut placed = 0;
    while placed < count {
        let pos = rng.random_range(0..body.len());
        if !taken.contains(&pos) {
            body[pos] = token;
            taken.push(pos);
            placed += 1;
        }
    }
}

fn sample_example(kind: TaskKind, label: usize, seq_len: usize, rng: &mut ChaCha8Rng) -> Example {
    match kind {
        TaskKind::MajorityToken => {
            let more = rng.random_range(1..=5usize);
            let fewer = rng.random_range(0..more);
            let (a, b) = if label == 1 { (more, fewer) } else { (fewer, more) };
            let mut body = fill(rng, seq_len - 1, PARITY_TOKEN + 1);
            let mut taken = Vec::new();
            place(rng, &mut body, MAJORITY_A, a, &mut taken);
            place(rng, &mut body, MAJORITY_B, b, &mut taken);
            let mut tokens = vec![CLS_TOKEN];
            tokens.extend(body);
            Example { tokens, label }
        }
        TaskKind::ParityOfToken => {
            let count = label;
            let mut body = fill(rng, seq_len - 1, PARITY_TOKEN + 1);
            place(rng, &mut body, PARITY_TOKEN, count, &mut Vec::new());
            let mut tokens = vec![CLS_TOKEN];
            tokens.extend(body);
            Example { tokens, label }
        }
        TaskKind::CopyFirstLabel => {
            let first = if label == 1 { rng.random_range(12..20) } else { rng.random_range(4..12) };
            let mut tokens = vec![first];
            tokens.extend(fill(rng, seq_len - 1, 4));
            Example { tokens, label }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Accuracy,
    F1,
    Spearman,
}

pub fn accuracy(predicted: &[usize], gold: &[usize]) -> Result<f64> {
    if gold.is_empty() {
        return Err(Error::EmptySplit);
    }
    let hits = predicted.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Binary F1 with class 1 as positive; zero denominators give 0.
pub fn f1_score(predicted: &[usize], gold: &[usize]) -> Result<f64> {
    if gold.is_empty() {
        return Err(Error::EmptySplit);
    }
    let tp = predicted.iter().zip(gold).filter(|(p, g)| **p == 1 && **g == 1).count() as f64;
    let fp = predicted.iter().zip(gold).filter(|(p, g)| **p == 1 && **g != 1).count() as f64;
    let fneg = predicted.iter().zip(gold).filter(|(p, g)| **p != 1 && **g == 1).count() as f64;
    if tp == 0.0 {
        return Ok(0.0);
    }
    let precision = tp / (tp + fp);
    let recall = tp / (tp + fneg);
    Ok(2.0 * precision * recall / (precision + recall))
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties; 0 when either side is constant.
pub fn spearman(predicted: &[f64], gold: &[f64]) -> Result<f64> {
    if gold.is_empty() {
        return Err(Error::EmptySplit);
    }
    let (rp, rg) = (ranks(predicted), ranks(gold));
    let n = rp.len() as f64;
    let (mp, mg) = (rp.iter().sum::<f64>() / n, rg.iter().sum::<f64>() / n);
    let cov: f64 = rp.iter().zip(&rg).map(|(a, b)| (a - mp) * (b - mg)).sum();
    let vp: f64 = rp.iter().map(|a| (a - mp) * (a - mp)).sum();
    let vg: f64 = rg.iter().map(|b| (b - mg) * (b - mg)).sum();
    if vp == 0.0 || vg == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vp * vg).sqrt())
}

/// Raw head output for one sequence through the active stack.
pub fn head_output(model: &Model, head: &str, tokens: &[usize]) -> Result<Vec<f64>> {
    let head = model.head(head)?;
    let mut tape = Tape::new();
    let mut binder = Binder::frozen();
    let (_, pooled) = model.forward(&mut tape, &mut binder, tokens, model.active_stack())?;
    let out = head.forward(&mut tape, &mut binder, pooled)?;
    Ok(tape.value(out).data().to_vec())
}

/// Predicted class (argmax, lowest index on ties) for a classification head.
pub fn predict_class(model: &Model, head: &str, tokens: &[usize]) -> Result<usize> {
    let out = head_output(model, head, tokens)?;
    let mut best = 0;
    for (i, v) in out.iter().enumerate() {
        if *v > out[best] {
            best = i;
        }
    }
    Ok(best)
}

pub fn evaluate(model: &Model, head: &str, split: &[Example], metric: Metric) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::EmptySplit);
    }
    match metric {
        Metric::Accuracy | Metric::F1 => {
            let predicted = split.iter().map(|ex| predict_class(model, head, &ex.tokens)).collect::<Result<Vec<_>>>()?;
            let gold: Vec<usize> = split.iter().map(|ex| ex.label).collect();
            if metric == Metric::Accuracy {
                accuracy(&predicted, &gold)
            } else {
                f1_score(&predicted, &gold)
            }
        }
        Metric::Spearman => {
            let predicted = split
                .iter()
                .map(|ex| head_output(model, head, &ex.tokens).map(|o| o[0]))
                .collect::<Result<Vec<_>>>()?;
            let gold: Vec<f64> = split.iter().map(|ex| ex.label as f64).collect();
            spearman(&predicted, &gold)
        }
    }
}

fn default_metric(kind: HeadKind) -> Metric {
    match kind {
        HeadKind::Classification { .. } => Metric::Accuracy,
        HeadKind::Regression => Metric::Spearman,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub dev_metric: f64,
}

impl TrainLog {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        self.steps.iter().map(|s| serde_json::to_string(s).expect("record serializes") + "\n").collect()
    }
}

/// Drives optimizer steps for one head on one model.
pub struct Trainer {
    head: String,
    cfg: TrainConfig,
    adam: Adam,
    trainable_adapters: Vec<String>,
    stack: Vec<String>,
}

impl Trainer {
    pub fn new(model: &Model, head: &str, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let h = model.head(head)?;
        if h.model_hash() != model.config().hash() {
            return Err(Error::IncompatibleModel { package: h.model_hash().to_string(), live: model.config().hash() });
        }
        let stack = model.active_stack().to_vec();
        let trainable_adapters = match cfg.mode {
            TrainMode::AdapterOnly => {
                let state = model.state();
                if stack.is_empty()
                    || !state.frozen_base
                    || state.trainable.is_empty()
                    || !state.trainable.iter().all(|n| stack.contains(n))
                {
                    return Err(Error::NoActiveStack);
                }
                state.trainable.clone()
            }
            TrainMode::FullFinetune => stack.clone(),
        };
        Ok(Self { head: head.to_string(), cfg: cfg.clone(), adam: Adam::new(cfg), trainable_adapters, stack })
    }

    pub fn optimizer(&self) -> &Adam {
        &self.adam
    }

    fn binder(&self) -> Binder<'static> {
        let adapter_prefixes: Vec<String> = self.trainable_adapters.iter().map(|n| adapter_prefix(n)).collect();
        let head_prefix = head_prefix(&self.head);
        let full = self.cfg.mode == TrainMode::FullFinetune;
        Binder::new(move |p: &Parameter| match p.ownership() {
            Ownership::Base => full,
            Ownership::Adapter => adapter_prefixes.iter().any(|pre| p.name().starts_with(pre.as_str())),
            Ownership::Head => p.name().starts_with(head_prefix.as_str()),
        })
    }

    /// Mean loss over a batch, recorded on `tape`.
    fn batch_loss(&self, model: &Model, tape: &mut Tape, binder: &mut Binder, batch: &[&Example]) -> Result<Var> {
        let head = model.head(&self.head)?;
        let mut total: Option<Var> = None;
        for ex in batch {
            let (_, pooled) = model.forward(tape, binder, &ex.tokens, &self.stack)?;
            let out = head.forward(tape, binder, pooled)?;
            let l = head.loss(tape, out, ex)?;
            total = Some(match total {
                Some(t) => tape.add(t, l)?,
                None => l,
            });
        }
        let total = total.ok_or(Error::EmptySplit)?;
        tape.scale(total, 1.0 / batch.len() as f64)
    }

    /// Loss on a batch without updating anything.
    pub fn loss(&self, model: &Model, batch: &[&Example]) -> Result<f64> {
        let mut tape = Tape::new();
        let mut binder = Binder::frozen();
        let l = self.batch_loss(model, &mut tape, &mut binder, batch)?;
        Ok(tape.value(l).item())
    }

    /// One optimizer step; returns the pre-update batch loss.
    pub fn step(&mut self, model: &mut Model, batch: &[&Example]) -> Result<f64> {
        let mut tape = Tape::new();
        let mut binder = self.binder();
        let loss = self.batch_loss(model, &mut tape, &mut binder, batch)?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        self.adam.tick();
        let mut params = model.parameters_by_name_mut();
        for (name, var) in binder.bound() {
            if let Some(g) = grads.get(var) {
                let p = params.get_mut(name).expect("bound parameter belongs to the model");
                self.adam.update(p, g);
            }
        }
        Ok(value)
    }
}

/// Sample the batch drawn at each step; deterministic in the seed.
pub fn batch_indices(seed: u64, train_len: usize, batch_size: usize, steps: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..steps).map(|_| (0..batch_size).map(|_| rng.random_range(0..train_len)).collect()).collect()
}

/// Run `cfg.max_steps` optimizer steps. Trained weights are rounded to 32-bit
/// precision before the final evaluation, so the reported metric is the one a
/// saved package reproduces.
pub fn train(model: &mut Model, head: &str, task: &ToyTask, cfg: &TrainConfig) -> Result<TrainLog> {
    let mut trainer = Trainer::new(model, head, cfg)?;
    let metric = default_metric(model.head(head)?.kind());
    let mut steps = Vec::with_capacity(cfg.max_steps);
    for (i, idx) in batch_indices(cfg.seed, task.train.len(), cfg.batch_size, cfg.max_steps).into_iter().enumerate() {
        let batch: Vec<&Example> = idx.iter().map(|&j| &task.train[j]).collect();
        let loss = trainer.step(model, &batch)?;
        let step = i + 1;
        let dev_metric = if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
            Some(evaluate(model, head, &task.dev, metric)?)
        } else {
            None
        };
        steps.push(StepRecord { step, loss, dev_metric });
    }
    for name in &trainer.trainable_adapters {
        let entry = model.adapter_mut(name)?;
        entry.trained = true;
        entry.round_to_f32();
    }
    model.head_mut(head)?.round_to_f32();
    if cfg.mode == TrainMode::FullFinetune {
        for p in model.backbone_mut().parameters_mut() {
            p.value_mut().round_to_f32();
        }
    }
    let dev_metric = evaluate(model, head, &task.dev, metric)?;
    Ok(TrainLog { steps, dev_metric })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_definitions() {
        assert_eq!(accuracy(&[1, 0, 1], &[1, 0, 1]).unwrap(), 1.0);
        assert_eq!(f1_score(&[0, 0, 0], &[1, 0, 1]).unwrap(), 0.0);
        assert!((f1_score(&[1, 1, 0, 0], &[1, 0, 1, 0]).unwrap() - 0.5).abs() < 1e-12);
        let gold = [0.1, 0.5, 0.2, 3.0, -1.0];
        let mono: Vec<f64> = gold.iter().map(|v: &f64| v.exp() * 3.0 + 1.0).collect();
        assert!((spearman(&mono, &gold).unwrap() - 1.0).abs() < 1e-12);
        let anti: Vec<f64> = gold.iter().map(|v| -v).collect();
        assert!((spearman(&anti, &gold).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(accuracy(&[], &[]), Err(Error::EmptySplit)));
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    #[test]
    fn toy_tasks_are_deterministic_balanced_and_disjoint() {
        for kind in TaskKind::ALL {
            let a = generate_toy_task(kind.name(), 3).unwrap();
            let b = generate_toy_task(kind.name(), 3).unwrap();
            assert_eq!(a, b);
            for split in [&a.train, &a.dev] {
                let ones = split.iter().filter(|e| e.label == 1).count() as f64 / split.len() as f64;
                assert!((ones - 0.5).abs() <= 0.1, "{kind}: {ones}");
                assert!(split.iter().all(|e| e.tokens.len() == DEFAULT_SEQ_LEN));
            }
            let train: HashSet<_> = a.train.iter().map(|e| &e.tokens).collect();
            assert!(a.dev.iter().all(|e| !train.contains(&e.tokens)));
        }
        assert!(matches!(generate_toy_task("nope", 1), Err(Error::UnknownTask(_))));
    }

    #[test]
    fn labels_follow_their_rules() {
        let maj = generate_toy_task("majority-token", 9).unwrap();
        for ex in maj.train.iter().chain(&maj.dev) {
            let a = ex.tokens.iter().filter(|&&t| t == MAJORITY_A).count();
            let b = ex.tokens.iter().filter(|&&t| t == MAJORITY_B).count();
            assert_ne!(a, b);
            assert_eq!(ex.label, (a > b) as usize);
        }
        let par = generate_toy_task("parity-of-token", 9).unwrap();
        for ex in &par.train {
            let c = ex.tokens.iter().filter(|&&t| t == PARITY_TOKEN).count();
            assert_eq!(ex.label, c % 2);
            // toggling one occurrence of the designated token flips the label
            let mut toggled = ex.tokens.clone();
            let pos = toggled.iter().position(|&t| t != PARITY_TOKEN && t != CLS_TOKEN).unwrap();
            toggled[pos] = PARITY_TOKEN;
            let c2 = toggled.iter().filter(|&&t| t == PARITY_TOKEN).count();
            assert_ne!(c2 % 2, ex.label);
        }
        let copy = generate_toy_task("copy-first-label", 9).unwrap();
        for ex in &copy.train {
            assert_eq!(ex.label, (12..20).contains(&ex.tokens[0]) as usize);
        }
    }

    #[test]
    fn majority_labels_balanced_at_len_16() {
        let t = generate_toy_task_with_len("majority-token", 77, 16).unwrap();
        let ones = t.dev.iter().filter(|e| e.label == 1).count() as f64 / t.dev.len() as f64;
        assert!((0.4..=0.6).contains(&ones));
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::new(TrainMode::AdapterOnly, 1);
        assert!(cfg.validate().is_ok());
        cfg.max_steps = 0;
        assert!(cfg.validate().is_err());
        assert_eq!(TrainConfig::new(TrainMode::FullFinetune, 1).learning_rate, 1e-4);
    }
}
