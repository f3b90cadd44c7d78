//! Bottleneck adapters for a compact transformer encoder.
//!
//! The crate covers the whole adapter lifecycle: a small reverse-mode
//! autodiff engine ([`autodiff`]), a post-LN encoder backbone ([`backbone`]),
//! the adapter configuration space ([`adapter`]), the per-model registry
//! ([`manager`]), training with a frozen backbone ([`train`]) and the
//! portable package format ([`package`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapter;
pub mod autodiff;
pub mod backbone;
mod descriptor;
pub mod error;
pub mod gradcheck;
pub mod manager;
pub mod package;
pub mod params;
pub mod tensor;
pub mod train;

pub use adapter::{
    count_adapter_params, count_projection_params, preset, resolve_bottleneck, AdapterConfig, AdapterInput,
    AdapterLayerWeights, InsertionPoint, Preset, ResidualSource,
};
pub use autodiff::{finite_difference_check, Activation, Tape, Var};
pub use backbone::{count_backbone_params, BackboneWeights, ModelConfig};
pub use error::{Error, Result};
pub use manager::{AdapterEntry, AdapterSpec, AdapterType, Encoding, Model};
pub use package::{
    load_adapter, load_backbone, pack_zip, read_package, save_adapter, save_adapter_with_head, save_backbone, verify_zip,
    LoadOptions, Package, VerifyReport,
};
pub use params::{Ownership, Parameter};
pub use tensor::Tensor;
pub use train::{evaluate, generate_toy_task, train, HeadKind, Metric, PredictionHead, TrainConfig, TrainLog, TrainMode};
