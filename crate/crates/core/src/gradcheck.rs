//! Finite-difference checks through whole transformer layers.

use crate::adapter::{AdapterConfig, StackedAdapter};
use crate::autodiff::{finite_difference_check, Activation, Tape, Var};
use crate::backbone::{layer_forward, BackboneWeights, LayerAdapters, ModelConfig};
use crate::error::Result;
use crate::manager::{AdapterEntry, AdapterType};
use crate::params::{Binder, Initializer};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Maximum relative gradient error with respect to the input hidden states of
/// layer 0, with one adapter of configuration `adapter` active at its insertion
/// points. Adapter weights are randomized so that every adapter path carries
/// signal, and the loss projects the layer output onto a random direction.
pub fn layer_gradient_check(model: &ModelConfig, adapter: &AdapterConfig, seq_len: usize, seed: u64) -> Result<f64> {
    let backbone = BackboneWeights::init(model, seed)?;
    let mut entry = AdapterEntry::new("probe", AdapterType::TextTask, adapter.clone(), model, seed);
    let mut init = Initializer::derived(seed, "gradcheck");
    for p in entry.parameters_mut() {
        let shape = p.shape().to_vec();
        *p.value_mut() = init.truncated_normal(&shape, 0.2);
    }
    let x = init.truncated_normal(&[seq_len, model.hidden_size], 1.0);
    let direction = init.truncated_normal(&[model.hidden_size, 1], 1.0);

    let layer = &backbone.layers[0];
    let adapters = {
        let l = &entry.layers[0];
        LayerAdapters {
            attention: l.attention.iter().map(|w| StackedAdapter { config: &entry.config, weights: w }).collect(),
            output: l.output.iter().map(|w| StackedAdapter { config: &entry.config, weights: w }).collect(),
        }
    };
    let f = |tape: &mut Tape, x: Var| -> Result<Var> {
        let mut binder = Binder::frozen();
        let (out, _) = layer_forward(tape, &mut binder, layer, model, x, &adapters)?;
        let d = tape.constant(direction.clone());
        let proj = tape.matmul(out, d)?;
        let proj = tape.activation(proj, Activation::Tanh)?;
        tape.sum(proj)
    };
    finite_difference_check(f, &x, DEFAULT_STEP)
}
