//! Tensors, the decoder-only transformer and low-rank adapters.

pub mod kernels;
pub mod lora;
pub mod tensor;
pub mod transformer;

use alloc::vec::Vec;

pub use lora::{attach_lora, AdapterState, LoraAdapter, LoraConfig, LoraModel};
pub use tensor::Tensor;
pub use transformer::{param_names, Matrix, Tape, Transformer, TransformerConfig};

use crate::error::Result;
use crate::real::Real;

/// A causal language model whose trainable tensors can be stepped by an optimizer.
pub trait CausalLm<T: Real> {
    fn model_config(&self) -> &TransformerConfig;
    fn record(&self, tokens: &[u32], tape: &mut Tape<T>) -> Result<()>;
    fn logits_at(&self, tape: &Tape<T>, positions: &[usize]) -> Result<Vec<T>>;
    /// Accumulates gradients into the trainable tensors.
    fn backward(&mut self, tape: &Tape<T>, positions: &[usize], dlogits: &[T]) -> Result<()>;
    /// Trainable tensors in a stable order.
    fn trainable(&self) -> Vec<&Tensor<T>>;
    fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>>;
}

impl<T: Real> CausalLm<T> for Transformer<T> {
    fn model_config(&self) -> &TransformerConfig {
        self.config()
    }
    fn record(&self, tokens: &[u32], tape: &mut Tape<T>) -> Result<()> {
        Transformer::record(self, tokens, tape)
    }
    fn logits_at(&self, tape: &Tape<T>, positions: &[usize]) -> Result<Vec<T>> {
        Transformer::logits_at(self, tape, positions)
    }
    fn backward(&mut self, tape: &Tape<T>, positions: &[usize], dlogits: &[T]) -> Result<()> {
        Transformer::backward(self, tape, positions, dlogits)
    }
    fn trainable(&self) -> Vec<&Tensor<T>> {
        self.params().iter().collect()
    }
    fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.params_mut().iter_mut().collect()
    }
}

impl<T: Real> CausalLm<T> for LoraModel<T> {
    fn model_config(&self) -> &TransformerConfig {
        LoraModel::model_config(self)
    }
    fn record(&self, tokens: &[u32], tape: &mut Tape<T>) -> Result<()> {
        LoraModel::record(self, tokens, tape)
    }
    fn logits_at(&self, tape: &Tape<T>, positions: &[usize]) -> Result<Vec<T>> {
        LoraModel::logits_at(self, tape, positions)
    }
    fn backward(&mut self, tape: &Tape<T>, positions: &[usize], dlogits: &[T]) -> Result<()> {
        LoraModel::backward(self, tape, positions, dlogits)
    }
    fn trainable(&self) -> Vec<&Tensor<T>> {
        self.adapters().iter().flat_map(|a| [&a.a, &a.b]).collect()
    }
    fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.adapters_mut().iter_mut().flat_map(|a| [&mut a.a, &mut a.b]).collect()
    }
}
