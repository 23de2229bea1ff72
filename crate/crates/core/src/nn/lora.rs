//! Low-rank adapters over a frozen transformer.
//!
//! Each adapted matrix behaves as `W + (alpha / r) · B · A` with `B: d_out×r`
//! starting at zero, so attaching adapters leaves the model's function unchanged.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::kernels::axpy;
use super::tensor::Tensor;
use super::transformer::{self, Matrix, Tape, Transformer, TransformerConfig};
use crate::error::{bail, Result};
use crate::real::Real;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<Matrix>,
    /// Standard deviation of the initial `A` entries.
    pub init_std: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 8, alpha: 16.0, targets: vec![Matrix::Query, Matrix::Value], init_std: 0.02 }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self, model: &TransformerConfig) -> Result<()> {
        if self.rank == 0 {
            bail!(Argument, "LoRA rank must be at least 1");
        }
        if !self.alpha.is_finite() || !self.init_std.is_finite() || self.init_std < 0.0 {
            bail!(Argument, "LoRA alpha and init_std must be finite (init_std non-negative)");
        }
        if self.targets.is_empty() {
            bail!(Argument, "LoRA needs at least one target matrix");
        }
        for &m in &self.targets {
            let (o, i) = m.shape(model);
            if self.rank > o.min(i) {
                bail!(Argument, "LoRA rank {} exceeds min dimension of {} ({o}×{i})", self.rank, m.as_str());
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<T> {
    pub layer: usize,
    pub matrix: Matrix,
    /// `r × d_in`
    pub a: Tensor<T>,
    /// `d_out × r`
    pub b: Tensor<T>,
}

impl<T: Real> LoraAdapter<T> {
    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn name(&self) -> String {
        format!("blocks.{}.{}", self.layer, self.matrix.as_str())
    }

    /// `B · A` as a `d_out × d_in` matrix.
    pub fn delta(&self) -> Vec<T> {
        let (d_out, r) = (self.b.shape()[0], self.rank());
        let d_in = self.a.shape()[1];
        let mut out = vec![T::zero(); d_out * d_in];
        for j in 0..d_out {
            for k in 0..r {
                let bjk = self.b.data()[j * r + k];
                if bjk != T::zero() {
                    axpy(bjk, &self.a.data()[k * d_in..(k + 1) * d_in], &mut out[j * d_in..(j + 1) * d_in]);
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterState {
    Attached,
    Merged,
}

/// A frozen base Φ₀ plus trainable adapters Θ.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraModel<T> {
    base: Transformer<T>,
    config: LoraConfig,
    adapters: Vec<LoraAdapter<T>>,
    state: AdapterState,
}

/// Attaches fresh adapters (`B = 0`, `A ~ N(0, init_std)`) to every layer's target matrices.
pub fn attach_lora<T: Real>(base: Transformer<T>, config: LoraConfig, seed: u64) -> Result<LoraModel<T>> {
    config.validate(base.config())?;
    let mut r = rng::seeded(seed);
    let mut targets = config.targets.clone();
    targets.sort();
    targets.dedup();
    let mut adapters = Vec::new();
    for layer in 0..base.config().n_layers {
        for &m in &targets {
            let (o, i) = m.shape(base.config());
            adapters.push(LoraAdapter {
                layer,
                matrix: m,
                a: Tensor::randn(&[config.rank, i], config.init_std, &mut r),
                b: Tensor::zeros(&[o, config.rank]),
            });
        }
    }
    Ok(LoraModel { base, config: LoraConfig { targets, ..config }, adapters, state: AdapterState::Attached })
}

impl<T: Real> LoraModel<T> {
    /// Reassembles a model from saved adapters; shapes are checked against the base.
    pub fn from_parts(base: Transformer<T>, config: LoraConfig, adapters: Vec<LoraAdapter<T>>) -> Result<Self> {
        config.validate(base.config())?;
        for a in &adapters {
            if a.layer >= base.config().n_layers {
                bail!(Argument, "adapter {} refers to a missing layer", a.name());
            }
            let (o, i) = a.matrix.shape(base.config());
            if a.a.shape() != [config.rank, i] || a.b.shape() != [o, config.rank] {
                bail!(Argument, "adapter {} has wrong shapes {:?}/{:?}", a.name(), a.a.shape(), a.b.shape());
            }
        }
        Ok(Self { base, config, adapters, state: AdapterState::Attached })
    }

    pub fn base(&self) -> &Transformer<T> {
        &self.base
    }

    pub fn config(&self) -> &LoraConfig {
        &self.config
    }

    pub fn model_config(&self) -> &TransformerConfig {
        self.base.config()
    }

    pub fn adapters(&self) -> &[LoraAdapter<T>] {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut [LoraAdapter<T>] {
        &mut self.adapters
    }

    pub fn state(&self) -> AdapterState {
        self.state
    }

    pub fn scale(&self) -> T {
        T::of(self.config.scale())
    }

    /// |Θ|
    pub fn trainable_count(&self) -> usize {
        self.adapters.iter().map(|a| a.a.len() + a.b.len()).sum()
    }

    fn active(&self) -> &[LoraAdapter<T>] {
        match self.state {
            AdapterState::Attached => &self.adapters,
            AdapterState::Merged => &[],
        }
    }

    pub fn forward(&self, tokens: &[u32]) -> Result<Tensor<T>> {
        transformer::forward_logits(&self.base, self.active(), self.scale(), tokens)
    }

    pub fn record(&self, tokens: &[u32], tape: &mut Tape<T>) -> Result<()> {
        transformer::record(&self.base, self.active(), self.scale(), tokens, tape)
    }

    pub fn logits_at(&self, tape: &Tape<T>, positions: &[usize]) -> Result<Vec<T>> {
        transformer::logits_at(&self.base, tape, positions)
    }

    /// Accumulates gradients into the adapters only; the base receives none.
    pub fn backward(&mut self, tape: &Tape<T>, positions: &[usize], dlogits: &[T]) -> Result<()> {
        if self.state == AdapterState::Merged {
            bail!(State, "adapters are merged; nothing left to train");
        }
        let mut grads: Vec<(Vec<T>, Vec<T>)> =
            self.adapters.iter().map(|a| (vec![T::zero(); a.a.len()], vec![T::zero(); a.b.len()])).collect();
        transformer::backward(&self.base, &self.adapters, self.scale(), tape, positions, dlogits, None, Some(&mut grads))?;
        for (a, (ga, gb)) in self.adapters.iter_mut().zip(&grads) {
            a.a.accumulate_grad(ga);
            a.b.accumulate_grad(gb);
        }
        Ok(())
    }

    /// Folds `scale · B · A` into the base weights. Merging twice is an error.
    pub fn merge(&mut self) -> Result<()> {
        if self.state == AdapterState::Merged {
            bail!(State, "adapters already merged");
        }
        let scale = self.scale();
        for a in &self.adapters {
            let delta = a.delta();
            axpy(scale, &delta, self.base.matrix_mut(a.layer, a.matrix).data_mut());
        }
        self.state = AdapterState::Merged;
        Ok(())
    }

    /// Merged copy of the base, leaving `self` untouched.
    pub fn merged(&self) -> Result<Transformer<T>> {
        let mut m = self.clone();
        m.merge()?;
        Ok(m.base)
    }

    pub fn into_parts(self) -> (Transformer<T>, LoraConfig, Vec<LoraAdapter<T>>) {
        (self.base, self.config, self.adapters)
    }

    pub fn cast<U: Real>(&self) -> LoraModel<U> {
        LoraModel {
            base: self.base.cast(),
            config: self.config.clone(),
            adapters: self
                .adapters
                .iter()
                .map(|a| LoraAdapter { layer: a.layer, matrix: a.matrix, a: a.a.cast(), b: a.b.cast() })
                .collect(),
            state: self.state,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn cfg() -> TransformerConfig {
        TransformerConfig { n_layers: 2, n_heads: 2, d_model: 8, d_ff: 16, vocab_size: 12, max_positions: 16 }
    }

    #[test]
    fn zero_b_is_identity() {
        let base = Transformer::<f32>::new(cfg(), 5).unwrap();
        let lora = attach_lora(base.clone(), LoraConfig { rank: 2, ..Default::default() }, 9).unwrap();
        let toks = [1, 4, 2, 11, 3];
        assert_eq!(base.forward(&toks).unwrap().data(), lora.forward(&toks).unwrap().data());
    }

    #[test]
    fn counts_and_validation() {
        let base = Transformer::<f32>::new(cfg(), 5).unwrap();
        let l = attach_lora(base.clone(), LoraConfig { rank: 2, ..Default::default() }, 1).unwrap();
        // 2 layers × (q, v) × (2·8 + 8·2)
        assert_eq!(l.trainable_count(), 2 * 2 * 32);
        assert!(attach_lora(base.clone(), LoraConfig { rank: 0, ..Default::default() }, 1).is_err());
        assert!(attach_lora(base, LoraConfig { rank: 9, ..Default::default() }, 1).is_err());
    }

    #[test]
    fn double_merge_is_state_error() {
        let base = Transformer::<f32>::new(cfg(), 5).unwrap();
        let mut l = attach_lora(base, LoraConfig { rank: 2, ..Default::default() }, 1).unwrap();
        l.merge().unwrap();
        assert!(matches!(l.merge(), Err(Error::State(_))));
    }
}
