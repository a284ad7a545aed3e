//! Desk-scale network definitions.
//!
//! Models are stateless descriptions: parameters live in a [`ParamSet`] and a
//! forward pass reads them through a [`Bound`] view on a [`Tape`]. The same
//! forward therefore serves trainable (`requires_grad`) and frozen copies.

pub mod checkpoint;
pub mod cnn;
pub mod params;
pub mod vit;

pub use cnn::{CnnConfig, CnnEncoder};
pub use params::{Bound, Grads, KnowledgeTag, ParamSet};
pub use vit::{MaeModel, VitConfig};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

/// `x @ W + b` with `W` stored as `(in, out)`.
pub(crate) fn linear(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{prefix}.weight"))?;
    let b = p.var(&format!("{prefix}.bias"))?;
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

/// Layer norm with learned scale and offset over the last axis.
pub(crate) fn affine_norm(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let g = p.var(&format!("{prefix}.weight"))?;
    let b = p.var(&format!("{prefix}.bias"))?;
    let n = tape.layer_norm(x);
    let y = tape.mul(n, g)?;
    tape.add(y, b)
}

pub(crate) fn init_linear(params: &mut ParamSet, prefix: &str, fan_in: usize, fan_out: usize, std: f64, rng: &mut Rng) {
    params.insert(format!("{prefix}.weight"), Tensor::trunc_normal(&[fan_in, fan_out], std, rng));
    params.insert(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]));
}

pub(crate) fn init_norm(params: &mut ParamSet, prefix: &str, width: usize) {
    params.insert(format!("{prefix}.weight"), Tensor::full(&[width], 1.0));
    params.insert(format!("{prefix}.bias"), Tensor::zeros(&[width]));
}

/// Single linear layer from features to class logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassifierHead {
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl ClassifierHead {
    pub const PREFIX: &'static str = "classifier";

    pub fn init(&self, params: &mut ParamSet, rng: &mut Rng) {
        init_linear(params, Self::PREFIX, self.feature_dim, self.num_classes, 0.02, rng);
    }

    /// Zero weights and bias: every input maps to identical logits.
    pub fn init_zero(&self, params: &mut ParamSet) {
        params.insert(format!("{}.weight", Self::PREFIX), Tensor::zeros(&[self.feature_dim, self.num_classes]));
        params.insert(format!("{}.bias", Self::PREFIX), Tensor::zeros(&[self.num_classes]));
    }

    /// Parameter-free layer norm, then a linear map. The normalization
    /// removes the common offset of pooled ReLU features, which otherwise
    /// leaves the linear layer badly conditioned.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, features: Var) -> Result<Var> {
        if tape.shape(features).last() != Some(&self.feature_dim) {
            return Err(Error::shape("classifier", tape.shape(features), &[self.feature_dim]));
        }
        let h = tape.layer_norm(features);
        linear(tape, p, Self::PREFIX, h)
    }

    pub fn is_head_param(name: &str) -> bool {
        name.starts_with("classifier.")
    }
}
