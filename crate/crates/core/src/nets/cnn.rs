//! Convolutional encoder and projection head used by the contrastive path.

use super::{init_linear, linear, Bound, ParamSet};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CnnConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig {
            in_channels: 3,
            image_size: 32,
            conv1_channels: 16,
            conv2_channels: 32,
            proj_hidden: 64,
            proj_dim: 32,
        }
    }
}

impl CnnConfig {
    /// Width of the pooled representation.
    pub fn embed_dim(&self) -> usize {
        self.conv2_channels
    }
}

/// Biases drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, so a blank image
/// still maps to a nonzero projection.
fn bias(width: usize, fan_in: usize, rng: &mut Rng) -> Tensor {
    let b = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(&[width], -b, b, rng)
}

/// Two stride-2 3×3 convolutions with ReLU, global average pooling, and an
/// optional 2-layer MLP projection followed by L2 normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CnnEncoder {
    pub cfg: CnnConfig,
}

impl CnnEncoder {
    pub fn new(cfg: CnnConfig) -> Self {
        CnnEncoder { cfg }
    }

    pub fn is_encoder_param(name: &str) -> bool {
        name.starts_with("encoder.")
    }

    /// Encoder (and projection head, if `with_head`) parameters.
    pub fn init(&self, rng: &mut Rng, with_head: bool) -> ParamSet {
        let c = &self.cfg;
        let mut p = ParamSet::new();
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        p.insert(
            "encoder.conv1.weight",
            Tensor::randn(&[c.conv1_channels, c.in_channels, 3, 3], he(c.in_channels * 9), rng),
        );
        p.insert("encoder.conv1.bias", bias(c.conv1_channels, c.in_channels * 9, rng));
        p.insert(
            "encoder.conv2.weight",
            Tensor::randn(&[c.conv2_channels, c.conv1_channels, 3, 3], he(c.conv1_channels * 9), rng),
        );
        p.insert("encoder.conv2.bias", bias(c.conv2_channels, c.conv1_channels * 9, rng));
        if with_head {
            let d = c.embed_dim();
            let std1 = (2.0 / d as f64).sqrt();
            let std2 = (1.0 / c.proj_hidden as f64).sqrt();
            init_linear(&mut p, "head.fc1", d, c.proj_hidden, std1, rng);
            init_linear(&mut p, "head.fc2", c.proj_hidden, c.proj_dim, std2, rng);
            p.insert("head.fc1.bias", bias(c.proj_hidden, d, rng));
            p.insert("head.fc2.bias", bias(c.proj_dim, c.proj_hidden, rng));
        }
        p
    }

    /// Pooled features `(B, embed_dim)` for images `(B, C, H, W)`.
    pub fn features(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.cfg.in_channels {
            return Err(Error::shape("cnn_forward", &s, &[0, self.cfg.in_channels, 0, 0]));
        }
        let h = tape.conv2d(x, p.var("encoder.conv1.weight")?, p.var("encoder.conv1.bias")?, 2, 1)?;
        let h = tape.relu(h);
        let h = tape.conv2d(h, p.var("encoder.conv2.weight")?, p.var("encoder.conv2.bias")?, 2, 1)?;
        let h = tape.relu(h);
        let hs = tape.shape(h).to_vec();
        let flat = tape.reshape(h, &[hs[0], hs[1], hs[2] * hs[3]])?;
        Ok(tape.mean_last(flat))
    }

    /// Unit-norm projected features `(B, proj_dim)`.
    pub fn project(&self, tape: &mut Tape, p: &Bound, features: Var) -> Result<Var> {
        let h = linear(tape, p, "head.fc1", features)?;
        let h = tape.relu(h);
        let z = linear(tape, p, "head.fc2", h)?;
        Ok(tape.l2_normalize(z))
    }

    /// Pooled features, then the projection head when `with_head`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, with_head: bool) -> Result<Var> {
        let f = self.features(tape, p, x)?;
        if with_head {
            self.project(tape, p, f)
        } else {
            Ok(f)
        }
    }
}
