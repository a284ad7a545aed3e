//! SGD with momentum and Adam with decoupled weight decay.

use std::f64::consts::PI;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::nets::params::{Grads, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Decoupled decay, applied as `θ ← θ − lr·wd·θ` after the update.
    pub weight_decay: f64,
    steps: u64,
    state: IndexMap<String, Vec<Vec<f64>>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            weight_decay: 0.0,
            steps: 0,
            state: IndexMap::new(),
        }
    }

    pub fn sgd(lr: f64, momentum: f64) -> Self {
        Self::new(OptimizerKind::Sgd { momentum }, lr)
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::adam(), lr)
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Names of parameters that have optimizer state.
    pub fn state_names(&self) -> impl Iterator<Item = &str> {
        self.state.keys().map(String::as_str)
    }

    /// Updates every parameter of `params`; each must have a gradient.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Grads) -> Result<()> {
        self.step_filtered(params, grads, |_| true)
    }

    /// Updates only the parameters accepted by `select`.
    pub fn step_filtered(
        &mut self,
        params: &mut ParamSet,
        grads: &Grads,
        select: impl Fn(&str) -> bool,
    ) -> Result<()> {
        for name in params.names().filter(|n| select(n)) {
            if grads.get(name).is_none() {
                return Err(Error::MissingGrad(name.to_string()));
            }
        }
        self.steps += 1;
        let t = self.steps as f64;
        let (lr, wd, kind) = (self.lr, self.weight_decay, self.kind);
        for (name, value) in params.iter_mut() {
            if !select(name) {
                continue;
            }
            let g = grads.get(name).expect("checked above").data();
            let theta = value.data_mut();
            if g.len() != theta.len() {
                return Err(Error::shape("optimizer_step", &[theta.len()], &[g.len()]));
            }
            let slots = match kind {
                OptimizerKind::Sgd { .. } => 1,
                OptimizerKind::Adam { .. } => 2,
            };
            let state = self
                .state
                .entry(name.to_string())
                .or_insert_with(|| vec![vec![0.0; theta.len()]; slots]);
            match kind {
                OptimizerKind::Sgd { momentum } => {
                    let buf = &mut state[0];
                    for ((p, &gv), b) in theta.iter_mut().zip(g).zip(buf.iter_mut()) {
                        *b = momentum * *b + gv;
                        *p -= lr * *b;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let bc1 = 1.0 - beta1.powf(t);
                    let bc2 = 1.0 - beta2.powf(t);
                    let (m, v) = state.split_at_mut(1);
                    for (((p, &gv), mv), vv) in
                        theta.iter_mut().zip(g).zip(m[0].iter_mut()).zip(v[0].iter_mut())
                    {
                        *mv = beta1 * *mv + (1.0 - beta1) * gv;
                        *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                        let mhat = *mv / bc1;
                        let vhat = *vv / bc2;
                        *p -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
            if wd != 0.0 {
                for p in theta.iter_mut() {
                    *p -= lr * wd * *p;
                }
            }
        }
        Ok(())
    }
}

/// Half-cosine decay from `base_lr` at step 0 to zero at `total_steps`.
pub fn cosine_lr(base_lr: f64, step: u64, total_steps: u64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::contract(format!(
            "cosine_lr step {step} outside [0, {total_steps}]"
        )));
    }
    Ok(base_lr * 0.5 * (1.0 + (PI * step as f64 / total_steps as f64).cos()))
}

/// [`cosine_lr`] over a fixed number of steps; steps past the end clamp to it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn new(base_lr: f64, total_steps: u64) -> Self {
        CosineSchedule {
            base_lr,
            total_steps: total_steps.max(1),
        }
    }

    pub fn at(&self, step: u64) -> f64 {
        cosine_lr(self.base_lr, step.min(self.total_steps), self.total_steps).expect("step clamped into range")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one(v: f64) -> (ParamSet, Grads) {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::from_vec(vec![v, v]));
        let mut g = Grads::default();
        g.insert("w", Tensor::from_vec(vec![1.0, 1.0]));
        (p, g)
    }

    #[test]
    fn sgd_plain_step() {
        let (mut p, g) = one(1.0);
        Optimizer::sgd(0.1, 0.0).step(&mut p, &g).unwrap();
        assert!((p.get("w").unwrap().data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let (mut p, g) = one(1.0);
        let mut opt = Optimizer::sgd(0.1, 0.9);
        opt.step(&mut p, &g).unwrap();
        opt.step(&mut p, &g).unwrap();
        // 1 - 0.1*1 - 0.1*1.9
        assert!((p.get("w").unwrap().data()[0] - 0.71).abs() < 1e-14);
        assert_eq!(opt.steps(), 2);
    }

    #[test]
    fn adam_first_step_matches_scalar_rollout() {
        let (mut p, g) = one(0.5);
        let (lr, b1, b2, eps) = (0.01, 0.9, 0.999, 1e-8);
        let mut opt = Optimizer::adam(lr);
        opt.step(&mut p, &g).unwrap();
        // scalar rollout
        let m = (1.0 - b1) * 1.0;
        let v = (1.0 - b2) * 1.0;
        let mhat = m / (1.0 - b1);
        let vhat = v / (1.0 - b2);
        let want = 0.5 - lr * mhat / (f64::sqrt(vhat) + eps);
        assert!((p.get("w").unwrap().data()[0] - want).abs() < 1e-15);
        assert!((want - (0.5 - lr / (1.0 + eps))).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_is_bitwise_identity() {
        for kind in [OptimizerKind::Sgd { momentum: 0.9 }, OptimizerKind::adam()] {
            let (mut p, g) = one(0.123456789);
            let before = p.clone();
            let mut opt = Optimizer::new(kind, 0.0).with_weight_decay(0.1);
            opt.step(&mut p, &g).unwrap();
            assert!(p.bitwise_eq(&before));
        }
    }

    #[test]
    fn missing_grad_names_parameter() {
        let (mut p, _) = one(1.0);
        let err = Optimizer::adam(0.1).step(&mut p, &Grads::default()).unwrap_err();
        assert!(matches!(err, Error::MissingGrad(n) if n == "w"));
    }

    #[test]
    fn decoupled_weight_decay() {
        let (mut p, mut g) = one(2.0);
        g.scale(0.0);
        let mut opt = Optimizer::sgd(0.1, 0.0).with_weight_decay(0.5);
        opt.step(&mut p, &g).unwrap();
        assert!((p.get("w").unwrap().data()[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0.03, 0, 100).unwrap(), 0.03);
        assert!(cosine_lr(0.03, 100, 100).unwrap().abs() < 1e-18);
        assert!((cosine_lr(0.03, 50, 100).unwrap() - 0.015).abs() < 1e-15);
        assert!(cosine_lr(0.03, 101, 100).is_err());
        assert!(cosine_lr(0.03, 0, 0).is_err());
    }
}
