//! Named parameter collections, the unit of synchronization.

use indexmap::IndexMap;

use crate::digest::Fnv1a;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Whether a parameter is synchronized with the server every round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum KnowledgeTag {
    #[default]
    Global,
    Local,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub tag: KnowledgeTag,
}

/// Ordered map from parameter name to tensor. Insertion order is the model's
/// definition order and is stable across runs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: IndexMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(
            name.into(),
            Param {
                value,
                tag: KnowledgeTag::Global,
            },
        );
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::Schema(name.to_string()))
    }

    pub fn tag(&self, name: &str) -> Option<KnowledgeTag> {
        self.params.get(name).map(|p| p.tag)
    }

    pub fn set_tag(&mut self, name: &str, tag: KnowledgeTag) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Schema(name.to_string()))?;
        p.tag = tag;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, p)| (k.as_str(), &mut p.value))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Names and shapes must match `other` exactly, in order.
    pub fn check_schema(&self, other: &ParamSet) -> Result<()> {
        for (a, b) in self.params.iter().zip(other.params.iter()) {
            if a.0 != b.0 || a.1.value.shape() != b.1.value.shape() {
                return Err(Error::Schema(a.0.clone()));
            }
        }
        if self.len() != other.len() {
            let longer = if self.len() > other.len() { self } else { other };
            let name = longer.names().nth(self.len().min(other.len())).unwrap_or_default();
            return Err(Error::Schema(name.to_string()));
        }
        Ok(())
    }

    /// Copies values (not tags) of `names` from `src`.
    pub fn copy_from<'a>(&mut self, src: &ParamSet, names: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for name in names {
            let v = src.tensor(name)?;
            let dst = self
                .get_mut(name)
                .ok_or_else(|| Error::Schema(name.to_string()))?;
            if dst.shape() != v.shape() {
                return Err(Error::Schema(name.to_string()));
            }
            *dst = v.clone();
        }
        Ok(())
    }

    /// FNV-1a over names, shapes and little-endian payloads, in order.
    pub fn digest(&self) -> u64 {
        let mut h = Fnv1a::new();
        for (name, t) in self.iter() {
            h.write(name.as_bytes());
            for &d in t.shape() {
                h.write_u64(d as u64);
            }
            h.write_f64s(t.data());
        }
        h.finish()
    }

    /// Digest of a subset of parameters.
    pub fn digest_of<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> u64 {
        let mut h = Fnv1a::new();
        for name in names {
            if let Some(t) = self.get(name) {
                h.write(name.as_bytes());
                h.write_f64s(t.data());
            }
        }
        h.finish()
    }

    pub fn bitwise_eq(&self, other: &ParamSet) -> bool {
        self.len() == other.len()
            && self
                .params
                .iter()
                .zip(other.params.iter())
                .all(|(a, b)| a.0 == b.0 && a.1.value.bitwise_eq(&b.1.value))
    }

    /// Registers every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, p)| (k.clone(), tape.leaf(p.value.clone(), requires_grad)))
            .collect();
        Bound { vars }
    }
}

/// Parameter names bound to tape variables.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    /// Binds names to variables that already live on a tape, pairwise.
    pub fn from_vars<'a>(names: impl IntoIterator<Item = &'a str>, vars: &[Var]) -> Result<Bound> {
        let names: Vec<&str> = names.into_iter().collect();
        if names.len() != vars.len() {
            return Err(Error::shape("bind_vars", &[names.len()], &[vars.len()]));
        }
        Ok(Bound {
            vars: names.into_iter().map(str::to_string).zip(vars.iter().copied()).collect(),
        })
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Schema(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradients after `tape.backward`, by name. Parameters that did not
    /// influence the loss are absent.
    pub fn grads(&self, tape: &Tape) -> Grads {
        Grads {
            grads: self
                .vars
                .iter()
                .filter_map(|(k, v)| tape.grad(*v).map(|g| (k.clone(), g)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Grads {
    grads: IndexMap<String, Tensor>,
}

impl Grads {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, g: Tensor) {
        self.grads.insert(name.into(), g);
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Fills zero gradients for parameters of `params` that did not receive one.
    pub fn fill_missing(&mut self, params: &ParamSet) {
        for (name, t) in params.iter() {
            if !self.grads.contains_key(name) {
                self.grads.insert(name.to_string(), Tensor::zeros(t.shape()));
            }
        }
    }

    /// Element-wise `self += other`, for accumulating over micro-batches.
    pub fn accumulate(&mut self, other: &Grads) {
        for (name, g) in &other.grads {
            match self.grads.get_mut(name) {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a += b),
                None => {
                    self.grads.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}
