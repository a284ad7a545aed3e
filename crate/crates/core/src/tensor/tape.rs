use super::ops::{self, ConvGeom};
use super::{broadcast_index_map, broadcast_shape, Tensor};
use crate::error::{Error, Result};

/// Denominator floor for `l2_normalize` and `layer_norm`.
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// Differentiable op families, used for fault injection and gradcheck naming.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Scale,
    MatMul,
    Transpose,
    Relu,
    Gelu,
    Softmax,
    LayerNorm,
    SumAll,
    MeanAll,
    SumLast,
    MeanLast,
    Reshape,
    Concat,
    Narrow,
    GatherRows,
    L2Normalize,
    Dot,
    Mse,
    Conv2d,
    CrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 23] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Relu,
        OpKind::Gelu,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::SumAll,
        OpKind::MeanAll,
        OpKind::SumLast,
        OpKind::MeanLast,
        OpKind::Reshape,
        OpKind::Concat,
        OpKind::Narrow,
        OpKind::GatherRows,
        OpKind::L2Normalize,
        OpKind::Dot,
        OpKind::Mse,
        OpKind::Conv2d,
        OpKind::CrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Relu => "relu",
            OpKind::Gelu => "gelu",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::SumAll => "sum",
            OpKind::MeanAll => "mean",
            OpKind::SumLast => "sum_last",
            OpKind::MeanLast => "mean_last",
            OpKind::Reshape => "reshape",
            OpKind::Concat => "concat",
            OpKind::Narrow => "narrow",
            OpKind::GatherRows => "gather_rows",
            OpKind::L2Normalize => "l2_normalize",
            OpKind::Dot => "dot",
            OpKind::Mse => "mse",
            OpKind::Conv2d => "conv2d",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.iter().copied().find(|k| k.name() == name)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm(Var),
    SumAll(Var),
    MeanAll(Var),
    SumLast(Var),
    MeanLast(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { input: Var, axis: usize, start: usize },
    GatherRows { input: Var, rows: Vec<usize> },
    L2Normalize(Var),
    Dot(Var, Var),
    Mse(Var, Var),
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    CrossEntropy { logits: Var, targets: Vec<usize> },
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Relu(..) => OpKind::Relu,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LayerNorm(..) => OpKind::LayerNorm,
            Op::SumAll(..) => OpKind::SumAll,
            Op::MeanAll(..) => OpKind::MeanAll,
            Op::SumLast(..) => OpKind::SumLast,
            Op::MeanLast(..) => OpKind::MeanLast,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Concat { .. } => OpKind::Concat,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::L2Normalize(..) => OpKind::L2Normalize,
            Op::Dot(..) => OpKind::Dot,
            Op::Mse(..) => OpKind::Mse,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        })
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Wengert list of recorded operations.
///
/// Nodes are appended in evaluation order, so inputs always precede outputs
/// and a single reverse sweep visits each node once.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Negates every backward contribution of ops of `kind`. Used to prove the
    /// gradient checker notices a broken rule.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| Tensor {
            shape: node.value.shape().to_vec(),
            data: g.clone(),
        })
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, shape: Vec<usize>, data: Vec<f64>, inputs: &[Var], op: Op) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.push(Tensor { shape, data }, requires_grad, op)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(name, &sa, &sb)?;
        let (da, db) = (self.data(a), self.data(b));
        let data = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_index_map(&sa, &out_shape);
            let mb = broadcast_index_map(&sb, &out_shape);
            ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect()
        };
        Ok(self.record(out_shape, data, &[a, b], op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let data = self.data(a).iter().map(|v| v * s).collect();
        let shape = self.shape(a).to_vec();
        self.record(shape, data, &[a], Op::Scale(a, s))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = ops::matmul(self.data(a), self.data(b), m, k, n);
        Ok(self.record(vec![m, n], data, &[a, b], Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", s, &[2]));
        }
        let (r, c) = (s[0], s[1]);
        let data = ops::transpose(self.data(a), r, c);
        Ok(self.record(vec![c, r], data, &[a], Op::Transpose(a)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        self.record(shape, data, &[a], Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|&v| ops::gelu(v)).collect();
        let shape = self.shape(a).to_vec();
        self.record(shape, data, &[a], Op::Gelu(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let w = *shape.last().unwrap();
        let data = ops::softmax_rows(self.data(a), w);
        self.record(shape, data, &[a], Op::Softmax(a))
    }

    /// Zero-mean, unit-variance normalization over the last axis (no affine).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let w = *shape.last().unwrap();
        let mut data = Vec::with_capacity(self.data(a).len());
        for row in self.data(a).chunks(w) {
            let (mean, inv) = moments(row);
            data.extend(row.iter().map(|v| (v - mean) * inv));
        }
        self.record(shape, data, &[a], Op::LayerNorm(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.record(vec![1], vec![s], &[a], Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.record(vec![1], vec![s], &[a], Op::MeanAll(a))
    }

    fn reduced_shape(shape: &[usize]) -> Vec<usize> {
        if shape.len() <= 1 {
            vec![1]
        } else {
            shape[..shape.len() - 1].to_vec()
        }
    }

    /// Sum over the last axis; the axis is dropped.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let w = *shape.last().unwrap();
        let data = self.data(a).chunks(w).map(|r| r.iter().sum()).collect();
        self.record(Self::reduced_shape(&shape), data, &[a], Op::SumLast(a))
    }

    pub fn mean_last(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let w = *shape.last().unwrap();
        let data = self
            .data(a)
            .chunks(w)
            .map(|r| r.iter().sum::<f64>() / w as f64)
            .collect();
        self.record(Self::reduced_shape(&shape), data, &[a], Op::MeanLast(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.data(a).len() || shape.contains(&0) {
            return Err(Error::shape("reshape", self.shape(a), shape));
        }
        let data = self.data(a).to_vec();
        Ok(self.record(shape.to_vec(), data, &[a], Op::Reshape(a)))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut along = 0;
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(d, (x, y))| d != axis && x != y)
            {
                return Err(Error::shape("concat", &base, s));
            }
            along += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * along * inner);
        for o in 0..outer {
            for v in inputs {
                let chunk = self.shape(*v)[axis] * inner;
                data.extend_from_slice(&self.data(*v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = along;
        Ok(self.record(
            shape,
            data,
            inputs,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape("narrow", &shape, &[axis, start, len]));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(a);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.record(out_shape, data, &[a], Op::Narrow { input: a, axis, start }))
    }

    /// Selects rows of a rank-2 tensor; repeats are allowed.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(a);
        if shape.len() != 2 {
            return Err(Error::shape("gather_rows", shape, &[2]));
        }
        let (r, w) = (shape[0], shape[1]);
        if rows.is_empty() {
            return Err(Error::Index("gather_rows with no rows".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Index(format!("row {bad} out of range for {r} rows")));
        }
        let src = self.data(a);
        let mut data = Vec::with_capacity(rows.len() * w);
        for &i in rows {
            data.extend_from_slice(&src[i * w..(i + 1) * w]);
        }
        Ok(self.record(
            vec![rows.len(), w],
            data,
            &[a],
            Op::GatherRows {
                input: a,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Scales each last-axis row to unit L2 norm. Rows with norm below
    /// [`NORM_EPS`] are divided by `NORM_EPS` instead.
    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let w = *shape.last().unwrap();
        let mut data = Vec::with_capacity(self.data(a).len());
        for row in self.data(a).chunks(w) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
            data.extend(row.iter().map(|v| v / n));
        }
        self.record(shape, data, &[a], Op::L2Normalize(a))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 1 || sa != sb {
            return Err(Error::shape("dot", sa, sb));
        }
        let s = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).sum();
        Ok(self.record(vec![1], vec![s], &[a, b], Op::Dot(a, b)))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape("mse", sa, sb));
        }
        let (da, db) = (self.data(a), self.data(b));
        let s = da.iter().zip(db).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / da.len() as f64;
        Ok(self.record(vec![1], vec![s], &[a, b], Op::Mse(a, b)))
    }

    /// 2-D convolution of `x: (B,C,H,W)` with `w: (F,C,k,k)` and `b: (F)`,
    /// computed by unrolling patches into columns.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 4 || sw.len() != 4 || sw[2] != sw[3] {
            return Err(Error::shape("conv2d", sx, sw));
        }
        if sx[1] != sw[1] {
            return Err(Error::shape("conv2d", sx, sw));
        }
        if sb != [sw[0]] {
            return Err(Error::shape("conv2d", sw, sb));
        }
        if stride == 0 || sx[2] + 2 * pad < sw[2] || sx[3] + 2 * pad < sw[2] {
            return Err(Error::shape("conv2d", sx, sw));
        }
        let geom = ConvGeom {
            batch: sx[0],
            channels: sx[1],
            height: sx[2],
            width: sx[3],
            filters: sw[0],
            kernel: sw[2],
            stride,
            pad,
        };
        let data = ops::conv2d_forward(self.data(x), self.data(w), self.data(b), &geom);
        let shape = vec![geom.batch, geom.filters, geom.out_h(), geom.out_w()];
        Ok(self.record(shape, data, &[x, w, b], Op::Conv2d { x, w, b, geom }))
    }

    /// Mean negative log-softmax of `logits: (B,C)` at `targets`, with
    /// max-subtraction for stability.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::shape("cross_entropy", s, &[targets.len()]));
        }
        let c = s[1];
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index(format!("target {t} out of range for {c} classes")));
        }
        let mut total = 0.0;
        for (row, &t) in self.data(logits).chunks(c).zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[t];
        }
        let loss = total / targets.len() as f64;
        Ok(self.record(
            vec![1],
            vec![loss],
            &[logits],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a single-element `loss`. Populates gradients of every
    /// node that depends on a `requires_grad` leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::contract("backward on an empty tape"));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.input_grads(i, &g);
            self.nodes[i].grad = Some(g);
            let flip = self.fault.is_some() && self.nodes[i].op.kind() == self.fault;
            for (v, mut dg) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                if flip {
                    dg.iter_mut().for_each(|x| *x = -*x);
                }
                match &mut self.nodes[v.0].grad {
                    Some(acc) => acc.iter_mut().zip(&dg).for_each(|(a, d)| *a += d),
                    slot @ None => *slot = Some(dg),
                }
            }
        }
        Ok(())
    }

    fn unbroadcast(&self, g: &[f64], out_shape: &[usize], input: Var, f: impl Fn(usize) -> f64) -> Vec<f64> {
        let in_shape = self.shape(input);
        if in_shape == out_shape {
            return g.iter().enumerate().map(|(i, &gv)| gv * f(i)).collect();
        }
        let map = broadcast_index_map(in_shape, out_shape);
        let mut acc = vec![0.0; self.data(input).len()];
        for (i, (&gv, &j)) in g.iter().zip(&map).enumerate() {
            acc[j] += gv * f(i);
        }
        acc
    }

    fn input_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![
                (*a, self.unbroadcast(g, out_shape, *a, |_| 1.0)),
                (*b, self.unbroadcast(g, out_shape, *b, |_| 1.0)),
            ],
            Op::Sub(a, b) => vec![
                (*a, self.unbroadcast(g, out_shape, *a, |_| 1.0)),
                (*b, self.unbroadcast(g, out_shape, *b, |_| -1.0)),
            ],
            Op::Mul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let ma = broadcast_index_map(sa, out_shape);
                let mb = broadcast_index_map(sb, out_shape);
                let (da, db) = (self.data(*a), self.data(*b));
                vec![
                    (*a, self.unbroadcast(g, out_shape, *a, |k| db[mb[k]])),
                    (*b, self.unbroadcast(g, out_shape, *b, |k| da[ma[k]])),
                ]
            }
            Op::Scale(a, s) => vec![(*a, g.iter().map(|v| v * s).collect())],
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let ga = ops::matmul_a_bt(g, self.data(*b), m, n, k);
                let gb = ops::matmul_at_b(self.data(*a), g, m, k, n);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                vec![(*a, ops::transpose(g, s[1], s[0]))]
            }
            Op::Relu(a) => {
                let x = self.data(*a);
                vec![(*a, g.iter().zip(x).map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 }).collect())]
            }
            Op::Gelu(a) => {
                let x = self.data(*a);
                vec![(*a, g.iter().zip(x).map(|(gv, &xv)| gv * ops::gelu_grad(xv)).collect())]
            }
            Op::Softmax(a) => {
                let w = *out_shape.last().unwrap();
                let mut dx = vec![0.0; g.len()];
                for ((gr, yr), dr) in g.chunks(w).zip(y.chunks(w)).zip(dx.chunks_mut(w)) {
                    let s: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = yv * (gv - s);
                    }
                }
                vec![(*a, dx)]
            }
            Op::LayerNorm(a) => {
                let w = *out_shape.last().unwrap();
                let x = self.data(*a);
                let mut dx = vec![0.0; g.len()];
                for (((xr, yr), gr), dr) in x
                    .chunks(w)
                    .zip(y.chunks(w))
                    .zip(g.chunks(w))
                    .zip(dx.chunks_mut(w))
                {
                    let (_, inv) = moments(xr);
                    let gm = gr.iter().sum::<f64>() / w as f64;
                    let gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / w as f64;
                    for ((d, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = inv * (gv - gm - yv * gy);
                    }
                }
                vec![(*a, dx)]
            }
            Op::SumAll(a) => vec![(*a, vec![g[0]; self.data(*a).len()])],
            Op::MeanAll(a) => {
                let n = self.data(*a).len();
                vec![(*a, vec![g[0] / n as f64; n])]
            }
            Op::SumLast(a) | Op::MeanLast(a) => {
                let w = *self.shape(*a).last().unwrap();
                let f = if matches!(node.op, Op::MeanLast(_)) {
                    1.0 / w as f64
                } else {
                    1.0
                };
                let dx = g.iter().flat_map(|&gv| std::iter::repeat(gv * f).take(w)).collect();
                vec![(*a, dx)]
            }
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Concat { inputs, axis } => {
                let inner: usize = out_shape[axis + 1..].iter().product();
                let outer: usize = out_shape[..*axis].iter().product();
                let mut parts: Vec<Vec<f64>> = inputs
                    .iter()
                    .map(|v| Vec::with_capacity(self.data(*v).len()))
                    .collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (v, part) in inputs.iter().zip(parts.iter_mut()) {
                        let chunk = self.shape(*v)[*axis] * inner;
                        part.extend_from_slice(&g[pos..pos + chunk]);
                        pos += chunk;
                    }
                }
                inputs.iter().copied().zip(parts).collect()
            }
            Op::Narrow { input, axis, start } => {
                let in_shape = self.shape(*input);
                let inner: usize = in_shape[axis + 1..].iter().product();
                let outer: usize = in_shape[..*axis].iter().product();
                let len = out_shape[*axis];
                let mut dx = vec![0.0; self.data(*input).len()];
                for o in 0..outer {
                    let base = (o * in_shape[*axis] + start) * inner;
                    dx[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*input, dx)]
            }
            Op::GatherRows { input, rows } => {
                let w = self.shape(*input)[1];
                let mut dx = vec![0.0; self.data(*input).len()];
                for (k, &r) in rows.iter().enumerate() {
                    for (d, gv) in dx[r * w..(r + 1) * w].iter_mut().zip(&g[k * w..(k + 1) * w]) {
                        *d += gv;
                    }
                }
                vec![(*input, dx)]
            }
            Op::L2Normalize(a) => {
                let w = *out_shape.last().unwrap();
                let x = self.data(*a);
                let mut dx = vec![0.0; g.len()];
                for (((xr, yr), gr), dr) in x
                    .chunks(w)
                    .zip(y.chunks(w))
                    .zip(g.chunks(w))
                    .zip(dx.chunks_mut(w))
                {
                    let n = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if n > NORM_EPS {
                        let gy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((d, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *d = (gv - yv * gy) / n;
                        }
                    } else {
                        for (d, gv) in dr.iter_mut().zip(gr) {
                            *d = gv / NORM_EPS;
                        }
                    }
                }
                vec![(*a, dx)]
            }
            Op::Dot(a, b) => vec![
                (*a, self.data(*b).iter().map(|v| v * g[0]).collect()),
                (*b, self.data(*a).iter().map(|v| v * g[0]).collect()),
            ],
            Op::Mse(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                let f = 2.0 * g[0] / da.len() as f64;
                let ga: Vec<f64> = da.iter().zip(db).map(|(x, y)| f * (x - y)).collect();
                let gb = ga.iter().map(|v| -v).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = ops::conv2d_backward(self.data(*x), self.data(*w), g, geom);
                vec![(*x, dx), (*w, dw), (*b, db)]
            }
            Op::CrossEntropy { logits, targets } => {
                let c = self.shape(*logits)[1];
                let bsz = targets.len() as f64;
                let mut dx = ops::softmax_rows(self.data(*logits), c);
                for (row, &t) in dx.chunks_mut(c).zip(targets) {
                    row[t] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= g[0] / bsz);
                }
                vec![(*logits, dx)]
            }
        }
    }
}

/// Mean and inverse standard deviation of a row.
fn moments(row: &[f64]) -> (f64, f64) {
    let w = row.len() as f64;
    let mean = row.iter().sum::<f64>() / w;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w;
    (mean, 1.0 / (var + NORM_EPS).sqrt())
}
