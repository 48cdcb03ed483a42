//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Each operation evaluates eagerly when added; `backward` replays the tape
//! in reverse creation order (which is a topological order by construction)
//! and accumulates gradients into every parameter leaf. Reductions accumulate
//! in f64 and every loop has a fixed iteration order, so gradients are
//! bit-identical across runs with identical inputs.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::array::Array;
use crate::numerics::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf { param: Option<String> },
    Add,
    Sub,
    Mul,
    MulScalar(f32),
    ScaleByNode,
    AddRowVec,
    MulRowVec,
    MatMul,
    Transpose,
    Reshape,
    Concat0,
    Slice0 { start: usize },
    Conv1d { stride: usize, padding: usize },
    ConvT1d,
    GroupNorm { groups: usize, eps: f32 },
    LayerNormCols { eps: f32 },
    SoftmaxLastAxis,
    Mish,
    Silu,
    SumSquares,
    CrossEntropyLogits { target: usize },
    Project { keep: Array },
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Array,
    needs_grad: bool,
}

/// Per-parameter gradients keyed by parameter name, in name order.
#[derive(Debug, Default)]
pub struct Gradients {
    map: BTreeMap<String, Array>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Array> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array)> {
        self.map.iter()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Elementwise accumulate `other` into `self` (joint-training use).
    pub fn accumulate(&mut self, other: Gradients) {
        for (name, g) in other.map {
            match self.map.get_mut(&name) {
                None => {
                    self.map.insert(name, g);
                }
                Some(acc) => {
                    let sum: Vec<f32> = acc
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(a, b)| a + b)
                        .collect();
                    *acc = Array::from_vec(acc.shape().to_vec(), sum);
                }
            }
        }
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Array) -> NodeId {
        let needs_grad = match &op {
            Op::Leaf { param } => param.is_some(),
            _ => inputs.iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node {
            op,
            inputs,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input leaf (no gradient flows into it).
    pub fn input(&mut self, value: Array) -> NodeId {
        self.push(Op::Leaf { param: None }, vec![], value)
    }

    /// Parameter leaf; gradients accumulate under `name`. Using the same
    /// parameter twice in one graph sums its gradients.
    pub fn param(&mut self, name: &str, store: &ParamStore) -> NodeId {
        let value = store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .clone();
        self.push(
            Op::Leaf {
                param: Some(name.to_string()),
            },
            vec![],
            value,
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "add: shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let value = Array::from_vec(x.shape().to_vec(), data);
        self.push(Op::Add, vec![a, b], value)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "sub: shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let value = Array::from_vec(x.shape().to_vec(), data);
        self.push(Op::Sub, vec![a, b], value)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul: shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let value = Array::from_vec(x.shape().to_vec(), data);
        self.push(Op::Mul, vec![a, b], value)
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: f32) -> NodeId {
        let x = self.value(a);
        let data = x.data().iter().map(|p| p * s).collect();
        let value = Array::from_vec(x.shape().to_vec(), data);
        self.push(Op::MulScalar(s), vec![a], value)
    }

    /// Multiply every element of `a` by the scalar node `s` (gate weights).
    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> NodeId {
        assert!(self.value(s).is_scalar(), "scale_by: scalar node required");
        let sv = self.value(s).item();
        let x = self.value(a);
        let data = x.data().iter().map(|p| p * sv).collect();
        let value = Array::from_vec(x.shape().to_vec(), data);
        self.push(Op::ScaleByNode, vec![a, s], value)
    }

    /// Broadcast-add a [C] vector to every column of a [C, L] array.
    pub fn add_rowvec(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let value = {
            let x = self.value(a);
            let w = self.value(v);
            let (c, l) = rows_cols(x);
            assert_eq!(w.numel(), c, "add_rowvec: vector length != rows");
            let mut data = x.data().to_vec();
            for r in 0..c {
                let wv = w.data()[r];
                for e in &mut data[r * l..(r + 1) * l] {
                    *e += wv;
                }
            }
            Array::from_vec(x.shape().to_vec(), data)
        };
        self.push(Op::AddRowVec, vec![a, v], value)
    }

    /// Broadcast-multiply each row of a [C, L] array by a [C] vector entry.
    pub fn mul_rowvec(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let value = {
            let x = self.value(a);
            let w = self.value(v);
            let (c, l) = rows_cols(x);
            assert_eq!(w.numel(), c, "mul_rowvec: vector length != rows");
            let mut data = x.data().to_vec();
            for r in 0..c {
                let wv = w.data()[r];
                for e in &mut data[r * l..(r + 1) * l] {
                    *e *= wv;
                }
            }
            Array::from_vec(x.shape().to_vec(), data)
        };
        self.push(Op::MulRowVec, vec![a, v], value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = {
            let x = self.value(a);
            let y = self.value(b);
            assert_eq!(x.shape().len(), 2, "matmul: lhs not 2-D");
            assert_eq!(y.shape().len(), 2, "matmul: rhs not 2-D");
            let (m, k) = (x.shape()[0], x.shape()[1]);
            let (k2, n) = (y.shape()[0], y.shape()[1]);
            assert_eq!(k, k2, "matmul: inner dims differ");
            // i-t-j loop order: contiguous inner traversal of both the
            // output row and the rhs row, with a fixed per-element
            // accumulation order over t.
            let mut out = vec![0.0f32; m * n];
            let (xd, yd) = (x.data(), y.data());
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for t in 0..k {
                    let av = xd[i * k + t];
                    let brow = &yd[t * n..(t + 1) * n];
                    for (ov, bv) in orow.iter_mut().zip(brow) {
                        *ov += av * bv;
                    }
                }
            }
            Array::from_vec(vec![m, n], out)
        };
        self.push(Op::MatMul, vec![a, b], value)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = {
            let x = self.value(a);
            assert_eq!(x.shape().len(), 2, "transpose: not 2-D");
            let (m, n) = (x.shape()[0], x.shape()[1]);
            let mut out = vec![0.0f32; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = x.data()[i * n + j];
                }
            }
            Array::from_vec(vec![n, m], out)
        };
        self.push(Op::Transpose, vec![a], value)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        let value = self.value(a).reshaped(shape);
        self.push(Op::Reshape, vec![a], value)
    }

    /// Concatenate along axis 0; trailing dimensions must match.
    pub fn concat0(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let value = {
            let rest: usize = self.value(parts[0]).shape()[1..].iter().product();
            let mut rows = 0;
            let mut data = Vec::new();
            for &p in parts {
                let v = self.value(p);
                assert_eq!(
                    v.shape()[1..].iter().product::<usize>(),
                    rest,
                    "concat0: trailing dims differ"
                );
                rows += v.shape()[0];
                data.extend_from_slice(v.data());
            }
            let mut shape = self.value(parts[0]).shape().to_vec();
            shape[0] = rows;
            Array::from_vec(shape, data)
        };
        self.push(Op::Concat0, parts.to_vec(), value)
    }

    /// Rows `start..start+len` along axis 0.
    pub fn slice0(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let value = {
            let x = self.value(a);
            let rest: usize = x.shape()[1..].iter().product();
            assert!(start + len <= x.shape()[0], "slice0: out of range");
            let data = x.data()[start * rest..(start + len) * rest].to_vec();
            let mut shape = x.shape().to_vec();
            shape[0] = len;
            Array::from_vec(shape, data)
        };
        self.push(Op::Slice0 { start }, vec![a], value)
    }

    /// Temporal cross-correlation: input [C_in, L], kernel [C_out, C_in, k],
    /// bias [C_out] -> [C_out, L_out] with L_out = (L + 2p - k)/stride + 1.
    /// Accumulation order is fixed: innermost over kernel index, then input
    /// channel.
    pub fn conv1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let value = {
            let xv = self.value(x);
            let wv = self.value(w);
            let bv = self.value(b);
            conv1d_forward(xv, wv, bv, stride, padding)?
        };
        Ok(self.push(Op::Conv1d { stride, padding }, vec![x, w, b], value))
    }

    /// Transposed temporal convolution (stride 1, no padding): input
    /// [C_in, L], kernel [C_in, C_out, k], bias [C_out] -> [C_out, L + k - 1].
    pub fn conv1d_transpose(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let value = {
            let xv = self.value(x);
            let wv = self.value(w);
            let bv = self.value(b);
            convt1d_forward(xv, wv, bv)?
        };
        Ok(self.push(Op::ConvT1d, vec![x, w, b], value))
    }

    /// Group normalization over [C, L]; pure normalization, no affine.
    pub fn group_norm(&mut self, a: NodeId, groups: usize, eps: f32) -> Result<NodeId> {
        let value = {
            let x = self.value(a);
            let (c, _l) = rows_cols(x);
            if groups == 0 || c % groups != 0 {
                return Err(Error::Shape {
                    op: "group_norm",
                    dim: "channels % groups",
                    got: c % groups.max(1),
                    expected: 0,
                });
            }
            group_norm_forward(x, groups, eps)
        };
        Ok(self.push(Op::GroupNorm { groups, eps }, vec![a], value))
    }

    /// Layer normalization of each column of [C, T] (tokens are columns).
    pub fn layer_norm_cols(&mut self, a: NodeId, eps: f32) -> NodeId {
        let value = layer_norm_forward(self.value(a), eps);
        self.push(Op::LayerNormCols { eps }, vec![a], value)
    }

    /// Softmax over the last axis (each row of a 2-D array; a vector as one row).
    pub fn softmax_last(&mut self, a: NodeId) -> NodeId {
        let value = softmax_forward(self.value(a));
        self.push(Op::SoftmaxLastAxis, vec![a], value)
    }

    pub fn mish(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| mish(v)).collect();
        let value = Array::from_vec(x.shape().to_vec(), data);
        self.push(Op::Mish, vec![a], value)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| v * sigmoid(v)).collect();
        let value = Array::from_vec(x.shape().to_vec(), data);
        self.push(Op::Silu, vec![a], value)
    }

    /// Scalar sum of squares, accumulated in f64.
    pub fn sum_squares(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut acc = 0.0f64;
        for &v in x.data() {
            acc += (v as f64) * (v as f64);
        }
        let value = Array::scalar(acc as f32);
        self.push(Op::SumSquares, vec![a], value)
    }

    /// Mean of squared entries (sum of squares scaled by 1/numel).
    pub fn mean_squares(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).numel();
        let ss = self.sum_squares(a);
        self.mul_scalar(ss, 1.0 / n as f32)
    }

    /// Cross-entropy of a logits vector against a class index, stable form.
    pub fn cross_entropy_logits(&mut self, a: NodeId, target: usize) -> NodeId {
        let value = {
            let x = self.value(a);
            let k = x.numel();
            assert!(target < k, "cross_entropy: target out of range");
            let lse = log_sum_exp(x.data());
            Array::scalar((lse - x.data()[target] as f64) as f32)
        };
        self.push(Op::CrossEntropyLogits { target }, vec![a], value)
    }

    /// Condition projection as a differentiable op: `x * keep + add` with
    /// constant masks. Gradient passes only through kept entries.
    pub fn project(&mut self, a: NodeId, keep: &Array, add: &Array) -> NodeId {
        let value = {
            let x = self.value(a);
            assert_eq!(x.shape(), keep.shape(), "project: keep shape");
            assert_eq!(x.shape(), add.shape(), "project: add shape");
            let data = x
                .data()
                .iter()
                .zip(keep.data())
                .zip(add.data())
                .map(|((xv, kv), av)| xv * kv + av)
                .collect();
            Array::from_vec(x.shape().to_vec(), data)
        };
        self.push(Op::Project { keep: keep.clone() }, vec![a], value)
    }

    /// Reverse pass from a scalar loss. Returns gradients for every parameter
    /// leaf present in the graph; parameters whose subgraph does not reach the
    /// loss get zero gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f32>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..n).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let gout = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_one(idx, &self.nodes[idx].op, &self.nodes[idx].inputs, &gout, &mut grads);
            grads[idx] = Some(gout);
        }

        let mut out = Gradients::default();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(name) } = &node.op {
                let g = grads[idx]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                let arr = Array::from_vec(node.value.shape().to_vec(), g);
                match out.map.get_mut(name) {
                    None => {
                        out.map.insert(name.clone(), arr);
                    }
                    Some(acc) => {
                        let sum: Vec<f32> = acc
                            .data()
                            .iter()
                            .zip(arr.data())
                            .map(|(a, b)| a + b)
                            .collect();
                        *acc = Array::from_vec(acc.shape().to_vec(), sum);
                    }
                }
            }
        }
        Ok(out)
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Vec<f32>>],
        target: NodeId,
        contribution: impl FnOnce(&mut [f32]),
    ) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        let slot = &mut grads[target.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.nodes[target.0].value.numel()]);
        }
        contribution(slot.as_mut().unwrap());
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_one(
        &self,
        idx: usize,
        op: &Op,
        inputs: &[NodeId],
        gout: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) {
        let val = |id: NodeId| self.nodes[id.0].value.data();
        let out_val = self.nodes[idx].value.data();
        match op {
            Op::Leaf { .. } => {}
            Op::Add => {
                self.accumulate(grads, inputs[0], |g| {
                    for (gi, go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                });
                self.accumulate(grads, inputs[1], |g| {
                    for (gi, go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                });
            }
            Op::Sub => {
                self.accumulate(grads, inputs[0], |g| {
                    for (gi, go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                });
                self.accumulate(grads, inputs[1], |g| {
                    for (gi, go) in g.iter_mut().zip(gout) {
                        *gi -= go;
                    }
                });
            }
            Op::Mul => {
                let (a, b) = (val(inputs[0]), val(inputs[1]));
                self.accumulate(grads, inputs[0], |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * b[i];
                    }
                });
                self.accumulate(grads, inputs[1], |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * a[i];
                    }
                });
            }
            Op::MulScalar(s) => {
                self.accumulate(grads, inputs[0], |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * s;
                    }
                });
            }
            Op::ScaleByNode => {
                let a = val(inputs[0]);
                let s = val(inputs[1])[0];
                self.accumulate(grads, inputs[0], |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * s;
                    }
                });
                let mut ds = 0.0f64;
                for i in 0..a.len() {
                    ds += (gout[i] as f64) * (a[i] as f64);
                }
                self.accumulate(grads, inputs[1], |g| {
                    g[0] += ds as f32;
                });
            }
            Op::AddRowVec => {
                let x = &self.nodes[inputs[0].0].value;
                let (c, l) = rows_cols(x);
                self.accumulate(grads, inputs[0], |g| {
                    for (gi, go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                });
                self.accumulate(grads, inputs[1], |g| {
                    for r in 0..c {
                        let mut acc = 0.0f64;
                        for j in 0..l {
                            acc += gout[r * l + j] as f64;
                        }
                        g[r] += acc as f32;
                    }
                });
            }
            Op::MulRowVec => {
                let x = &self.nodes[inputs[0].0].value;
                let (c, l) = rows_cols(x);
                let xd = x.data();
                let w = val(inputs[1]);
                self.accumulate(grads, inputs[0], |g| {
                    for r in 0..c {
                        for j in 0..l {
                            g[r * l + j] += gout[r * l + j] * w[r];
                        }
                    }
                });
                self.accumulate(grads, inputs[1], |g| {
                    for r in 0..c {
                        let mut acc = 0.0f64;
                        for j in 0..l {
                            acc += (gout[r * l + j] as f64) * (xd[r * l + j] as f64);
                        }
                        g[r] += acc as f32;
                    }
                });
            }
            Op::MatMul => {
                let a = &self.nodes[inputs[0].0].value;
                let b = &self.nodes[inputs[1].0].value;
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                let (ad, bd) = (a.data(), b.data());
                // dA = dC . B^T
                self.accumulate(grads, inputs[0], |g| {
                    for i in 0..m {
                        let grow = &gout[i * n..(i + 1) * n];
                        for t in 0..k {
                            let brow = &bd[t * n..(t + 1) * n];
                            let mut acc = 0.0f32;
                            for (gv, bv) in grow.iter().zip(brow) {
                                acc += gv * bv;
                            }
                            g[i * k + t] += acc;
                        }
                    }
                });
                // dB = A^T . dC
                self.accumulate(grads, inputs[1], |g| {
                    for i in 0..m {
                        let grow = &gout[i * n..(i + 1) * n];
                        let arow = &ad[i * k..(i + 1) * k];
                        for (t, av) in arow.iter().enumerate() {
                            let dbrow = &mut g[t * n..(t + 1) * n];
                            for (dv, gv) in dbrow.iter_mut().zip(grow) {
                                *dv += av * gv;
                            }
                        }
                    }
                });
            }
            Op::Transpose => {
                let x = &self.nodes[inputs[0].0].value;
                let (m, n) = (x.shape()[0], x.shape()[1]);
                self.accumulate(grads, inputs[0], |g| {
                    for i in 0..m {
                        for j in 0..n {
                            g[i * n + j] += gout[j * m + i];
                        }
                    }
                });
            }
            Op::Reshape => {
                self.accumulate(grads, inputs[0], |g| {
                    for (gi, go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                });
            }
            Op::Concat0 => {
                let mut offset = 0usize;
                for &inp in inputs {
                    let n = self.nodes[inp.0].value.numel();
                    let part = &gout[offset..offset + n];
                    self.accumulate(grads, inp, |g| {
                        for (gi, go) in g.iter_mut().zip(part) {
                            *gi += go;
                        }
                    });
                    offset += n;
                }
            }
            Op::Slice0 { start } => {
                let x = &self.nodes[inputs[0].0].value;
                let rest: usize = x.shape()[1..].iter().product();
                let begin = start * rest;
                self.accumulate(grads, inputs[0], |g| {
                    for (i, go) in gout.iter().enumerate() {
                        g[begin + i] += go;
                    }
                });
            }
            Op::Conv1d { stride, padding } => {
                let x = &self.nodes[inputs[0].0].value;
                let w = &self.nodes[inputs[1].0].value;
                let (c_in, l) = (x.shape()[0], x.shape()[1]);
                let (c_out, k) = (w.shape()[0], w.shape()[2]);
                let l_out = (l + 2 * padding - k) / stride + 1;
                let (xd, wd) = (x.data(), w.data());
                let (stride, padding) = (*stride, *padding);
                self.accumulate(grads, inputs[0], |g| {
                    for o in 0..c_out {
                        let grow = &gout[o * l_out..(o + 1) * l_out];
                        for c in 0..c_in {
                            let dx = &mut g[c * l..(c + 1) * l];
                            for i in 0..k {
                                let wv = wd[(o * c_in + c) * k + i];
                                let Some((lo, hi)) = conv_j_range(l, l_out, stride, padding, i)
                                else {
                                    continue;
                                };
                                if stride == 1 {
                                    let xoff = lo + i - padding;
                                    for (dv, gv) in
                                        dx[xoff..].iter_mut().zip(&grow[lo..=hi])
                                    {
                                        *dv += gv * wv;
                                    }
                                } else {
                                    for j in lo..=hi {
                                        dx[j * stride + i - padding] += grow[j] * wv;
                                    }
                                }
                            }
                        }
                    }
                });
                self.accumulate(grads, inputs[1], |g| {
                    for o in 0..c_out {
                        let grow = &gout[o * l_out..(o + 1) * l_out];
                        for c in 0..c_in {
                            let xrow = &xd[c * l..(c + 1) * l];
                            for i in 0..k {
                                let Some((lo, hi)) = conv_j_range(l, l_out, stride, padding, i)
                                else {
                                    continue;
                                };
                                let mut acc = 0.0f32;
                                if stride == 1 {
                                    let xoff = lo + i - padding;
                                    for (gv, xv) in grow[lo..=hi].iter().zip(&xrow[xoff..]) {
                                        acc += gv * xv;
                                    }
                                } else {
                                    for j in lo..=hi {
                                        acc += grow[j] * xrow[j * stride + i - padding];
                                    }
                                }
                                g[(o * c_in + c) * k + i] += acc;
                            }
                        }
                    }
                });
                self.accumulate(grads, inputs[2], |g| {
                    for o in 0..c_out {
                        let mut acc = 0.0f32;
                        for j in 0..l_out {
                            acc += gout[o * l_out + j];
                        }
                        g[o] += acc;
                    }
                });
            }
            Op::ConvT1d => {
                let x = &self.nodes[inputs[0].0].value;
                let w = &self.nodes[inputs[1].0].value;
                let (c_in, l) = (x.shape()[0], x.shape()[1]);
                let (c_out, k) = (w.shape()[1], w.shape()[2]);
                let l_out = l + k - 1;
                let (xd, wd) = (x.data(), w.data());
                self.accumulate(grads, inputs[0], |g| {
                    for c in 0..c_in {
                        for t in 0..l {
                            let mut acc = 0.0f32;
                            for o in 0..c_out {
                                for i in 0..k {
                                    acc += gout[o * l_out + t + i] * wd[c * c_out * k + o * k + i];
                                }
                            }
                            g[c * l + t] += acc;
                        }
                    }
                });
                self.accumulate(grads, inputs[1], |g| {
                    for c in 0..c_in {
                        for o in 0..c_out {
                            for i in 0..k {
                                let mut acc = 0.0f32;
                                for t in 0..l {
                                    acc += xd[c * l + t] * gout[o * l_out + t + i];
                                }
                                g[c * c_out * k + o * k + i] += acc;
                            }
                        }
                    }
                });
                self.accumulate(grads, inputs[2], |g| {
                    for o in 0..c_out {
                        let mut acc = 0.0f32;
                        for j in 0..l_out {
                            acc += gout[o * l_out + j];
                        }
                        g[o] += acc;
                    }
                });
            }
            Op::GroupNorm { groups, eps } => {
                let x = &self.nodes[inputs[0].0].value;
                let (c, l) = rows_cols(x);
                let gs = c / groups;
                let m = gs * l;
                let xd = x.data();
                self.accumulate(grads, inputs[0], |g| {
                    for grp in 0..*groups {
                        let base = grp * gs * l;
                        let (mean, var) = mean_var(&xd[base..base + m]);
                        let r = 1.0 / (var + *eps as f64).sqrt();
                        let mut sum_dy = 0.0f64;
                        let mut sum_dy_y = 0.0f64;
                        for i in 0..m {
                            let y = (xd[base + i] as f64 - mean) * r;
                            sum_dy += gout[base + i] as f64;
                            sum_dy_y += gout[base + i] as f64 * y;
                        }
                        let mean_dy = sum_dy / m as f64;
                        let mean_dy_y = sum_dy_y / m as f64;
                        for i in 0..m {
                            let y = (xd[base + i] as f64 - mean) * r;
                            g[base + i] +=
                                (r * (gout[base + i] as f64 - mean_dy - y * mean_dy_y)) as f32;
                        }
                    }
                });
            }
            Op::LayerNormCols { eps } => {
                let x = &self.nodes[inputs[0].0].value;
                let (c, t) = rows_cols(x);
                let xd = x.data();
                self.accumulate(grads, inputs[0], |g| {
                    for j in 0..t {
                        let mut sum = 0.0f64;
                        for r in 0..c {
                            sum += xd[r * t + j] as f64;
                        }
                        let mean = sum / c as f64;
                        let mut var = 0.0f64;
                        for r in 0..c {
                            let d = xd[r * t + j] as f64 - mean;
                            var += d * d;
                        }
                        var /= c as f64;
                        let r_std = 1.0 / (var + *eps as f64).sqrt();
                        let mut sum_dy = 0.0f64;
                        let mut sum_dy_y = 0.0f64;
                        for r in 0..c {
                            let y = (xd[r * t + j] as f64 - mean) * r_std;
                            sum_dy += gout[r * t + j] as f64;
                            sum_dy_y += gout[r * t + j] as f64 * y;
                        }
                        let mean_dy = sum_dy / c as f64;
                        let mean_dy_y = sum_dy_y / c as f64;
                        for r in 0..c {
                            let y = (xd[r * t + j] as f64 - mean) * r_std;
                            g[r * t + j] +=
                                (r_std * (gout[r * t + j] as f64 - mean_dy - y * mean_dy_y)) as f32;
                        }
                    }
                });
            }
            Op::SoftmaxLastAxis => {
                let shape = self.nodes[idx].value.shape();
                let n = *shape.last().unwrap();
                let rows = out_val.len() / n;
                self.accumulate(grads, inputs[0], |g| {
                    for r in 0..rows {
                        let y = &out_val[r * n..(r + 1) * n];
                        let dy = &gout[r * n..(r + 1) * n];
                        let mut dot = 0.0f64;
                        for i in 0..n {
                            dot += dy[i] as f64 * y[i] as f64;
                        }
                        for i in 0..n {
                            g[r * n + i] += (y[i] as f64 * (dy[i] as f64 - dot)) as f32;
                        }
                    }
                });
            }
            Op::Mish => {
                let x = val(inputs[0]);
                self.accumulate(grads, inputs[0], |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * mish_grad(x[i]);
                    }
                });
            }
            Op::Silu => {
                let x = val(inputs[0]);
                self.accumulate(grads, inputs[0], |g| {
                    for i in 0..g.len() {
                        let s = sigmoid(x[i]);
                        g[i] += gout[i] * s * (1.0 + x[i] * (1.0 - s));
                    }
                });
            }
            Op::SumSquares => {
                let x = val(inputs[0]);
                let go = gout[0];
                self.accumulate(grads, inputs[0], |g| {
                    for i in 0..g.len() {
                        g[i] += go * 2.0 * x[i];
                    }
                });
            }
            Op::CrossEntropyLogits { target } => {
                let x = val(inputs[0]);
                let lse = log_sum_exp(x);
                let go = gout[0];
                self.accumulate(grads, inputs[0], |g| {
                    for i in 0..g.len() {
                        let p = ((x[i] as f64) - lse).exp() as f32;
                        let delta = if i == *target { 1.0 } else { 0.0 };
                        g[i] += go * (p - delta);
                    }
                });
            }
            Op::Project { keep } => {
                let kd = keep.data();
                self.accumulate(grads, inputs[0], |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * kd[i];
                    }
                });
            }
        }
    }
}

fn rows_cols(x: &Array) -> (usize, usize) {
    match x.shape().len() {
        1 => (x.shape()[0], 1),
        2 => (x.shape()[0], x.shape()[1]),
        _ => panic!("expected 1-D or 2-D array, got {:?}", x.shape()),
    }
}

pub(crate) fn conv1d_forward(
    x: &Array,
    w: &Array,
    b: &Array,
    stride: usize,
    padding: usize,
) -> Result<Array> {
    if x.shape().len() != 2 {
        return Err(Error::invalid("conv1d", "input must be [C_in, L]"));
    }
    if w.shape().len() != 3 {
        return Err(Error::invalid("conv1d", "kernel must be [C_out, C_in, k]"));
    }
    let (c_in, l) = (x.shape()[0], x.shape()[1]);
    let (c_out, wc_in, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    if wc_in != c_in {
        return Err(Error::Shape {
            op: "conv1d",
            dim: "kernel C_in",
            got: wc_in,
            expected: c_in,
        });
    }
    if b.numel() != c_out {
        return Err(Error::Shape {
            op: "conv1d",
            dim: "bias length",
            got: b.numel(),
            expected: c_out,
        });
    }
    if stride < 1 {
        return Err(Error::invalid("conv1d", "stride must be >= 1"));
    }
    if l + 2 * padding < k {
        return Err(Error::Shape {
            op: "conv1d",
            dim: "padded length",
            got: l + 2 * padding,
            expected: k,
        });
    }
    let l_out = (l + 2 * padding - k) / stride + 1;
    let mut out = vec![0.0f32; c_out * l_out];
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    // Each output element accumulates in the fixed order: bias, then input
    // channel outer, kernel index inner. The j loop is innermost so the
    // compiler can vectorize it; per-element addition order is unchanged.
    for o in 0..c_out {
        let orow = &mut out[o * l_out..(o + 1) * l_out];
        orow.fill(bd[o]);
        for c in 0..c_in {
            let xrow = &xd[c * l..(c + 1) * l];
            for i in 0..k {
                let wv = wd[(o * c_in + c) * k + i];
                let Some((lo, hi)) = conv_j_range(l, l_out, stride, padding, i) else {
                    continue;
                };
                if stride == 1 {
                    let xoff = lo + i - padding;
                    for (ov, xv) in orow[lo..=hi].iter_mut().zip(&xrow[xoff..]) {
                        *ov += xv * wv;
                    }
                } else {
                    for j in lo..=hi {
                        orow[j] += xrow[j * stride + i - padding] * wv;
                    }
                }
            }
        }
    }
    Ok(Array::from_vec(vec![c_out, l_out], out))
}

/// Valid output index range [lo, hi] for kernel offset `i`:
/// 0 <= j*stride + i - padding <= l-1 and j < l_out. None when empty.
#[inline]
fn conv_j_range(
    l: usize,
    l_out: usize,
    stride: usize,
    padding: usize,
    i: usize,
) -> Option<(usize, usize)> {
    let lo = padding.saturating_sub(i).div_ceil(stride);
    let max_pos = l - 1 + padding;
    if i > max_pos {
        return None;
    }
    let hi = ((max_pos - i) / stride).min(l_out - 1);
    if lo > hi {
        return None;
    }
    Some((lo, hi))
}

fn convt1d_forward(x: &Array, w: &Array, b: &Array) -> Result<Array> {
    if x.shape().len() != 2 || w.shape().len() != 3 {
        return Err(Error::invalid(
            "conv1d_transpose",
            "expected input [C_in, L], kernel [C_in, C_out, k]",
        ));
    }
    let (c_in, l) = (x.shape()[0], x.shape()[1]);
    let (wc_in, c_out, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    if wc_in != c_in {
        return Err(Error::Shape {
            op: "conv1d_transpose",
            dim: "kernel C_in",
            got: wc_in,
            expected: c_in,
        });
    }
    if b.numel() != c_out {
        return Err(Error::Shape {
            op: "conv1d_transpose",
            dim: "bias length",
            got: b.numel(),
            expected: c_out,
        });
    }
    let l_out = l + k - 1;
    let mut out = vec![0.0f32; c_out * l_out];
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    for o in 0..c_out {
        for j in 0..l_out {
            let mut acc = bd[o];
            for c in 0..c_in {
                for i in 0..k {
                    if j >= i && j - i < l {
                        acc += xd[c * l + (j - i)] * wd[c * c_out * k + o * k + i];
                    }
                }
            }
            out[o * l_out + j] = acc;
        }
    }
    Ok(Array::from_vec(vec![c_out, l_out], out))
}

fn group_norm_forward(x: &Array, groups: usize, eps: f32) -> Array {
    let (c, l) = rows_cols(x);
    let gs = c / groups;
    let m = gs * l;
    let xd = x.data();
    let mut out = vec![0.0f32; xd.len()];
    for grp in 0..groups {
        let base = grp * gs * l;
        let (mean, var) = mean_var(&xd[base..base + m]);
        let r = 1.0 / (var + eps as f64).sqrt();
        for i in 0..m {
            out[base + i] = ((xd[base + i] as f64 - mean) * r) as f32;
        }
    }
    Array::from_vec(x.shape().to_vec(), out)
}

fn layer_norm_forward(x: &Array, eps: f32) -> Array {
    let (c, t) = rows_cols(x);
    let xd = x.data();
    let mut out = vec![0.0f32; xd.len()];
    for j in 0..t {
        let mut sum = 0.0f64;
        for r in 0..c {
            sum += xd[r * t + j] as f64;
        }
        let mean = sum / c as f64;
        let mut var = 0.0f64;
        for r in 0..c {
            let d = xd[r * t + j] as f64 - mean;
            var += d * d;
        }
        var /= c as f64;
        let r_std = 1.0 / (var + eps as f64).sqrt();
        for r in 0..c {
            out[r * t + j] = ((xd[r * t + j] as f64 - mean) * r_std) as f32;
        }
    }
    Array::from_vec(x.shape().to_vec(), out)
}

fn softmax_forward(x: &Array) -> Array {
    let n = *x.shape().last().unwrap();
    let rows = x.numel() / n;
    let xd = x.data();
    let mut out = vec![0.0f32; xd.len()];
    for r in 0..rows {
        let row = &xd[r * n..(r + 1) * n];
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0f64;
        for i in 0..n {
            sum += ((row[i] - m) as f64).exp();
        }
        for i in 0..n {
            out[r * n + i] = (((row[i] - m) as f64).exp() / sum) as f32;
        }
    }
    Array::from_vec(x.shape().to_vec(), out)
}

fn mean_var(xs: &[f32]) -> (f64, f64) {
    let mut sum = 0.0f64;
    for &v in xs {
        sum += v as f64;
    }
    let mean = sum / xs.len() as f64;
    let mut var = 0.0f64;
    for &v in xs {
        let d = v as f64 - mean;
        var += d * d;
    }
    (mean, var / xs.len() as f64)
}

fn log_sum_exp(xs: &[f32]) -> f64 {
    let m = xs.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let mut sum = 0.0f64;
    for &v in xs {
        sum += ((v as f64) - m).exp();
    }
    m + sum.ln()
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else if x < -20.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn mish(x: f32) -> f32 {
    x * softplus(x).tanh()
}

fn mish_grad(x: f32) -> f32 {
    let t = softplus(x).tanh();
    t + x * (1.0 - t * t) * sigmoid(x)
}
