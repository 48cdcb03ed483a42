//! Layer plans: named parameter groups plus how to apply them to graph nodes.
//! A plan is rebuilt deterministically from the model configuration, so the
//! same code path serves parameter creation and the forward pass.

use rand_chacha::ChaCha12Rng;

use crate::error::Result;
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::params::ParamStore;

pub const NORM_EPS: f32 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Act {
    Mish,
    Silu,
}

impl Act {
    pub fn apply(&self, g: &mut Graph, x: NodeId) -> NodeId {
        match self {
            Act::Mish => g.mish(x),
            Act::Silu => g.silu(x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv1d {
    w: String,
    b: String,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Conv1d {
        store.insert_weight(format!("{name}.w"), &[c_out, c_in, k], c_in * k, rng);
        store.insert_zeros(format!("{name}.b"), &[c_out]);
        Conv1d {
            w: format!("{name}.w"),
            b: format!("{name}.b"),
            stride,
            padding,
        }
    }

    /// Zero-initialized variant for output projections.
    pub fn new_zeroed(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Conv1d {
        store.insert_zeros(format!("{name}.w"), &[c_out, c_in, k]);
        store.insert_zeros(format!("{name}.b"), &[c_out]);
        Conv1d {
            w: format!("{name}.w"),
            b: format!("{name}.b"),
            stride,
            padding,
        }
    }

    pub fn apply(&self, g: &mut Graph, p: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(&self.w, p);
        let b = g.param(&self.b, p);
        g.conv1d(x, w, b, self.stride, self.padding)
    }
}

/// Transposed temporal convolution used as the upsample (k=2: length +1).
#[derive(Clone, Debug)]
pub struct ConvT1d {
    w: String,
    b: String,
}

impl ConvT1d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
    ) -> ConvT1d {
        store.insert_weight(format!("{name}.w"), &[c_in, c_out, k], c_in * k, rng);
        store.insert_zeros(format!("{name}.b"), &[c_out]);
        ConvT1d {
            w: format!("{name}.w"),
            b: format!("{name}.b"),
        }
    }

    pub fn apply(&self, g: &mut Graph, p: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(&self.w, p);
        let b = g.param(&self.b, p);
        g.conv1d_transpose(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    w: String,
    b: String,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Linear {
        store.insert_weight(format!("{name}.w"), &[out_dim, in_dim], in_dim, rng);
        store.insert_zeros(format!("{name}.b"), &[out_dim]);
        Linear {
            w: format!("{name}.w"),
            b: format!("{name}.b"),
            out_dim,
        }
    }

    pub fn new_zeroed(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Linear {
        store.insert_zeros(format!("{name}.w"), &[out_dim, in_dim]);
        store.insert_zeros(format!("{name}.b"), &[out_dim]);
        Linear {
            w: format!("{name}.w"),
            b: format!("{name}.b"),
            out_dim,
        }
    }

    /// Apply to a [in, cols] node -> [out, cols]; bias broadcast per column.
    pub fn apply(&self, g: &mut Graph, p: &ParamStore, x: NodeId) -> NodeId {
        let w = g.param(&self.w, p);
        let b = g.param(&self.b, p);
        let y = g.matmul(w, x);
        g.add_rowvec(y, b)
    }
}

/// Residual block: two length-preserving convolutions, each followed by group
/// norm and the activation; the time embedding is projected and added after
/// the first conv block; a 1x1 convolution matches channels on the skip path.
#[derive(Clone, Debug)]
pub struct ResBlock {
    conv1: Conv1d,
    conv2: Conv1d,
    time_proj: Linear,
    skip: Option<Conv1d>,
    groups: usize,
    act: Act,
}

impl ResBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        time_dim: usize,
        groups: usize,
        act: Act,
    ) -> ResBlock {
        let conv1 = Conv1d::new(store, rng, &format!("{name}.conv1"), c_in, c_out, 3, 1, 1);
        let conv2 = Conv1d::new(store, rng, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1);
        let time_proj = Linear::new(store, rng, &format!("{name}.time"), time_dim, c_out);
        let skip = if c_in != c_out {
            Some(Conv1d::new(store, rng, &format!("{name}.skip"), c_in, c_out, 1, 1, 0))
        } else {
            None
        };
        ResBlock {
            conv1,
            conv2,
            time_proj,
            skip,
            groups,
            act,
        }
    }

    pub fn apply(
        &self,
        g: &mut Graph,
        p: &ParamStore,
        x: NodeId,
        t_emb: NodeId,
    ) -> Result<NodeId> {
        let mut h = self.conv1.apply(g, p, x)?;
        h = g.group_norm(h, self.groups, NORM_EPS)?;
        h = self.act.apply(g, h);
        let tv = self.time_proj.apply(g, p, t_emb);
        let tv = g.reshape(tv, vec![self.time_proj.out_dim]);
        h = g.add_rowvec(h, tv);
        h = self.conv2.apply(g, p, h)?;
        h = g.group_norm(h, self.groups, NORM_EPS)?;
        h = self.act.apply(g, h);
        let res = match &self.skip {
            Some(conv) => conv.apply(g, p, x)?,
            None => x,
        };
        Ok(g.add(h, res))
    }
}

/// Multi-head self-attention over the temporal axis of a [C, L] node, with a
/// group-norm in front and a residual connection around the whole block.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    qkv: Conv1d,
    proj: Conv1d,
    pub heads: usize,
    channels: usize,
    groups: usize,
}

impl AttentionBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        channels: usize,
        heads: usize,
        groups: usize,
    ) -> AttentionBlock {
        assert_eq!(channels % heads, 0, "heads must divide channels");
        let qkv = Conv1d::new(store, rng, &format!("{name}.qkv"), channels, 3 * channels, 1, 1, 0);
        let proj = Conv1d::new(store, rng, &format!("{name}.proj"), channels, channels, 1, 1, 0);
        AttentionBlock {
            qkv,
            proj,
            heads,
            channels,
            groups,
        }
    }

    pub fn apply(&self, g: &mut Graph, p: &ParamStore, x: NodeId) -> Result<NodeId> {
        let c = self.channels;
        let d = c / self.heads;
        let y = g.group_norm(x, self.groups, NORM_EPS)?;
        let qkv = self.qkv.apply(g, p, y)?;
        let q = g.slice0(qkv, 0, c);
        let k = g.slice0(qkv, c, c);
        let v = g.slice0(qkv, 2 * c, c);
        let scale = 1.0 / (d as f32).sqrt();
        let mut heads_out = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice0(q, h * d, d);
            let kh = g.slice0(k, h * d, d);
            let vh = g.slice0(v, h * d, d);
            let qt = g.transpose(qh);
            let scores = g.matmul(qt, kh);
            let scores = g.mul_scalar(scores, scale);
            let att = g.softmax_last(scores);
            let att_t = g.transpose(att);
            heads_out.push(g.matmul(vh, att_t));
        }
        let merged = g.concat0(&heads_out);
        let out = self.proj.apply(g, p, merged)?;
        Ok(g.add(out, x))
    }
}

/// Attention without the norm/residual wrapper, for transformer layers that
/// handle those themselves.
pub fn raw_attention(
    g: &mut Graph,
    p: &ParamStore,
    qkv_proj: &Linear,
    out_proj: &Linear,
    x: NodeId,
    channels: usize,
    heads: usize,
) -> NodeId {
    let d = channels / heads;
    let qkv = qkv_proj.apply(g, p, x);
    let q = g.slice0(qkv, 0, channels);
    let k = g.slice0(qkv, channels, channels);
    let v = g.slice0(qkv, 2 * channels, channels);
    let scale = 1.0 / (d as f32).sqrt();
    let mut heads_out = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice0(q, h * d, d);
        let kh = g.slice0(k, h * d, d);
        let vh = g.slice0(v, h * d, d);
        let qt = g.transpose(qh);
        let scores = g.matmul(qt, kh);
        let scores = g.mul_scalar(scores, scale);
        let att = g.softmax_last(scores);
        let att_t = g.transpose(att);
        heads_out.push(g.matmul(vh, att_t));
    }
    let merged = g.concat0(&heads_out);
    out_proj.apply(g, p, merged)
}
