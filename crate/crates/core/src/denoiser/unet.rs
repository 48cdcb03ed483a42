//! Temporal UNet backbones.
//!
//! The down path shrinks the horizon axis by exactly 1 per level (conv k=2,
//! s=1, p=0); the up path restores it with transposed convolutions; skip
//! connections concatenate matching levels. Depth auto-limits to
//! min(configured levels, smallest supported horizon - 1) so every supported
//! horizon reaches the bottleneck with length >= 1.

use rand_chacha::ChaCha12Rng;

use crate::denoiser::blocks::{Act, AttentionBlock, Conv1d, ConvT1d, Linear, ResBlock, NORM_EPS};
use crate::denoiser::moe::{moe_combine, split_gate_weights, MoeSite, Routing};
use crate::denoiser::{sinusoidal_time_features, ArchCtx};
use crate::error::Result;
use crate::numerics::array::Array;
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::params::ParamStore;

/// A block that may be replicated into per-horizon experts.
enum MaybeExperts<T> {
    Single(T),
    Experts(Vec<T>),
}

impl<T> MaybeExperts<T> {
    fn build(
        replicate: bool,
        n_experts: usize,
        mut make: impl FnMut(String) -> T,
        name: &str,
    ) -> Self {
        if replicate {
            MaybeExperts::Experts(
                (0..n_experts)
                    .map(|e| make(format!("{name}.expert{e}")))
                    .collect(),
            )
        } else {
            MaybeExperts::Single(make(name.to_string()))
        }
    }
}

struct DownLevel {
    res1: MaybeExperts<ResBlock>,
    res2: MaybeExperts<ResBlock>,
    attn: Option<MaybeExperts<AttentionBlock>>,
    down: Conv1d,
}

struct UpLevel {
    up: ConvT1d,
    res1: MaybeExperts<ResBlock>,
    res2: MaybeExperts<ResBlock>,
    attn: Option<MaybeExperts<AttentionBlock>>,
}

pub struct UNetPlan {
    time1: Linear,
    time2: Linear,
    downs: Vec<DownLevel>,
    mid1: MaybeExperts<ResBlock>,
    mid_attn: Option<MaybeExperts<AttentionBlock>>,
    mid2: MaybeExperts<ResBlock>,
    ups: Vec<UpLevel>,
    final_conv: Conv1d,
    final_act: Act,
    out_conv: Conv1d,
    gate: Option<Linear>,
    groups: usize,
}

impl UNetPlan {
    pub fn build(
        ctx: &ArchCtx,
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        attention: bool,
    ) -> Result<UNetPlan> {
        let layout = ctx.layout;
        let dims = ctx.dims;
        let act = if attention { Act::Silu } else { Act::Mish };
        let min_t = *layout.horizons.first().unwrap();
        let depth = dims.widths.len().min(min_t - 1);
        let widths = &dims.widths[..depth];
        let rows = layout.rows();
        let n_experts = layout.horizons.len();
        let (conv_moe, attn_moe) = match ctx.moe {
            Some(cfg) => {
                if cfg.site == MoeSite::Attention && !attention {
                    return Err(crate::error::Error::invalid(
                        "unet3",
                        "attention-site mixture-of-experts needs the unet_attn2 backbone",
                    ));
                }
                (
                    cfg.site == MoeSite::Convolution,
                    cfg.site == MoeSite::Attention,
                )
            }
            None => (false, false),
        };

        let time1 = Linear::new(store, rng, "time.l1", dims.time_dim, dims.time_dim);
        let time2 = Linear::new(store, rng, "time.l2", dims.time_dim, dims.time_dim);

        let mut downs = Vec::with_capacity(depth);
        let mut c_prev = rows;
        for (i, &w) in widths.iter().enumerate() {
            let res1 = MaybeExperts::build(
                conv_moe,
                n_experts,
                |name| ResBlock::new(store, rng, &name, c_prev, w, dims.time_dim, dims.groups, act),
                &format!("down{i}.res1"),
            );
            let res2 = MaybeExperts::build(
                conv_moe,
                n_experts,
                |name| ResBlock::new(store, rng, &name, w, w, dims.time_dim, dims.groups, act),
                &format!("down{i}.res2"),
            );
            let attn_block = attention.then(|| {
                MaybeExperts::build(
                    attn_moe,
                    n_experts,
                    |name| AttentionBlock::new(store, rng, &name, w, dims.heads, dims.groups),
                    &format!("down{i}.attn"),
                )
            });
            let down = Conv1d::new(store, rng, &format!("down{i}.down"), w, w, 2, 1, 0);
            downs.push(DownLevel {
                res1,
                res2,
                attn: attn_block,
                down,
            });
            c_prev = w;
        }

        let w_mid = *widths.last().unwrap();
        let mid1 = MaybeExperts::build(
            conv_moe,
            n_experts,
            |name| ResBlock::new(store, rng, &name, w_mid, w_mid, dims.time_dim, dims.groups, act),
            "mid.res1",
        );
        let mid_attn = attention.then(|| {
            MaybeExperts::build(
                attn_moe,
                n_experts,
                |name| AttentionBlock::new(store, rng, &name, w_mid, dims.heads, dims.groups),
                "mid.attn",
            )
        });
        let mid2 = MaybeExperts::build(
            conv_moe,
            n_experts,
            |name| ResBlock::new(store, rng, &name, w_mid, w_mid, dims.time_dim, dims.groups, act),
            "mid.res2",
        );

        let mut ups = Vec::with_capacity(depth);
        let mut c_cur = w_mid;
        for i in (0..depth).rev() {
            let w = widths[i];
            let up = ConvT1d::new(store, rng, &format!("up{i}.up"), c_cur, c_cur, 2);
            let cat_in = c_cur + w;
            let res1 = MaybeExperts::build(
                conv_moe,
                n_experts,
                |name| ResBlock::new(store, rng, &name, cat_in, w, dims.time_dim, dims.groups, act),
                &format!("up{i}.res1"),
            );
            let res2 = MaybeExperts::build(
                conv_moe,
                n_experts,
                |name| ResBlock::new(store, rng, &name, w, w, dims.time_dim, dims.groups, act),
                &format!("up{i}.res2"),
            );
            let attn_block = attention.then(|| {
                MaybeExperts::build(
                    attn_moe,
                    n_experts,
                    |name| AttentionBlock::new(store, rng, &name, w, dims.heads, dims.groups),
                    &format!("up{i}.attn"),
                )
            });
            ups.push(UpLevel {
                up,
                res1,
                res2,
                attn: attn_block,
            });
            c_cur = w;
        }

        let final_conv = Conv1d::new(store, rng, "final.conv", widths[0], widths[0], 3, 1, 1);
        let out_conv = Conv1d::new_zeroed(store, "final.out", widths[0], rows, 1, 1, 0);
        let learned = matches!(ctx.moe, Some(cfg) if cfg.routing == Routing::Learned);
        let gate = if (conv_moe || attn_moe) && learned {
            Some(Linear::new(store, rng, "moe.gate", n_experts, n_experts))
        } else {
            None
        };

        Ok(UNetPlan {
            time1,
            time2,
            downs,
            mid1,
            mid_attn,
            mid2,
            ups,
            final_conv,
            final_act: act,
            out_conv,
            gate,
            groups: dims.groups,
        })
    }

    pub fn forward(
        &self,
        ctx: &ArchCtx,
        g: &mut Graph,
        p: &ParamStore,
        x: NodeId,
        n: usize,
    ) -> Result<NodeId> {
        let t_cols = g.value(x).shape()[1];
        let h_idx = ctx.layout.horizon_index(t_cols)?;

        // Time embedding: sinusoid -> linear -> mish -> linear.
        let sin = g.input(sinusoidal_time_features(n, ctx.dims.time_dim));
        let t1 = self.time1.apply(g, p, sin);
        let t1 = g.mish(t1);
        let t_emb = self.time2.apply(g, p, t1);

        // One gate evaluation shared by every mixture block.
        let gate_weights = match (&self.gate, ctx.moe.map(|m| m.routing)) {
            (Some(gate), Some(Routing::Learned)) => {
                let n_experts = ctx.layout.horizons.len();
                let mut onehot = vec![0.0f32; n_experts];
                onehot[h_idx] = 1.0;
                let hv = g.input(Array::from_vec(vec![n_experts, 1], onehot));
                let logits = gate.apply(g, p, hv);
                let row = g.transpose(logits);
                let soft = g.softmax_last(row);
                Some(split_gate_weights(g, soft, n_experts))
            }
            _ => None,
        };
        let routing = ctx.moe.map(|m| m.routing);
        let combine_res = |g: &mut Graph, blk: &MaybeExperts<ResBlock>, x: NodeId, t: NodeId| -> Result<NodeId> {
            match blk {
                MaybeExperts::Single(b) => b.apply(g, p, x, t),
                MaybeExperts::Experts(bs) => {
                    let routing = routing.unwrap();
                    match routing {
                        Routing::Direct => bs[h_idx].apply(g, p, x, t),
                        Routing::Learned => {
                            let outs: Result<Vec<NodeId>> =
                                bs.iter().map(|b| b.apply(g, p, x, t)).collect();
                            moe_combine(g, &outs?, h_idx, routing, gate_weights.as_deref())
                        }
                    }
                }
            }
        };
        let combine_attn = |g: &mut Graph, blk: &MaybeExperts<AttentionBlock>, x: NodeId| -> Result<NodeId> {
            match blk {
                MaybeExperts::Single(b) => b.apply(g, p, x),
                MaybeExperts::Experts(bs) => {
                    let routing = routing.unwrap();
                    match routing {
                        Routing::Direct => bs[h_idx].apply(g, p, x),
                        Routing::Learned => {
                            let outs: Result<Vec<NodeId>> =
                                bs.iter().map(|b| b.apply(g, p, x)).collect();
                            moe_combine(g, &outs?, h_idx, routing, gate_weights.as_deref())
                        }
                    }
                }
            }
        };

        let mut h = x;
        let mut skips = Vec::with_capacity(self.downs.len());
        for level in &self.downs {
            h = combine_res(g, &level.res1, h, t_emb)?;
            h = combine_res(g, &level.res2, h, t_emb)?;
            if let Some(attn) = &level.attn {
                h = combine_attn(g, attn, h)?;
            }
            skips.push(h);
            h = level.down.apply(g, p, h)?;
        }

        h = combine_res(g, &self.mid1, h, t_emb)?;
        if let Some(attn) = &self.mid_attn {
            h = combine_attn(g, attn, h)?;
        }
        h = combine_res(g, &self.mid2, h, t_emb)?;

        for level in &self.ups {
            h = level.up.apply(g, p, h)?;
            let skip = skips.pop().expect("skip per up level");
            h = g.concat0(&[h, skip]);
            h = combine_res(g, &level.res1, h, t_emb)?;
            h = combine_res(g, &level.res2, h, t_emb)?;
            if let Some(attn) = &level.attn {
                h = combine_attn(g, attn, h)?;
            }
        }

        let mut out = self.final_conv.apply(g, p, h)?;
        out = g.group_norm(out, self.groups, NORM_EPS)?;
        out = self.final_act.apply(g, out);
        self.out_conv.apply(g, p, out)
    }
}

/// Temporal lengths along the down path, bottleneck, and up path for a
/// horizon `t` and `depth` downsampling levels, straight from the conv length
/// formula: down k=2,s=1,p=0 gives L-1; transposed k=2 gives L+1.
pub fn temporal_length_trace(t: usize, depth: usize) -> Vec<usize> {
    let conv_out = |l: usize| l - 1; // floor((L + 2*0 - 2)/1) + 1
    let mut lengths = vec![t];
    let mut l = t;
    for _ in 0..depth {
        l = conv_out(l);
        lengths.push(l);
    }
    for _ in 0..depth {
        l += 1; // transposed conv, k=2
        lengths.push(l);
    }
    lengths
}
