//! Transformer backbone: plan columns become tokens, layer norm is applied
//! per token, and the time embedding modulates each sublayer through adaptive
//! layer-norm (shift/scale/gate). Positional information comes from learned
//! per-position vectors over the largest supported horizon.

use rand_chacha::ChaCha12Rng;

use crate::denoiser::blocks::{raw_attention, Linear, NORM_EPS};
use crate::denoiser::{sinusoidal_time_features, ArchCtx};
use crate::error::Result;
use crate::numerics::array::Array;
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::params::ParamStore;

struct DitLayer {
    modulation: Linear, // time_dim -> 6*width: shift/scale/gate per sublayer
    qkv: Linear,
    attn_out: Linear,
    mlp1: Linear,
    mlp2: Linear,
}

pub struct TransformerPlan {
    time1: Linear,
    time2: Linear,
    in_proj: Linear,
    pos: String,
    layers: Vec<DitLayer>,
    final_modulation: Linear, // time_dim -> 2*width: shift/scale
    out_proj: Linear,
    width: usize,
}

impl TransformerPlan {
    pub fn build(
        ctx: &ArchCtx,
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
    ) -> Result<TransformerPlan> {
        let dims = ctx.dims;
        let width = dims.widths[0];
        let rows = ctx.layout.rows();
        let max_t = *ctx.layout.horizons.last().unwrap();

        let time1 = Linear::new(store, rng, "time.l1", dims.time_dim, dims.time_dim);
        let time2 = Linear::new(store, rng, "time.l2", dims.time_dim, dims.time_dim);
        let in_proj = Linear::new(store, rng, "in_proj", rows, width);
        store.insert_weight("pos", &[max_t, width], width, rng);

        let mut layers = Vec::with_capacity(dims.depth);
        for i in 0..dims.depth {
            layers.push(DitLayer {
                modulation: Linear::new(
                    store,
                    rng,
                    &format!("layer{i}.mod"),
                    dims.time_dim,
                    6 * width,
                ),
                qkv: Linear::new(store, rng, &format!("layer{i}.qkv"), width, 3 * width),
                attn_out: Linear::new(store, rng, &format!("layer{i}.attn_out"), width, width),
                mlp1: Linear::new(
                    store,
                    rng,
                    &format!("layer{i}.mlp1"),
                    width,
                    dims.mlp_ratio * width,
                ),
                mlp2: Linear::new(
                    store,
                    rng,
                    &format!("layer{i}.mlp2"),
                    dims.mlp_ratio * width,
                    width,
                ),
            });
        }
        let final_modulation =
            Linear::new(store, rng, "final.mod", dims.time_dim, 2 * width);
        let out_proj = Linear::new_zeroed(store, "final.out", width, rows);

        Ok(TransformerPlan {
            time1,
            time2,
            in_proj,
            pos: "pos".to_string(),
            layers,
            final_modulation,
            out_proj,
            width,
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
        let w = self.width;
        let t_cols = g.value(x).shape()[1];

        let sin = g.input(sinusoidal_time_features(n, ctx.dims.time_dim));
        let t1 = self.time1.apply(g, p, sin);
        let t1 = g.mish(t1);
        let t_emb = self.time2.apply(g, p, t1);
        let t_act = g.silu(t_emb);

        let mut tokens = self.in_proj.apply(g, p, x);
        let pos = g.param(&self.pos, p);
        let pos_t = g.slice0(pos, 0, t_cols);
        let pos_wt = g.transpose(pos_t);
        tokens = g.add(tokens, pos_wt);

        let ones = g.input(Array::fill(&[w], 1.0));
        for layer in &self.layers {
            let m = layer.modulation.apply(g, p, t_act);
            let part = |g: &mut Graph, i: usize| {
                let s = g.slice0(m, i * w, w);
                g.reshape(s, vec![w])
            };
            let shift1 = part(g, 0);
            let scale1 = part(g, 1);
            let gate1 = part(g, 2);
            let shift2 = part(g, 3);
            let scale2 = part(g, 4);
            let gate2 = part(g, 5);

            let normed = g.layer_norm_cols(tokens, NORM_EPS);
            let s1 = g.add(scale1, ones);
            let moded = g.mul_rowvec(normed, s1);
            let moded = g.add_rowvec(moded, shift1);
            let attn = raw_attention(g, p, &layer.qkv, &layer.attn_out, moded, w, ctx.dims.heads);
            let attn = g.mul_rowvec(attn, gate1);
            tokens = g.add(tokens, attn);

            let normed = g.layer_norm_cols(tokens, NORM_EPS);
            let s2 = g.add(scale2, ones);
            let moded = g.mul_rowvec(normed, s2);
            let moded = g.add_rowvec(moded, shift2);
            let h = layer.mlp1.apply(g, p, moded);
            let h = g.silu(h);
            let h = layer.mlp2.apply(g, p, h);
            let h = g.mul_rowvec(h, gate2);
            tokens = g.add(tokens, h);
        }

        let m = self.final_modulation.apply(g, p, t_act);
        let shift = g.slice0(m, 0, w);
        let shift = g.reshape(shift, vec![w]);
        let scale = g.slice0(m, w, w);
        let scale = g.reshape(scale, vec![w]);
        let normed = g.layer_norm_cols(tokens, NORM_EPS);
        let s = g.add(scale, ones);
        let moded = g.mul_rowvec(normed, s);
        let moded = g.add_rowvec(moded, shift);
        Ok(self.out_proj.apply(g, p, moded))
    }
}
