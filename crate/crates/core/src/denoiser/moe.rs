//! Mixture-of-experts horizon routing: one expert per supported horizon,
//! combined either by direct dispatch on the horizon condition or by a
//! learned softmax gate over all expert outputs.

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, NodeId};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MoeSite {
    Attention,
    Convolution,
}

impl MoeSite {
    pub fn as_str(&self) -> &'static str {
        match self {
            MoeSite::Attention => "attention",
            MoeSite::Convolution => "convolution",
        }
    }

    pub fn parse(s: &str) -> Result<MoeSite> {
        match s {
            "attention" => Ok(MoeSite::Attention),
            "convolution" => Ok(MoeSite::Convolution),
            other => Err(Error::UnknownName {
                kind: "moe site",
                name: other.to_string(),
                known: "attention, convolution".to_string(),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Routing {
    /// Dispatch to the expert indexed by the horizon condition.
    Direct,
    /// Softmax-gated convex combination of all expert outputs.
    Learned,
}

impl Routing {
    pub fn as_str(&self) -> &'static str {
        match self {
            Routing::Direct => "direct",
            Routing::Learned => "learned",
        }
    }

    pub fn parse(s: &str) -> Result<Routing> {
        match s {
            "direct" => Ok(Routing::Direct),
            "learned" => Ok(Routing::Learned),
            other => Err(Error::UnknownName {
                kind: "moe routing",
                name: other.to_string(),
                known: "direct, learned".to_string(),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MoeConfig {
    pub site: MoeSite,
    pub routing: Routing,
}

impl MoeConfig {
    pub fn as_str(&self) -> String {
        format!("{},{}", self.site.as_str(), self.routing.as_str())
    }

    pub fn parse(s: &str) -> Result<Option<MoeConfig>> {
        if s == "none" {
            return Ok(None);
        }
        let (site, routing) = s.split_once(',').ok_or_else(|| {
            Error::invalid("moe", format!("expected `site,routing` or `none`, got `{s}`"))
        })?;
        Ok(Some(MoeConfig {
            site: MoeSite::parse(site)?,
            routing: Routing::parse(routing)?,
        }))
    }
}

/// Combine expert outputs. Direct routing returns the selected expert's node
/// unchanged (bit-identical to running that expert alone); learned routing
/// forms `sum_i w_i * expert_i` with `w` the provided gate weight nodes,
/// one scalar node per expert.
pub fn moe_combine(
    g: &mut Graph,
    expert_outputs: &[NodeId],
    horizon_idx: usize,
    routing: Routing,
    gate_weights: Option<&[NodeId]>,
) -> Result<NodeId> {
    if expert_outputs.is_empty() {
        return Err(Error::invalid("moe_combine", "no experts"));
    }
    match routing {
        Routing::Direct => {
            if horizon_idx >= expert_outputs.len() {
                return Err(Error::invalid(
                    "moe_combine",
                    format!(
                        "horizon index {horizon_idx} has no expert (count {})",
                        expert_outputs.len()
                    ),
                ));
            }
            Ok(expert_outputs[horizon_idx])
        }
        Routing::Learned => {
            let weights = gate_weights
                .ok_or_else(|| Error::invalid("moe_combine", "learned routing needs gate weights"))?;
            if weights.len() != expert_outputs.len() {
                return Err(Error::Shape {
                    op: "moe_combine",
                    dim: "gate weights",
                    got: weights.len(),
                    expected: expert_outputs.len(),
                });
            }
            let mut acc = g.scale_by(expert_outputs[0], weights[0]);
            for i in 1..expert_outputs.len() {
                let term = g.scale_by(expert_outputs[i], weights[i]);
                acc = g.add(acc, term);
            }
            Ok(acc)
        }
    }
}

/// Split a [1, E] softmax row into per-expert scalar weight nodes.
pub fn split_gate_weights(g: &mut Graph, gate_row: NodeId, n_experts: usize) -> Vec<NodeId> {
    let col = g.transpose(gate_row); // [E, 1]
    (0..n_experts)
        .map(|i| {
            let s = g.slice0(col, i, 1);
            g.reshape(s, vec![1])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::array::Array;

    #[test]
    fn direct_routing_is_bit_identical_to_expert() {
        let mut g = Graph::new();
        let e0 = g.input(Array::from_vec(vec![2], vec![1.0, 2.0]));
        let e1 = g.input(Array::from_vec(vec![2], vec![3.0, 4.0]));
        let out = moe_combine(&mut g, &[e0, e1], 1, Routing::Direct, None).unwrap();
        assert_eq!(out, e1);
        assert!(moe_combine(&mut g, &[e0, e1], 2, Routing::Direct, None).is_err());
    }

    #[test]
    fn uniform_gate_averages_experts() {
        let mut g = Graph::new();
        let e0 = g.input(Array::from_vec(vec![2], vec![2.0, 4.0]));
        let e1 = g.input(Array::from_vec(vec![2], vec![6.0, 0.0]));
        // softmax of equal logits is uniform
        let logits = g.input(Array::zeros(&[1, 2]));
        let gate = g.softmax_last(logits);
        let w = split_gate_weights(&mut g, gate, 2);
        let out = moe_combine(&mut g, &[e0, e1], 0, Routing::Learned, Some(&w)).unwrap();
        assert_eq!(g.value(out).data(), &[4.0, 2.0]);
    }

    #[test]
    fn gate_weights_sum_to_one() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(12);
        for _ in 0..50 {
            let mut g = Graph::new();
            let logits = g.input(Array::randn(&[1, 4], &mut rng));
            let gate = g.softmax_last(logits);
            let w = split_gate_weights(&mut g, gate, 4);
            let total: f32 = w.iter().map(|&n| g.value(n).item()).sum();
            assert!((total - 1.0).abs() < 1e-6, "{total}");
        }
    }
}
