//! The learnable denoiser f(x_n, n) predicting the clean plan tensor, in
//! three interchangeable backbones selected by name at runtime:
//!
//! - `unet3`: temporal UNet, Mish activations, group norm (3 levels at full
//!   scale; depth auto-limits to the smallest supported horizon minus one).
//! - `unet_attn2`: 2-level temporal UNet with self-attention blocks and SiLU,
//!   optionally with mixture-of-experts horizon routing.
//! - `transformer12`: pre-norm transformer with adaptive layer-norm time
//!   modulation and learned positional embeddings.

pub mod blocks;
pub mod moe;
mod transformer;
mod unet;

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha12Rng;

use crate::conditioning::{HorizonMode, Layout, TaskMode};
use crate::error::{Error, Result};
use crate::numerics::array::Array;
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::params::ParamStore;
use crate::numerics::{read_checkpoint, write_checkpoint};

pub use moe::{moe_combine, split_gate_weights, MoeConfig, MoeSite, Routing};
pub use transformer::TransformerPlan;
pub use unet::{temporal_length_trace, UNetPlan};

/// Width/depth/head configuration for a backbone.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelDims {
    /// Per-level hidden widths (UNets) or the single token width (transformer).
    pub widths: Vec<usize>,
    /// Transformer layer count (ignored by the UNets).
    pub depth: usize,
    pub heads: usize,
    pub groups: usize,
    pub time_dim: usize,
    pub mlp_ratio: usize,
}

impl ModelDims {
    /// CPU-trainable defaults; the full-scale recipes divide into these by 8.
    pub fn desk_unet3() -> ModelDims {
        ModelDims {
            widths: vec![32, 64, 128],
            depth: 0,
            heads: 4,
            groups: 8,
            time_dim: 32,
            mlp_ratio: 2,
        }
    }

    pub fn desk_unet_attn2() -> ModelDims {
        ModelDims {
            widths: vec![64, 128],
            depth: 0,
            heads: 4,
            groups: 8,
            time_dim: 32,
            mlp_ratio: 2,
        }
    }

    pub fn desk_transformer() -> ModelDims {
        ModelDims {
            widths: vec![128],
            depth: 4,
            heads: 4,
            groups: 8,
            time_dim: 32,
            mlp_ratio: 2,
        }
    }

    /// Full-scale recipes: UNet 256/512/1024, UNet-attention 512/1024 with
    /// 32 heads, transformer 12 layers x 1024 wide with 32 heads.
    pub fn full_unet3() -> ModelDims {
        ModelDims {
            widths: vec![256, 512, 1024],
            depth: 0,
            heads: 32,
            groups: 8,
            time_dim: 128,
            mlp_ratio: 4,
        }
    }

    pub fn full_unet_attn2() -> ModelDims {
        ModelDims {
            widths: vec![512, 1024],
            depth: 0,
            heads: 32,
            groups: 8,
            time_dim: 128,
            mlp_ratio: 4,
        }
    }

    pub fn full_transformer12() -> ModelDims {
        ModelDims {
            widths: vec![1024],
            depth: 12,
            heads: 32,
            groups: 8,
            time_dim: 128,
            mlp_ratio: 4,
        }
    }

    /// Minimal dims for gradient-checking and fast structural tests.
    pub fn tiny_unet() -> ModelDims {
        ModelDims {
            widths: vec![8, 16],
            depth: 0,
            heads: 2,
            groups: 2,
            time_dim: 8,
            mlp_ratio: 2,
        }
    }

    pub fn tiny_transformer() -> ModelDims {
        ModelDims {
            widths: vec![16],
            depth: 2,
            heads: 2,
            groups: 2,
            time_dim: 8,
            mlp_ratio: 2,
        }
    }
}

/// Interleaved sinusoidal features of a diffusion step: [sin, cos, sin, ...]
/// so n = 0 yields the [0, 1, 0, 1, ...] pattern. Shape [dim, 1].
pub fn sinusoidal_time_features(n: usize, dim: usize) -> Array {
    assert!(dim >= 2 && dim % 2 == 0, "time dim must be even");
    let half = dim / 2;
    let mut data = vec![0.0f32; dim];
    for k in 0..half {
        let omega = (10_000.0f64).powf(-(k as f64) / half as f64);
        let arg = n as f64 * omega;
        data[2 * k] = arg.sin() as f32;
        data[2 * k + 1] = arg.cos() as f32;
    }
    Array::from_vec(vec![dim, 1], data)
}

pub struct ArchCtx<'a> {
    pub layout: &'a Layout,
    pub dims: &'a ModelDims,
    pub moe: Option<MoeConfig>,
}

/// A backbone strategy: builds its parameter set and layer plan from the
/// shared context. Registered by name and selected at runtime.
pub trait Arch: Sync {
    fn name(&self) -> &'static str;
    fn build(&self, ctx: &ArchCtx, store: &mut ParamStore, rng: &mut ChaCha12Rng)
        -> Result<BuiltArch>;
}

/// The constructed layer plan for one backbone instance.
pub enum BuiltArch {
    UNet(UNetPlan),
    Transformer(TransformerPlan),
}

impl BuiltArch {
    fn forward(
        &self,
        ctx: &ArchCtx,
        g: &mut Graph,
        p: &ParamStore,
        x: NodeId,
        n: usize,
    ) -> Result<NodeId> {
        match self {
            BuiltArch::UNet(plan) => plan.forward(ctx, g, p, x, n),
            BuiltArch::Transformer(plan) => plan.forward(ctx, g, p, x, n),
        }
    }
}

struct UNet3Arch;
struct UNetAttn2Arch;
struct Transformer12Arch;

impl Arch for UNet3Arch {
    fn name(&self) -> &'static str {
        "unet3"
    }
    fn build(
        &self,
        ctx: &ArchCtx,
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
    ) -> Result<BuiltArch> {
        Ok(BuiltArch::UNet(UNetPlan::build(ctx, store, rng, false)?))
    }
}

impl Arch for UNetAttn2Arch {
    fn name(&self) -> &'static str {
        "unet_attn2"
    }
    fn build(
        &self,
        ctx: &ArchCtx,
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
    ) -> Result<BuiltArch> {
        Ok(BuiltArch::UNet(UNetPlan::build(ctx, store, rng, true)?))
    }
}

impl Arch for Transformer12Arch {
    fn name(&self) -> &'static str {
        "transformer12"
    }
    fn build(
        &self,
        ctx: &ArchCtx,
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
    ) -> Result<BuiltArch> {
        if ctx.moe.is_some() {
            return Err(Error::invalid(
                "transformer12",
                "mixture-of-experts routing is only wired into the UNet backbones",
            ));
        }
        Ok(BuiltArch::Transformer(TransformerPlan::build(
            ctx, store, rng,
        )?))
    }
}

static ARCHES: [&dyn Arch; 3] = [&UNet3Arch, &UNetAttn2Arch, &Transformer12Arch];

/// All registered backbones, in registration order.
pub fn arch_registry() -> &'static [&'static dyn Arch] {
    &ARCHES
}

pub fn arch_by_name(name: &str) -> Result<&'static dyn Arch> {
    arch_registry()
        .iter()
        .find(|a| a.name() == name)
        .copied()
        .ok_or_else(|| Error::UnknownName {
            kind: "denoiser variant",
            name: name.to_string(),
            known: arch_registry()
                .iter()
                .map(|a| a.name())
                .collect::<Vec<_>>()
                .join(", "),
        })
}

/// The denoiser model: variant descriptor, layout, dims, parameters, and the
/// built layer plan. Parameters are immutable during sampling; training
/// replaces them through the optimizer.
pub struct DenoiserModel {
    variant: &'static str,
    pub layout: Layout,
    pub dims: ModelDims,
    pub moe: Option<MoeConfig>,
    pub params: ParamStore,
    built: BuiltArch,
}

impl std::fmt::Debug for DenoiserModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DenoiserModel")
            .field("variant", &self.variant)
            .field("layout", &self.layout)
            .field("dims", &self.dims)
            .field("moe", &self.moe)
            .field("param_count", &self.param_count())
            .finish()
    }
}

impl DenoiserModel {
    pub fn new(
        variant: &str,
        layout: Layout,
        dims: ModelDims,
        moe: Option<MoeConfig>,
        seed: u64,
    ) -> Result<DenoiserModel> {
        let arch = arch_by_name(variant)?;
        let mut store = ParamStore::new();
        let mut rng = <ChaCha12Rng as rand::SeedableRng>::seed_from_u64(seed);
        let built = arch.build(
            &ArchCtx {
                layout: &layout,
                dims: &dims,
                moe,
            },
            &mut store,
            &mut rng,
        )?;
        Ok(DenoiserModel {
            variant: arch.name(),
            layout,
            dims,
            moe,
            params: store,
            built,
        })
    }

    pub fn variant(&self) -> &'static str {
        self.variant
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Forward pass using the model's own parameters.
    pub fn forward(&self, g: &mut Graph, x: NodeId, n: usize) -> Result<NodeId> {
        self.forward_with(g, &self.params, x, n)
    }

    /// Forward pass with an explicit parameter store (finite-difference
    /// harnesses evaluate shifted copies through this).
    pub fn forward_with(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        x: NodeId,
        n: usize,
    ) -> Result<NodeId> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 2 || shape[0] != self.layout.rows() {
            return Err(Error::Shape {
                op: "denoise",
                dim: "rows",
                got: if shape.is_empty() { 0 } else { shape[0] },
                expected: self.layout.rows(),
            });
        }
        self.layout.horizon_index(shape[1])?;
        let ctx = ArchCtx {
            layout: &self.layout,
            dims: &self.dims,
            moe: self.moe,
        };
        self.built.forward(&ctx, g, params, x, n)
    }

    /// Predict x0 from a noisy plan tensor (the caller projects first).
    pub fn denoise(&self, x_n: &Array, n: usize) -> Result<Array> {
        let mut g = Graph::new();
        let x = g.input(x_n.clone());
        let out = self.forward(&mut g, x, n)?;
        Ok(g.value(out).clone())
    }
}

const META_VARIANT: &str = "variant";

/// Serialize model configuration + parameters (and the schedule descriptor)
/// into the checkpoint container.
pub fn save_model(
    path: &Path,
    model: &DenoiserModel,
    schedule_name: &str,
    schedule_steps: usize,
) -> Result<()> {
    let mut meta = BTreeMap::new();
    meta.insert(META_VARIANT.to_string(), model.variant.to_string());
    meta.insert("schedule".to_string(), schedule_name.to_string());
    meta.insert("schedule_n".to_string(), schedule_steps.to_string());
    meta.insert(
        "layout.horizons".to_string(),
        join_usizes(&model.layout.horizons),
    );
    meta.insert(
        "layout.horizon_mode".to_string(),
        model.layout.horizon_mode.as_str().to_string(),
    );
    meta.insert(
        "layout.task_mode".to_string(),
        model.layout.task_mode.as_str().to_string(),
    );
    meta.insert("layout.n_tasks".to_string(), model.layout.n_tasks.to_string());
    meta.insert(
        "layout.n_actions".to_string(),
        model.layout.n_actions.to_string(),
    );
    meta.insert("layout.obs_dim".to_string(), model.layout.obs_dim.to_string());
    meta.insert("dims.widths".to_string(), join_usizes(&model.dims.widths));
    meta.insert("dims.depth".to_string(), model.dims.depth.to_string());
    meta.insert("dims.heads".to_string(), model.dims.heads.to_string());
    meta.insert("dims.groups".to_string(), model.dims.groups.to_string());
    meta.insert("dims.time_dim".to_string(), model.dims.time_dim.to_string());
    meta.insert("dims.mlp_ratio".to_string(), model.dims.mlp_ratio.to_string());
    meta.insert(
        "moe".to_string(),
        model.moe.map_or("none".to_string(), |m| m.as_str()),
    );
    write_checkpoint(path, &meta, &model.params)
}

/// Load a model back; returns the model plus the schedule descriptor.
pub fn load_model(path: &Path) -> Result<(DenoiserModel, String, usize)> {
    let (meta, params) = read_checkpoint(path)?;
    let get = |key: &str| -> Result<&String> {
        meta.get(key)
            .ok_or_else(|| Error::invalid("load_model", format!("missing metadata key `{key}`")))
    };
    let layout = Layout::new(
        parse_usizes(get("layout.horizons")?)?,
        HorizonMode::parse(get("layout.horizon_mode")?)?,
        TaskMode::parse(get("layout.task_mode")?)?,
        parse_usize(get("layout.n_tasks")?)?,
        parse_usize(get("layout.n_actions")?)?,
        parse_usize(get("layout.obs_dim")?)?,
    )?;
    let dims = ModelDims {
        widths: parse_usizes(get("dims.widths")?)?,
        depth: parse_usize(get("dims.depth")?)?,
        heads: parse_usize(get("dims.heads")?)?,
        groups: parse_usize(get("dims.groups")?)?,
        time_dim: parse_usize(get("dims.time_dim")?)?,
        mlp_ratio: parse_usize(get("dims.mlp_ratio")?)?,
    };
    let moe = MoeConfig::parse(get("moe")?)?;
    let variant = get(META_VARIANT)?.clone();
    let schedule_name = get("schedule")?.clone();
    let schedule_steps = parse_usize(get("schedule_n")?)?;

    let mut model = DenoiserModel::new(&variant, layout, dims, moe, 0)?;
    // Swap in the stored parameters after verifying the name/shape sets match.
    let fresh: Vec<String> = model.params.names().cloned().collect();
    let loaded: Vec<String> = params.names().cloned().collect();
    if fresh != loaded {
        return Err(Error::invalid(
            "load_model",
            format!(
                "parameter set mismatch: built {} names, checkpoint has {}",
                fresh.len(),
                loaded.len()
            ),
        ));
    }
    for name in &fresh {
        let new = params.get(name).unwrap();
        if new.shape() != model.params.get(name).unwrap().shape() {
            return Err(Error::invalid(
                "load_model",
                format!("shape mismatch for parameter `{name}`"),
            ));
        }
        model.params.set(name, new.clone());
    }
    Ok((model, schedule_name, schedule_steps))
}

fn join_usizes(v: &[usize]) -> String {
    v.iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_usizes(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::invalid("parse", format!("bad integer list entry `{p}`")))
        })
        .collect()
}

fn parse_usize(s: &str) -> Result<usize> {
    s.trim()
        .parse::<usize>()
        .map_err(|_| Error::invalid("parse", format!("bad integer `{s}`")))
}

#[cfg(test)]
mod tests;
