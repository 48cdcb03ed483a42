use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use super::unet::temporal_length_trace;
use super::*;
use crate::conditioning::{HorizonMode, Layout, TaskMode};
use crate::numerics::gradcheck::assert_grads_match;
use crate::numerics::Graph;

fn layout(horizons: Vec<usize>) -> Layout {
    Layout::new(horizons, HorizonMode::Concat, TaskMode::Concat, 2, 4, 3).unwrap()
}

fn fresh(variant: &str, horizons: Vec<usize>, moe: Option<MoeConfig>) -> DenoiserModel {
    let dims = match variant {
        "transformer12" => ModelDims::tiny_transformer(),
        _ => ModelDims::tiny_unet(),
    };
    DenoiserModel::new(variant, layout(horizons), dims, moe, 7).unwrap()
}

#[test]
fn every_variant_is_shape_preserving_and_finite() {
    for variant in ["unet3", "unet_attn2", "transformer12"] {
        let model = fresh(variant, vec![3, 4, 5, 6], None);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for t in [3usize, 4, 5, 6] {
            let x = Array::randn(&[model.layout.rows(), t], &mut rng);
            let y = model.denoise(&x, 5).unwrap();
            assert_eq!(y.shape(), x.shape(), "{variant} T={t}");
            assert!(y.all_finite(), "{variant} T={t}");
        }
    }
}

#[test]
fn unsupported_layout_is_rejected() {
    let model = fresh("unet3", vec![3, 4], None);
    let mut rng = ChaCha12Rng::seed_from_u64(2);
    // wrong horizon
    let x = Array::randn(&[model.layout.rows(), 5], &mut rng);
    assert!(model.denoise(&x, 1).is_err());
    // wrong row count
    let x = Array::randn(&[model.layout.rows() + 1, 3], &mut rng);
    assert!(model.denoise(&x, 1).is_err());
}

#[test]
fn temporal_lengths_match_conv_formula() {
    // T = 3 with 2 levels: 3 -> 2 -> 1 -> 2 -> 3.
    assert_eq!(temporal_length_trace(3, 2), vec![3, 2, 1, 2, 3]);
    assert_eq!(temporal_length_trace(4, 3), vec![4, 3, 2, 1, 2, 3, 4]);
    // A single-level endpoint model on T = 2: 2 -> 1 -> 2.
    assert_eq!(temporal_length_trace(2, 1), vec![2, 1, 2]);
}

#[test]
fn zero_initialized_output_head_gives_zero_at_init() {
    for variant in ["unet3", "unet_attn2", "transformer12"] {
        let model = fresh(variant, vec![3], None);
        let x = Array::zeros(&[model.layout.rows(), 3]);
        let y = model.denoise(&x, 1).unwrap();
        assert!(y.data().iter().all(|&v| v.abs() < 1e-6), "{variant}");
    }
}

#[test]
fn time_features_are_interleaved_and_collision_free() {
    let e0 = sinusoidal_time_features(0, 16);
    for k in 0..8 {
        assert_eq!(e0.data()[2 * k], 0.0, "sin slot");
        assert_eq!(e0.data()[2 * k + 1], 1.0, "cos slot");
    }
    // distinct n give distinct embeddings over a full schedule
    let n_steps = 200;
    let embs: Vec<Vec<u32>> = (1..=n_steps)
        .map(|n| {
            sinusoidal_time_features(n, 16)
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect()
        })
        .collect();
    for i in 0..embs.len() {
        for j in i + 1..embs.len() {
            assert_ne!(embs[i], embs[j], "collision at {} vs {}", i + 1, j + 1);
        }
    }
    // deterministic across calls
    assert!(sinusoidal_time_features(7, 16).bit_eq(&sinusoidal_time_features(7, 16)));
}

#[test]
fn forward_is_deterministic_and_seeded() {
    let a = fresh("unet_attn2", vec![3], None);
    let b = fresh("unet_attn2", vec![3], None);
    for (name, arr) in a.params.iter() {
        assert!(arr.bit_eq(b.params.get(name).unwrap()), "{name}");
    }
    let mut rng = ChaCha12Rng::seed_from_u64(3);
    let x = Array::randn(&[a.layout.rows(), 3], &mut rng);
    assert!(a.denoise(&x, 4).unwrap().bit_eq(&b.denoise(&x, 4).unwrap()));
}

#[test]
fn gradients_flow_to_every_variant() {
    let mut rng = ChaCha12Rng::seed_from_u64(11);
    for variant in ["unet3", "unet_attn2", "transformer12"] {
        let model = fresh(variant, vec![3], None);
        let x = Array::randn(&[model.layout.rows(), 3], &mut rng);
        let loss_of = |params: &ParamStore| -> f32 {
            let mut g = Graph::new();
            let xi = g.input(x.clone());
            let out = model.forward_with(&mut g, params, xi, 2).unwrap();
            let l = g.sum_squares(out);
            g.value(l).item()
        };
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let out = model.forward(&mut g, xi, 2).unwrap();
        let l = g.sum_squares(out);
        let grads = g.backward(l).unwrap();
        assert_grads_match(&model.params, &grads, loss_of, 1e-2, 1e-3, &mut rng);
    }
}

#[test]
fn moe_direct_routing_touches_only_routed_expert() {
    let moe = MoeConfig {
        site: MoeSite::Convolution,
        routing: Routing::Direct,
    };
    let model = fresh("unet_attn2", vec![3, 4], Some(moe));
    let mut rng = ChaCha12Rng::seed_from_u64(5);
    // forward at T = 3 routes to expert 0
    let x = Array::randn(&[model.layout.rows(), 3], &mut rng);
    let mut g = Graph::new();
    let xi = g.input(x);
    let out = model.forward(&mut g, xi, 1).unwrap();
    let loss = g.sum_squares(out);
    let grads = g.backward(loss).unwrap();
    let touched: Vec<&String> = grads.iter().map(|(n, _)| n).collect();
    assert!(touched.iter().any(|n| n.contains("expert0")));
    assert!(
        !touched.iter().any(|n| n.contains("expert1")),
        "expert1 must stay out of the T=3 graph"
    );
    // shared trunk params (downsample convs) are present
    assert!(touched.iter().any(|n| n.contains("down0.down")));
}

#[test]
fn moe_learned_routing_blends_all_experts() {
    let moe = MoeConfig {
        site: MoeSite::Attention,
        routing: Routing::Learned,
    };
    let model = fresh("unet_attn2", vec![3, 4], Some(moe));
    let mut rng = ChaCha12Rng::seed_from_u64(6);
    let x = Array::randn(&[model.layout.rows(), 3], &mut rng);
    let mut g = Graph::new();
    let xi = g.input(x);
    let out = model.forward(&mut g, xi, 1).unwrap();
    let loss = g.sum_squares(out);
    let grads = g.backward(loss).unwrap();
    let touched: Vec<&String> = grads.iter().map(|(n, _)| n).collect();
    assert!(touched.iter().any(|n| n.contains("expert0")));
    assert!(touched.iter().any(|n| n.contains("expert1")));
    assert!(touched.iter().any(|n| n.contains("moe.gate")));
}

#[test]
fn moe_rejected_where_unsupported() {
    let moe = Some(MoeConfig {
        site: MoeSite::Attention,
        routing: Routing::Direct,
    });
    assert!(DenoiserModel::new("unet3", layout(vec![3]), ModelDims::tiny_unet(), moe, 0).is_err());
    assert!(DenoiserModel::new(
        "transformer12",
        layout(vec![3]),
        ModelDims::tiny_transformer(),
        moe,
        0
    )
    .is_err());
}

#[test]
fn unknown_variant_is_rejected_with_known_list() {
    let err = DenoiserModel::new("resnet", layout(vec![3]), ModelDims::tiny_unet(), None, 0)
        .unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("unet3") && msg.contains("transformer12"), "{msg}");
}

#[test]
fn save_load_round_trip_preserves_forward() {
    let dir = std::env::temp_dir().join("proplan-model-io");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("model.ckpt");
    let model = fresh("unet_attn2", vec![3, 4], None);
    save_model(&path, &model, "cosine", 50).unwrap();
    let (loaded, sched_name, sched_n) = load_model(&path).unwrap();
    assert_eq!(sched_name, "cosine");
    assert_eq!(sched_n, 50);
    assert_eq!(loaded.variant(), "unet_attn2");
    assert_eq!(loaded.layout, model.layout);
    assert_eq!(loaded.param_count(), model.param_count());
    let mut rng = ChaCha12Rng::seed_from_u64(9);
    let x = Array::randn(&[model.layout.rows(), 4], &mut rng);
    assert!(model.denoise(&x, 3).unwrap().bit_eq(&loaded.denoise(&x, 3).unwrap()));
}

#[test]
fn full_scale_recipes_match_published_dims() {
    let unet = ModelDims::full_unet3();
    assert_eq!(unet.widths, vec![256, 512, 1024]);
    let attn = ModelDims::full_unet_attn2();
    assert_eq!(attn.widths, vec![512, 1024]);
    assert_eq!(attn.heads, 32);
    let tf = ModelDims::full_transformer12();
    assert_eq!(tf.widths, vec![1024]);
    assert_eq!(tf.depth, 12);
    assert_eq!(tf.heads, 32);
    // desk scale divides the UNet widths by 8
    assert_eq!(
        ModelDims::desk_unet3().widths,
        unet.widths.iter().map(|w| w / 8).collect::<Vec<_>>()
    );
}

#[test]
fn param_count_is_reported_and_positive() {
    let model = fresh("unet3", vec![3], None);
    assert!(model.param_count() > 0);
    let sum: usize = model.params.iter().map(|(_, a)| a.numel()).sum();
    assert_eq!(model.param_count(), sum);
}
