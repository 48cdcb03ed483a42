use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use super::gradcheck::{assert_grads_match, DEFAULT_REL_TOL};
use super::graph::{Gradients, Graph, NodeId};
use super::*;

fn rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

/// Reduce any node to a scalar with fixed random weights so every output
/// entry contributes to the checked gradient.
fn scalarize(g: &mut Graph, x: NodeId, seed: u64) -> NodeId {
    let n = g.value(x).numel();
    let mut r = rng(seed);
    let w: Vec<f32> = (0..n).map(|_| r.random_range(0.25..1.0)).collect();
    let flat = g.reshape(x, vec![1, n]);
    let wv = g.input(Array::from_vec(vec![n, 1], w));
    let s = g.matmul(flat, wv);
    g.reshape(s, vec![1])
}

/// Directional FD check of `build` over every tensor in `params`.
fn fd_check<F>(params: ParamStore, build: F, seed: u64)
where
    F: Fn(&mut Graph, &ParamStore) -> NodeId,
{
    let mut g = Graph::new();
    let out = build(&mut g, &params);
    let loss = scalarize(&mut g, out, seed ^ 0x5ca1ab1e);
    let grads = g.backward(loss).unwrap();
    assert_grads_match(
        &params,
        &grads,
        |p| {
            let mut g = Graph::new();
            let out = build(&mut g, p);
            let loss = scalarize(&mut g, out, seed ^ 0x5ca1ab1e);
            g.value(loss).item()
        },
        1e-2,
        DEFAULT_REL_TOL,
        &mut rng(seed),
    );
}

#[test]
fn conv1d_output_length_shrinks_by_one() {
    // k=2, stride=1, padding=0, L=3 -> L_out=2.
    let mut g = Graph::new();
    let x = g.input(Array::from_vec(vec![1, 3], vec![1.0, 2.0, 3.0]));
    let w = g.input(Array::from_vec(vec![1, 1, 2], vec![1.0, 1.0]));
    let b = g.input(Array::zeros(&[1]));
    let y = g.conv1d(x, w, b, 1, 0).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 2]);
    assert_eq!(g.value(y).data(), &[3.0, 5.0]);
}

#[test]
fn conv1d_identity_kernel() {
    let mut g = Graph::new();
    let x = g.input(Array::from_vec(vec![1, 4], vec![0.5, -1.0, 2.0, 7.0]));
    let w = g.input(Array::from_vec(vec![1, 1, 1], vec![1.0]));
    let b = g.input(Array::zeros(&[1]));
    let y = g.conv1d(x, w, b, 1, 0).unwrap();
    assert!(g.value(y).bit_eq(g.value(x)));
}

/// Brute-force cross-correlation with the same fixed summation order
/// (innermost over kernel index, then input channel), written independently.
fn conv_oracle(x: &Array, w: &Array, b: &Array, stride: usize, padding: usize) -> Array {
    let (c_in, l) = (x.shape()[0], x.shape()[1]);
    let (c_out, k) = (w.shape()[0], w.shape()[2]);
    let l_out = (l + 2 * padding - k) / stride + 1;
    let mut out = vec![0.0f32; c_out * l_out];
    for o in 0..c_out {
        for j in 0..l_out {
            let mut acc = b.data()[o];
            for c in 0..c_in {
                for i in 0..k {
                    let pos = (j * stride + i) as isize - padding as isize;
                    if pos >= 0 && (pos as usize) < l {
                        acc += x.at2(c, pos as usize) * w.data()[(o * c_in + c) * k + i];
                    }
                }
            }
            out[o * l_out + j] = acc;
        }
    }
    Array::from_vec(vec![c_out, l_out], out)
}

#[test]
fn conv1d_matches_nested_loop_oracle_exactly() {
    let mut r = rng(11);
    for (cin, cout, k, l, stride, padding) in
        [(2, 3, 2, 4, 1, 0), (3, 2, 3, 5, 1, 1), (1, 4, 2, 6, 2, 1), (4, 1, 1, 3, 1, 0)]
    {
        let x = Array::randn(&[cin, l], &mut r);
        let w = Array::randn(&[cout, cin, k], &mut r);
        let b = Array::randn(&[cout], &mut r);
        let mut g = Graph::new();
        let (xi, wi, bi) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
        let y = g.conv1d(xi, wi, bi, stride, padding).unwrap();
        let oracle = conv_oracle(&x, &w, &b, stride, padding);
        assert!(g.value(y).bit_eq(&oracle), "conv deviates from oracle");
    }
}

#[test]
fn conv1d_rejects_bad_shapes() {
    let mut g = Graph::new();
    let x = g.input(Array::zeros(&[2, 3]));
    let w = g.input(Array::zeros(&[1, 3, 2])); // kernel C_in mismatch
    let b = g.input(Array::zeros(&[1]));
    let err = g.conv1d(x, w, b, 1, 0).unwrap_err();
    assert!(err.to_string().contains("C_in"), "{err}");

    let mut g = Graph::new();
    let x = g.input(Array::zeros(&[1, 2]));
    let w = g.input(Array::zeros(&[1, 1, 4])); // kernel longer than padded input
    let b = g.input(Array::zeros(&[1]));
    assert!(g.conv1d(x, w, b, 1, 0).is_err());
}

#[test]
fn activations_at_origin() {
    let mut g = Graph::new();
    let x = g.input(Array::from_vec(vec![3], vec![0.0, 1.0, -1.0]));
    let m = g.mish(x);
    let s = g.silu(x);
    assert_eq!(g.value(m).data()[0], 0.0);
    assert_eq!(g.value(s).data()[0], 0.0);
    // mish(1) = tanh(softplus(1)) and silu(1) = sigmoid(1), scaled by x=1.
    assert!((g.value(m).data()[1] - 0.865098).abs() < 1e-5);
    assert!((g.value(s).data()[1] - 0.731059).abs() < 1e-5);
}

#[test]
fn layer_norm_of_constant_vector_is_zero() {
    let mut g = Graph::new();
    let x = g.input(Array::fill(&[5, 1], 3.25));
    let y = g.layer_norm_cols(x, 1e-5);
    for &v in g.value(y).data() {
        assert!(v.abs() < 1e-5);
    }
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = Graph::new();
    let x = g.input(Array::zeros(&[3]));
    let y = g.softmax_last(x);
    for &v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-7);
    }
}

#[test]
fn group_norm_requires_divisible_groups() {
    let mut g = Graph::new();
    let x = g.input(Array::zeros(&[6, 2]));
    assert!(g.group_norm(x, 4, 1e-5).is_err());
    let x2 = g.input(Array::zeros(&[6, 2]));
    assert!(g.group_norm(x2, 3, 1e-5).is_ok());
}

#[test]
fn sum_loss_gradient_is_all_ones() {
    let mut store = ParamStore::new();
    store.insert("p", Array::from_vec(vec![4], vec![0.3, -1.0, 2.0, 5.0]));
    let mut g = Graph::new();
    let p = g.param("p", &store);
    let flat = g.reshape(p, vec![1, 4]);
    let ones = g.input(Array::fill(&[4, 1], 1.0));
    let s = g.matmul(flat, ones);
    let s = g.reshape(s, vec![1]);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get("p").unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
}

#[test]
fn mse_gradient_matches_closed_form() {
    let mut store = ParamStore::new();
    let p = vec![1.0f32, 2.0, 3.0];
    let t = vec![1.5f32, 0.0, 3.0];
    store.insert("p", Array::from_vec(vec![3], p.clone()));
    let mut g = Graph::new();
    let pn = g.param("p", &store);
    let tn = g.input(Array::from_vec(vec![3], t.clone()));
    let diff = g.sub(pn, tn);
    let loss = g.mean_squares(diff);
    let grads = g.backward(loss).unwrap();
    let got = grads.get("p").unwrap().data();
    for i in 0..3 {
        let expect = 2.0 * (p[i] - t[i]) / 3.0;
        assert!((got[i] - expect).abs() < 1e-6);
    }
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::new();
    let x = g.input(Array::zeros(&[2, 2]));
    assert!(g.backward(x).is_err());
}

#[test]
fn unreached_parameter_gets_zero_gradient() {
    let mut store = ParamStore::new();
    store.insert("used", Array::from_vec(vec![2], vec![1.0, 2.0]));
    store.insert("unused", Array::from_vec(vec![2], vec![3.0, 4.0]));
    let mut g = Graph::new();
    let u = g.param("used", &store);
    let _orphan = g.param("unused", &store);
    let loss = g.sum_squares(u);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get("unused").unwrap().data(), &[0.0, 0.0]);
    assert_eq!(grads.get("used").unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn backward_is_bit_deterministic() {
    let run = || -> Vec<u32> {
        let mut r = rng(303);
        let mut store = ParamStore::new();
        store.insert("w", Array::randn(&[4, 4, 2], &mut r));
        store.insert("b", Array::randn(&[4], &mut r));
        let x = Array::randn(&[4, 5], &mut r);
        let mut g = Graph::new();
        let xi = g.input(x);
        let w = g.param("w", &store);
        let b = g.param("b", &store);
        let y = g.conv1d(xi, w, b, 1, 0).unwrap();
        let y = g.group_norm(y, 2, 1e-5).unwrap();
        let y = g.mish(y);
        let loss = g.sum_squares(y);
        let grads = g.backward(loss).unwrap();
        grads
            .get("w")
            .unwrap()
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect()
    };
    assert_eq!(run(), run());
}

// ── Directional finite-difference checks, one per registered op ──

#[test]
fn fd_conv1d() {
    let mut r = rng(1);
    let mut store = ParamStore::new();
    store.insert("x", Array::randn(&[3, 5], &mut r));
    store.insert("w", Array::randn(&[2, 3, 2], &mut r));
    store.insert("b", Array::randn(&[2], &mut r));
    fd_check(
        store,
        |g, p| {
            let x = g.param("x", p);
            let w = g.param("w", p);
            let b = g.param("b", p);
            g.conv1d(x, w, b, 1, 1).unwrap()
        },
        1,
    );
}

#[test]
fn fd_conv1d_transpose() {
    let mut r = rng(2);
    let mut store = ParamStore::new();
    store.insert("x", Array::randn(&[3, 4], &mut r));
    store.insert("w", Array::randn(&[3, 2, 2], &mut r));
    store.insert("b", Array::randn(&[2], &mut r));
    fd_check(
        store,
        |g, p| {
            let x = g.param("x", p);
            let w = g.param("w", p);
            let b = g.param("b", p);
            g.conv1d_transpose(x, w, b).unwrap()
        },
        2,
    );
}

#[test]
fn fd_norms_and_activations() {
    let mut r = rng(3);
    let mut store = ParamStore::new();
    store.insert("x", Array::randn(&[4, 6], &mut r));
    fd_check(
        store.clone(),
        |g, p| {
            let x = g.param("x", p);
            let y = g.group_norm(x, 2, 1e-5).unwrap();
            g.mish(y)
        },
        3,
    );
    fd_check(
        store.clone(),
        |g, p| {
            let x = g.param("x", p);
            let y = g.layer_norm_cols(x, 1e-5);
            g.silu(y)
        },
        4,
    );
    fd_check(
        store,
        |g, p| {
            let x = g.param("x", p);
            g.softmax_last(x)
        },
        5,
    );
}

#[test]
fn fd_matmul_transpose_concat_slice() {
    let mut r = rng(6);
    let mut store = ParamStore::new();
    store.insert("a", Array::randn(&[3, 4], &mut r));
    store.insert("b", Array::randn(&[4, 2], &mut r));
    fd_check(
        store,
        |g, p| {
            let a = g.param("a", p);
            let b = g.param("b", p);
            let m = g.matmul(a, b);
            let t = g.transpose(m);
            let s = g.slice0(t, 0, 1);
            let c = g.concat0(&[s, s]);
            g.mish(c)
        },
        6,
    );
}

#[test]
fn fd_broadcast_and_scale_ops() {
    let mut r = rng(7);
    let mut store = ParamStore::new();
    store.insert("x", Array::randn(&[3, 4], &mut r));
    store.insert("v", Array::randn(&[3], &mut r));
    store.insert("s", Array::randn(&[1], &mut r));
    fd_check(
        store,
        |g, p| {
            let x = g.param("x", p);
            let v = g.param("v", p);
            let s = g.param("s", p);
            let y = g.add_rowvec(x, v);
            let y = g.mul_rowvec(y, v);
            let y = g.scale_by(y, s);
            g.silu(y)
        },
        7,
    );
}

#[test]
fn fd_elementwise_and_reductions() {
    let mut r = rng(8);
    let mut store = ParamStore::new();
    store.insert("a", Array::randn(&[2, 3], &mut r));
    store.insert("b", Array::randn(&[2, 3], &mut r));
    fd_check(
        store,
        |g, p| {
            let a = g.param("a", p);
            let b = g.param("b", p);
            let s = g.sub(a, b);
            let m = g.mul(s, a);
            let m = g.mul_scalar(m, 0.7);
            let add = g.add(m, b);
            let ss = g.sum_squares(add);
            g.reshape(ss, vec![1, 1])
        },
        8,
    );
}

#[test]
fn fd_projection_and_cross_entropy() {
    let mut r = rng(9);
    let mut store = ParamStore::new();
    store.insert("x", Array::randn(&[4, 3], &mut r));
    store.insert("logits", Array::randn(&[5], &mut r));
    let keep_data: Vec<f32> = (0..12).map(|i| if i % 3 == 0 { 0.0 } else { 1.0 }).collect();
    let keep = Array::from_vec(vec![4, 3], keep_data);
    let add_data: Vec<f32> = (0..12).map(|i| if i % 3 == 0 { 0.5 } else { 0.0 }).collect();
    let add = Array::from_vec(vec![4, 3], add_data);
    fd_check(
        store,
        move |g, p| {
            let x = g.param("x", p);
            let y = g.project(x, &keep, &add);
            let logits = g.param("logits", p);
            let ce = g.cross_entropy_logits(logits, 2);
            let ys = g.sum_squares(y);
            g.add(ys, ce)
        },
        9,
    );
}

#[test]
fn fd_composed_residual_block_shape() {
    // A conv-norm-act-conv residual composition, the building block the
    // denoisers are made of.
    let mut r = rng(10);
    let mut store = ParamStore::new();
    store.insert("w1", Array::randn(&[4, 3, 3], &mut r));
    store.insert("b1", Array::randn(&[4], &mut r));
    store.insert("w2", Array::randn(&[3, 4, 3], &mut r));
    store.insert("b2", Array::randn(&[3], &mut r));
    store.insert("x", Array::randn(&[3, 5], &mut r));
    fd_check(
        store,
        |g, p| {
            let x = g.param("x", p);
            let w1 = g.param("w1", p);
            let b1 = g.param("b1", p);
            let h = g.conv1d(x, w1, b1, 1, 1).unwrap();
            let h = g.group_norm(h, 2, 1e-5).unwrap();
            let h = g.mish(h);
            let w2 = g.param("w2", p);
            let b2 = g.param("b2", p);
            let h = g.conv1d(h, w2, b2, 1, 1).unwrap();
            g.add(h, x)
        },
        10,
    );
}

#[test]
fn parameter_used_twice_accumulates_gradient() {
    let mut store = ParamStore::new();
    store.insert("p", Array::from_vec(vec![2], vec![1.0, 2.0]));
    let mut g = Graph::new();
    let p1 = g.param("p", &store);
    let p2 = g.param("p", &store);
    let s = g.add(p1, p2);
    let loss = g.sum_squares(s);
    let grads = g.backward(loss).unwrap();
    // loss = sum((2p)^2) -> d/dp = 8p.
    assert_eq!(grads.get("p").unwrap().data(), &[8.0, 16.0]);
}

#[test]
fn gradients_accumulate_across_graphs() {
    let mut store = ParamStore::new();
    store.insert("p", Array::from_vec(vec![2], vec![1.0, 1.0]));
    let build = |store: &ParamStore| -> Gradients {
        let mut g = Graph::new();
        let p = g.param("p", store);
        let loss = g.sum_squares(p);
        g.backward(loss).unwrap()
    };
    let mut acc = build(&store);
    acc.accumulate(build(&store));
    assert_eq!(acc.get("p").unwrap().data(), &[4.0, 4.0]);
}
