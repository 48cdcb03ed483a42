//! Bias-corrected ADAM.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::array::Array;
use crate::numerics::graph::Gradients;
use crate::numerics::params::ParamStore;

pub const DEFAULT_BETA1: f32 = 0.9;
pub const DEFAULT_BETA2: f32 = 0.999;
pub const DEFAULT_EPS: f32 = 1e-8;

/// Per-parameter first/second moments plus the shared step counter.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub step: u64,
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }

    pub fn moments(&self, name: &str) -> Option<(&[f32], &[f32])> {
        self.moments.get(name).map(|(m, v)| (&m[..], &v[..]))
    }
}

/// One ADAM update. Only parameters present in `grads` are touched: a
/// parameter that never entered the graph keeps its value and moments, which
/// is what keeps unrouted mixture experts frozen.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let Some(g) = grads.get(&name) else { continue };
        if !g.all_finite() {
            return Err(Error::NonFinite {
                what: "gradient",
                name,
            });
        }
        let value = params.get(&name).unwrap();
        assert_eq!(g.shape(), value.shape(), "gradient shape for `{name}`");
        let n = value.numel();
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        let gd = g.data();
        let mut out = value.data().to_vec();
        for i in 0..n {
            m[i] = beta1 * m[i] + (1.0 - beta1) * gd[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * gd[i] * gd[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            out[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        params.set(&name, Array::from_vec(value.shape().to_vec(), out));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::graph::Graph;

    #[test]
    fn fresh_step_matches_hand_formula() {
        // One step from fresh state: delta = -lr * g / (|g| + eps).
        let mut store = ParamStore::new();
        store.insert("p", Array::from_vec(vec![3], vec![1.0, -2.0, 0.5]));
        let mut state = AdamState::new();
        let g = vec![0.3f32, -0.7, 0.0];

        let mut grads = Gradients::default();
        grads_manual(&mut grads, "p", vec![3], g.clone());

        let lr = 1e-2;
        adam_step(
            &mut store,
            &grads,
            &mut state,
            lr,
            DEFAULT_BETA1,
            DEFAULT_BETA2,
            DEFAULT_EPS,
        )
        .unwrap();
        let p = store.get("p").unwrap().data();
        let expected = [
            1.0 - lr * 0.3 / (0.3 + DEFAULT_EPS),
            -2.0 - lr * (-0.7) / (0.7 + DEFAULT_EPS),
            0.5, // zero gradient leaves the value unchanged from fresh state
        ];
        for (a, b) in p.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut store = ParamStore::new();
        store.insert("p", Array::from_vec(vec![1], vec![5.0]));
        let mut state = AdamState::new();

        // From a fresh state a zero gradient changes nothing.
        let mut zero = Gradients::default();
        grads_manual(&mut zero, "p", vec![1], vec![0.0]);
        adam_step(&mut store, &zero, &mut state, 0.1, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(store.get("p").unwrap().data()[0], 5.0);

        // With accumulated moments, a zero gradient decays them by beta.
        let mut grads = Gradients::default();
        grads_manual(&mut grads, "p", vec![1], vec![1.0]);
        adam_step(&mut store, &grads, &mut state, 0.1, 0.9, 0.999, 1e-8).unwrap();
        let m1 = state.moments("p").unwrap().0[0];
        let mut zero2 = Gradients::default();
        grads_manual(&mut zero2, "p", vec![1], vec![0.0]);
        adam_step(&mut store, &zero2, &mut state, 0.1, 0.9, 0.999, 1e-8).unwrap();
        let m2 = state.moments("p").unwrap().0[0];
        assert!((m2 - 0.9 * m1).abs() < 1e-7, "first moment decays");
    }

    #[test]
    fn constant_gradient_approaches_sign_times_lr() {
        // After many steps with constant g, |delta| -> lr (within 1%).
        let mut store = ParamStore::new();
        store.insert("p", Array::from_vec(vec![1], vec![0.0]));
        let mut state = AdamState::new();
        let lr = 1e-3;
        let mut prev = 0.0f32;
        let mut delta = 0.0f32;
        for _ in 0..10_000 {
            let mut grads = Gradients::default();
            grads_manual(&mut grads, "p", vec![1], vec![2.5]);
            adam_step(&mut store, &grads, &mut state, lr, 0.9, 0.999, 1e-8).unwrap();
            let cur = store.get("p").unwrap().data()[0];
            delta = cur - prev;
            prev = cur;
        }
        assert!(
            (delta.abs() - lr).abs() / lr < 0.01,
            "terminal step size {delta} vs lr {lr}"
        );
        assert!(delta < 0.0, "moves against positive gradient");
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut store = ParamStore::new();
        store.insert("w.conv", Array::from_vec(vec![1], vec![0.0]));
        let mut state = AdamState::new();
        let mut grads = Gradients::default();
        grads_manual(&mut grads, "w.conv", vec![1], vec![f32::NAN]);
        let err = adam_step(&mut store, &grads, &mut state, 0.1, 0.9, 0.999, 1e-8).unwrap_err();
        assert!(err.to_string().contains("w.conv"));
    }

    /// Build a Gradients carrying exactly `g` for `name` via the public
    /// accumulate path.
    fn grads_manual(grads: &mut Gradients, name: &str, shape: Vec<usize>, g: Vec<f32>) {
        let mut store = ParamStore::new();
        store.insert(name, Array::zeros(&shape));
        let mut graph = Graph::new();
        let p = graph.param(name, &store);
        let c = graph.input(Array::from_vec(shape, g));
        let prod = graph.mul(p, c); // d(sum prod)/dp = c
        // Reduce to scalar with a linear op: mul by ones then sum via
        // sum_squares of sqrt is wrong; instead use repeated add of slices.
        // Simpler: loss = sum over elements implemented as matmul with ones.
        let n = graph.value(prod).numel();
        let flat = graph.reshape(prod, vec![1, n]);
        let ones = graph.input(Array::fill(&[n, 1], 1.0));
        let s = graph.matmul(flat, ones);
        let s = graph.reshape(s, vec![1]);
        let got = graph.backward(s).unwrap();
        grads.accumulate(got);
    }
}
