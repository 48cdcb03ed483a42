//! Condition-annotated plan tensors.
//!
//! A plan tensor is a [rows, T] array whose columns each carry
//! [h-block; c-block; a-block; o-block]: a horizon one-hot, a task one-hot,
//! action logits over the global action vocabulary, and observation features.
//! The o-block is zero everywhere except position 1 (start observation) and
//! position T (goal observation). Blocks whose conditioning mode is off are
//! omitted entirely; the layout descriptor is shared across the whole system
//! and serialized into checkpoints.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::numerics::array::Array;
use crate::numerics::graph::{Graph, NodeId};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskMode {
    None,
    Concat,
    Mask,
}

impl TaskMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskMode::None => "none",
            TaskMode::Concat => "concat",
            TaskMode::Mask => "mask",
        }
    }

    pub fn parse(s: &str) -> Result<TaskMode> {
        match s {
            "none" => Ok(TaskMode::None),
            "concat" => Ok(TaskMode::Concat),
            "mask" => Ok(TaskMode::Mask),
            other => Err(Error::UnknownName {
                kind: "task conditioning mode",
                name: other.to_string(),
                known: "none, concat, mask".to_string(),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HorizonMode {
    /// No h-block (single-horizon models and MoE routing).
    None,
    /// Horizon one-hot duplicated per column.
    Concat,
}

impl HorizonMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            HorizonMode::None => "none",
            HorizonMode::Concat => "concat",
        }
    }

    pub fn parse(s: &str) -> Result<HorizonMode> {
        match s {
            "none" => Ok(HorizonMode::None),
            "concat" => Ok(HorizonMode::Concat),
            other => Err(Error::UnknownName {
                kind: "horizon conditioning mode",
                name: other.to_string(),
                known: "none, concat".to_string(),
            }),
        }
    }
}

/// Block sizes and order for plan tensors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub horizons: Vec<usize>,
    pub horizon_mode: HorizonMode,
    pub task_mode: TaskMode,
    pub n_tasks: usize,
    pub n_actions: usize,
    pub obs_dim: usize,
}

impl Layout {
    pub fn new(
        horizons: Vec<usize>,
        horizon_mode: HorizonMode,
        task_mode: TaskMode,
        n_tasks: usize,
        n_actions: usize,
        obs_dim: usize,
    ) -> Result<Layout> {
        if horizons.is_empty() {
            return Err(Error::invalid("layout", "horizons must be non-empty"));
        }
        let mut sorted = horizons.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != horizons.len() || sorted != horizons {
            return Err(Error::invalid(
                "layout",
                "horizons must be sorted and distinct",
            ));
        }
        if horizons.iter().any(|&t| t < 2) {
            return Err(Error::invalid("layout", "every horizon must be >= 2"));
        }
        if n_actions == 0 || obs_dim == 0 {
            return Err(Error::invalid("layout", "n_actions and obs_dim must be > 0"));
        }
        Ok(Layout {
            horizons,
            horizon_mode,
            task_mode,
            n_tasks,
            n_actions,
            obs_dim,
        })
    }

    pub fn d_h(&self) -> usize {
        match self.horizon_mode {
            HorizonMode::None => 0,
            HorizonMode::Concat => self.horizons.len(),
        }
    }

    pub fn d_c(&self) -> usize {
        match self.task_mode {
            TaskMode::Concat => self.n_tasks,
            _ => 0,
        }
    }

    pub fn rows(&self) -> usize {
        self.d_h() + self.d_c() + self.n_actions + self.obs_dim
    }

    pub fn h_rows(&self) -> std::ops::Range<usize> {
        0..self.d_h()
    }

    pub fn c_rows(&self) -> std::ops::Range<usize> {
        self.d_h()..self.d_h() + self.d_c()
    }

    pub fn a_rows(&self) -> std::ops::Range<usize> {
        let off = self.d_h() + self.d_c();
        off..off + self.n_actions
    }

    pub fn o_rows(&self) -> std::ops::Range<usize> {
        let off = self.d_h() + self.d_c() + self.n_actions;
        off..off + self.obs_dim
    }

    pub fn horizon_index(&self, horizon: usize) -> Result<usize> {
        self.horizons
            .iter()
            .position(|&t| t == horizon)
            .ok_or_else(|| {
                Error::invalid(
                    "layout",
                    format!("horizon {horizon} outside supported set {:?}", self.horizons),
                )
            })
    }
}

/// Per-task action id sets; sets may overlap across tasks.
#[derive(Clone, Debug, Default)]
pub struct TaskActionMap {
    sets: Vec<BTreeSet<usize>>,
}

impl TaskActionMap {
    pub fn new(sets: Vec<BTreeSet<usize>>, n_actions: usize) -> Result<TaskActionMap> {
        for (task, set) in sets.iter().enumerate() {
            if let Some(&bad) = set.iter().find(|&&a| a >= n_actions) {
                return Err(Error::invalid(
                    "task_action_map",
                    format!("task {task} action id {bad} >= vocabulary size {n_actions}"),
                ));
            }
        }
        Ok(TaskActionMap { sets })
    }

    pub fn n_tasks(&self) -> usize {
        self.sets.len()
    }

    pub fn actions(&self, task: usize) -> &BTreeSet<usize> {
        &self.sets[task]
    }

    /// 0/1 mask over the action vocabulary for one task.
    pub fn mask_vec(&self, task: usize, n_actions: usize) -> Vec<f32> {
        let mut m = vec![0.0; n_actions];
        for &a in &self.sets[task] {
            m[a] = 1.0;
        }
        m
    }
}

/// Everything held fixed by projection: observations, task, horizon, and the
/// optional endpoint actions of two-stage interior prediction. A `task` of
/// `None` is the unconditional variant used by condition dropout and
/// classifier-free guidance.
#[derive(Clone, Debug)]
pub struct ConditionSet {
    pub start_obs: Vec<f32>,
    pub goal_obs: Vec<f32>,
    pub task: Option<usize>,
    pub horizon: usize,
    pub endpoint_actions: Option<(usize, usize)>,
}

impl ConditionSet {
    pub fn new(start_obs: Vec<f32>, goal_obs: Vec<f32>, task: Option<usize>, horizon: usize) -> Self {
        ConditionSet {
            start_obs,
            goal_obs,
            task,
            horizon,
            endpoint_actions: None,
        }
    }

    /// The unconditional variant: observations, task, and endpoint actions
    /// zeroed; horizon retained since it fixes the tensor shape.
    pub fn unconditional(&self) -> ConditionSet {
        ConditionSet {
            start_obs: vec![0.0; self.start_obs.len()],
            goal_obs: vec![0.0; self.goal_obs.len()],
            task: None,
            horizon: self.horizon,
            endpoint_actions: None,
        }
    }

    /// VPA form: goal observation zeroed (the task label carries the goal).
    pub fn with_zero_goal(mut self) -> ConditionSet {
        self.goal_obs = vec![0.0; self.goal_obs.len()];
        self
    }
}

/// Build the condition-annotated input tensor. `actions[i]` is the one-hot
/// action id for position i+1, or `None` for a zero action row (inference
/// start).
pub fn assemble_input(
    actions: &[Option<usize>],
    cond: &ConditionSet,
    layout: &Layout,
) -> Result<Array> {
    let t = cond.horizon;
    if actions.len() != t {
        return Err(Error::Shape {
            op: "assemble_input",
            dim: "actions length",
            got: actions.len(),
            expected: t,
        });
    }
    if cond.start_obs.len() != layout.obs_dim || cond.goal_obs.len() != layout.obs_dim {
        return Err(Error::Shape {
            op: "assemble_input",
            dim: "observation dim",
            got: cond.start_obs.len(),
            expected: layout.obs_dim,
        });
    }
    let h_idx = layout.horizon_index(t)?;
    let rows = layout.rows();
    let mut data = vec![0.0f32; rows * t];
    let mut set = |r: usize, c: usize, v: f32| {
        data[r * t + c] = v;
    };

    for col in 0..t {
        if layout.horizon_mode == HorizonMode::Concat {
            set(layout.h_rows().start + h_idx, col, 1.0);
        }
        if layout.task_mode == TaskMode::Concat {
            if let Some(task) = cond.task {
                if task >= layout.n_tasks {
                    return Err(Error::invalid(
                        "assemble_input",
                        format!("task id {task} >= {}", layout.n_tasks),
                    ));
                }
                set(layout.c_rows().start + task, col, 1.0);
            }
        }
        if let Some(a) = actions[col] {
            if a >= layout.n_actions {
                return Err(Error::invalid(
                    "assemble_input",
                    format!("action id {a} >= {}", layout.n_actions),
                ));
            }
            set(layout.a_rows().start + a, col, 1.0);
        }
    }
    for (i, &v) in cond.start_obs.iter().enumerate() {
        set(layout.o_rows().start + i, 0, v);
    }
    for (i, &v) in cond.goal_obs.iter().enumerate() {
        set(layout.o_rows().start + i, t - 1, v);
    }
    Ok(Array::from_vec(vec![rows, t], data))
}

/// The projection operator for one condition set: `proj(x) = x .* keep + add`
/// with constant 0/1 `keep` and condition values `add`. Idempotent by
/// construction and differentiable through the kept entries.
#[derive(Clone, Debug)]
pub struct Projector {
    keep: Array,
    add: Array,
}

impl Projector {
    pub fn new(
        cond: &ConditionSet,
        layout: &Layout,
        task_map: Option<&TaskActionMap>,
    ) -> Result<Projector> {
        let t = cond.horizon;
        let h_idx = layout.horizon_index(t)?;
        if layout.task_mode == TaskMode::Mask && cond.task.is_some() && task_map.is_none() {
            return Err(Error::invalid(
                "projector",
                "task-mask mode requires a TaskActionMap",
            ));
        }
        let rows = layout.rows();
        let mut keep = vec![1.0f32; rows * t];
        let mut add = vec![0.0f32; rows * t];
        fn fix(keep: &mut [f32], add: &mut [f32], t: usize, r: usize, c: usize, v: f32) {
            keep[r * t + c] = 0.0;
            add[r * t + c] = v;
        }

        for col in 0..t {
            for r in layout.h_rows() {
                let v = if r - layout.h_rows().start == h_idx { 1.0 } else { 0.0 };
                fix(&mut keep, &mut add, t, r, col, v);
            }
            for r in layout.c_rows() {
                let v = match cond.task {
                    Some(task) if r - layout.c_rows().start == task => 1.0,
                    _ => 0.0,
                };
                fix(&mut keep, &mut add, t, r, col, v);
            }
            for r in layout.o_rows() {
                let i = r - layout.o_rows().start;
                let v = if col == 0 {
                    cond.start_obs[i]
                } else if col == t - 1 {
                    cond.goal_obs[i]
                } else {
                    0.0
                };
                fix(&mut keep, &mut add, t, r, col, v);
            }
        }

        // Task mask: a-block of every column multiplied by the 0/1 action
        // mask. An unconditional (dropped) sample applies no mask.
        if layout.task_mode == TaskMode::Mask {
            if let Some(task) = cond.task {
                let mask = task_map.unwrap().mask_vec(task, layout.n_actions);
                for col in 0..t {
                    for (i, r) in layout.a_rows().enumerate() {
                        if mask[i] == 0.0 {
                            keep[r * t + col] = 0.0;
                        }
                    }
                }
            }
        }

        // Two-stage interior mode: endpoint action rows overwritten.
        if let Some((a1, a_t)) = cond.endpoint_actions {
            for (a, col) in [(a1, 0usize), (a_t, t - 1)] {
                if a >= layout.n_actions {
                    return Err(Error::invalid(
                        "projector",
                        format!("endpoint action id {a} >= {}", layout.n_actions),
                    ));
                }
                for (i, r) in layout.a_rows().enumerate() {
                    fix(&mut keep, &mut add, t, r, col, if i == a { 1.0 } else { 0.0 });
                }
            }
        }

        Ok(Projector {
            keep: Array::from_vec(vec![rows, t], keep),
            add: Array::from_vec(vec![rows, t], add),
        })
    }

    pub fn apply(&self, x: &Array) -> Array {
        assert_eq!(x.shape(), self.keep.shape(), "projector shape");
        let data = x
            .data()
            .iter()
            .zip(self.keep.data())
            .zip(self.add.data())
            .map(|((xv, kv), av)| xv * kv + av)
            .collect();
        Array::from_vec(x.shape().to_vec(), data)
    }

    pub fn apply_graph(&self, g: &mut Graph, x: NodeId) -> NodeId {
        g.project(x, &self.keep, &self.add)
    }

    /// Are all overwritten entries of `x` bit-exactly equal to their
    /// condition values? True for any projected tensor; asserted by the
    /// samplers at every iteration.
    pub fn condition_rows_match(&self, x: &Array) -> bool {
        if x.shape() != self.keep.shape() {
            return false;
        }
        for i in 0..x.numel() {
            if self.keep.data()[i] == 0.0 {
                let expect = self.add.data()[i];
                // A projected entry is x*0 + add, so compare against that
                // exact value (including +0.0 for zeroed entries).
                if x.data()[i].to_bits() != (0.0f32 * x.data()[i] + expect).to_bits()
                    && x.data()[i].to_bits() != expect.to_bits()
                {
                    return false;
                }
            }
        }
        true
    }
}

/// Argmax over the a-block of each column; ties break to the lowest index.
pub fn extract_plan(x0_hat: &Array, layout: &Layout, t: usize) -> Vec<usize> {
    let a_rows = layout.a_rows();
    let mut plan = Vec::with_capacity(t);
    for col in 0..t {
        let mut best = 0usize;
        let mut best_v = f32::NEG_INFINITY;
        for (i, r) in a_rows.clone().enumerate() {
            let v = x0_hat.at2(r, col);
            if v > best_v {
                best_v = v;
                best = i;
            }
        }
        plan.push(best);
    }
    plan
}

/// Task-mask extraction: argmax over the surviving nonzero coordinates of
/// the task's action set; a degenerate all-zero column falls back to the
/// global argmax of the unmasked logits.
pub fn extract_plan_masked(
    x0_hat: &Array,
    layout: &Layout,
    t: usize,
    task_set: &BTreeSet<usize>,
) -> Vec<usize> {
    let a_rows = layout.a_rows();
    let mut plan = Vec::with_capacity(t);
    for col in 0..t {
        let mut best: Option<(usize, f32)> = None;
        for &a in task_set {
            let v = x0_hat.at2(a_rows.start + a, col);
            if v != 0.0 {
                match best {
                    Some((_, bv)) if v <= bv => {}
                    _ => best = Some((a, v)),
                }
            }
        }
        match best {
            Some((a, _)) => plan.push(a),
            None => {
                // all surviving logits are exactly zero
                let mut gbest = 0usize;
                let mut gv = f32::NEG_INFINITY;
                for (i, r) in a_rows.clone().enumerate() {
                    let v = x0_hat.at2(r, col);
                    if v > gv {
                        gv = v;
                        gbest = i;
                    }
                }
                plan.push(gbest);
            }
        }
    }
    plan
}

/// Recover the condition fields of an assembled tensor (layout inverse).
pub fn extract_condition(x: &Array, layout: &Layout) -> (Option<usize>, Option<usize>, Vec<f32>, Vec<f32>) {
    let t = x.shape()[1];
    let h = layout
        .h_rows()
        .enumerate()
        .find(|&(_, r)| x.at2(r, 0) == 1.0)
        .map(|(i, _)| layout.horizons[i]);
    let c = layout
        .c_rows()
        .enumerate()
        .find(|&(_, r)| x.at2(r, 0) == 1.0)
        .map(|(i, _)| i);
    let o_s: Vec<f32> = layout.o_rows().map(|r| x.at2(r, 0)).collect();
    let o_g: Vec<f32> = layout.o_rows().map(|r| x.at2(r, t - 1)).collect();
    (h, c, o_s, o_g)
}


#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn projection_idempotent_on_random_tensors(seed in 0u64..1000) {
            use rand::SeedableRng;
            let l = Layout::new(vec![3], HorizonMode::Concat, TaskMode::Concat, 3, 4, 2).unwrap();
            let c = ConditionSet::new(vec![1.0, -1.0], vec![2.0, 0.5], Some(2), 3);
            let p = Projector::new(&c, &l, None).unwrap();
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
            let x = Array::randn(&[l.rows(), 3], &mut rng);
            let once = p.apply(&x);
            prop_assert!(once.bit_eq(&p.apply(&once)));
            prop_assert!(p.condition_rows_match(&once));
        }

        #[test]
        fn extraction_invariant_under_increasing_transforms(
            logits in proptest::collection::vec(-10.0f32..10.0, 8),
            a in 0.1f32..4.0,
            b in -3.0f32..3.0,
        ) {
            let l = Layout::new(vec![2], HorizonMode::None, TaskMode::None, 0, 4, 1).unwrap();
            let mut data = logits.clone();
            data.extend_from_slice(&[0.0, 0.0]); // obs row
            let x = Array::from_vec(vec![5, 2], data);
            let mut data2: Vec<f32> = logits.iter().map(|v| a * v + b).collect();
            data2.extend_from_slice(&[0.0, 0.0]);
            let y = Array::from_vec(vec![5, 2], data2);
            prop_assert_eq!(extract_plan(&x, &l, 2), extract_plan(&y, &l, 2));
        }
    }
}
