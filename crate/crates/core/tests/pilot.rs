//! Manual performance probe (`cargo test -p proplan-core --test pilot --
//! --ignored --nocapture`); not part of the regular suite.

use std::collections::BTreeMap;

use proplan_core::conditioning::{HorizonMode, Layout, TaskMode};
use proplan_core::data::PlanRecord;
use proplan_core::denoiser::{DenoiserModel, ModelDims};
use proplan_core::numerics::Graph;
use proplan_core::schedule::cosine_schedule;
use proplan_core::training::{joint_train, prepare_item, TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

#[test]
#[ignore]
fn pilot_step_breakdown() {
    let layout = Layout::new(vec![3], HorizonMode::Concat, TaskMode::Concat, 3, 12, 16).unwrap();
    let model =
        DenoiserModel::new("unet3", layout.clone(), ModelDims::desk_unet3(), None, 0).unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let x = proplan_core::numerics::Array::randn(&[layout.rows(), 3], &mut rng);

    let reps = 200;
    let t0 = std::time::Instant::now();
    for _ in 0..reps {
        let _ = model.denoise(&x, 5).unwrap();
    }
    println!(
        "forward: {:.3} ms",
        t0.elapsed().as_secs_f64() * 1000.0 / reps as f64
    );

    let t0 = std::time::Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let out = model.forward(&mut g, xi, 5).unwrap();
        let loss = g.sum_squares(out);
        let _ = g.backward(loss).unwrap();
    }
    println!(
        "forward+backward: {:.3} ms",
        t0.elapsed().as_secs_f64() * 1000.0 / reps as f64
    );

    let record = PlanRecord {
        task: 0,
        actions: vec![0, 1, 2],
        start_obs: vec![0.1; 16],
        goal_obs: vec![0.2; 16],
    };
    let items: Vec<_> = (0..32)
        .map(|_| prepare_item(&record, &layout, false).unwrap())
        .collect();
    let cfg = TrainConfig {
        horizons: vec![3],
        diffusion_steps: 50,
        total_steps: 10,
        ..TrainConfig::desk()
    };
    let sched = cosine_schedule(50).unwrap();
    let mut trainer = Trainer::new(model, cfg, sched, None).unwrap();
    let mut datasets = BTreeMap::new();
    datasets.insert(3usize, items);
    let t0 = std::time::Instant::now();
    joint_train(&mut trainer, &datasets, &mut rng).unwrap();
    println!(
        "train step (batch 32): {:.1} ms",
        t0.elapsed().as_secs_f64() * 1000.0 / 10.0
    );
}
