//! First-stage task classifier: an MLP over the concatenated start/goal
//! observations producing task logits. Ground-truth labels supervise
//! training; the classifier's prediction feeds the diffusion condition only
//! at inference.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::data::PlanRecord;
use crate::denoiser::blocks::Linear;
use crate::error::{Error, Result};
use crate::numerics::adam::{adam_step, AdamState, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPS};
use crate::numerics::array::Array;
use crate::numerics::graph::{Gradients, Graph, NodeId};
use crate::numerics::params::ParamStore;
use crate::numerics::{read_checkpoint, write_checkpoint};

pub struct TaskClassifier {
    pub obs_dim: usize,
    pub n_tasks: usize,
    pub params: ParamStore,
    l1: Linear,
    l2: Linear,
    out: Linear,
}

impl TaskClassifier {
    /// Two hidden layers of width 128 with Mish.
    pub fn new(obs_dim: usize, n_tasks: usize, seed: u64) -> TaskClassifier {
        Self::with_hidden(obs_dim, n_tasks, 128, seed)
    }

    pub fn with_hidden(obs_dim: usize, n_tasks: usize, hidden: usize, seed: u64) -> TaskClassifier {
        let mut params = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let l1 = Linear::new(&mut params, &mut rng, "clf.l1", 2 * obs_dim, hidden);
        let l2 = Linear::new(&mut params, &mut rng, "clf.l2", hidden, hidden);
        let out = Linear::new(&mut params, &mut rng, "clf.out", hidden, n_tasks);
        TaskClassifier {
            obs_dim,
            n_tasks,
            params,
            l1,
            l2,
            out,
        }
    }

    fn forward_with(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        start_obs: &[f32],
        goal_obs: &[f32],
    ) -> Result<NodeId> {
        if start_obs.len() != self.obs_dim || goal_obs.len() != self.obs_dim {
            return Err(Error::Shape {
                op: "classify_task",
                dim: "observation dim",
                got: start_obs.len(),
                expected: self.obs_dim,
            });
        }
        let mut input = Vec::with_capacity(2 * self.obs_dim);
        input.extend_from_slice(start_obs);
        input.extend_from_slice(goal_obs);
        let x = g.input(Array::from_vec(vec![2 * self.obs_dim, 1], input));
        let h = self.l1.apply(g, params, x);
        let h = g.mish(h);
        let h = self.l2.apply(g, params, h);
        let h = g.mish(h);
        Ok(self.out.apply(g, params, h))
    }

    /// Logits plus the argmax prediction (lowest index wins ties).
    pub fn classify(&self, start_obs: &[f32], goal_obs: &[f32]) -> Result<(Vec<f32>, usize)> {
        let mut g = Graph::new();
        let logits = self.forward_with(&mut g, &self.params, start_obs, goal_obs)?;
        let v = g.value(logits).data().to_vec();
        let mut best = 0usize;
        let mut best_v = f32::NEG_INFINITY;
        for (i, &x) in v.iter().enumerate() {
            if x > best_v {
                best_v = x;
                best = i;
            }
        }
        Ok((v, best))
    }

    pub fn accuracy(&self, records: &[PlanRecord]) -> Result<f64> {
        if records.is_empty() {
            return Ok(0.0);
        }
        let mut correct = 0usize;
        for r in records {
            let (_, pred) = self.classify(&r.start_obs, &r.goal_obs)?;
            if pred == r.task {
                correct += 1;
            }
        }
        Ok(correct as f64 / records.len() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = BTreeMap::new();
        meta.insert("kind".to_string(), "task_classifier".to_string());
        meta.insert("obs_dim".to_string(), self.obs_dim.to_string());
        meta.insert("n_tasks".to_string(), self.n_tasks.to_string());
        meta.insert("hidden".to_string(), self.l1.out_dim.to_string());
        write_checkpoint(path, &meta, &self.params)
    }

    pub fn load(path: &Path) -> Result<TaskClassifier> {
        let (meta, params) = read_checkpoint(path)?;
        let get = |k: &str| -> Result<usize> {
            meta.get(k)
                .ok_or_else(|| Error::invalid("classifier", format!("missing metadata `{k}`")))?
                .parse::<usize>()
                .map_err(|_| Error::invalid("classifier", format!("bad metadata `{k}`")))
        };
        let mut clf = TaskClassifier::with_hidden(get("obs_dim")?, get("n_tasks")?, get("hidden")?, 0);
        let names: Vec<String> = clf.params.names().cloned().collect();
        for name in names {
            let loaded = params
                .get(&name)
                .ok_or_else(|| Error::invalid("classifier", format!("missing parameter `{name}`")))?;
            clf.params.set(&name, loaded.clone());
        }
        Ok(clf)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ClassifierReport {
    pub final_train_loss: f64,
    pub initial_train_loss: f64,
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
}

/// Mini-batch cross-entropy training with ADAM. Returns final accuracy on the
/// training and held-out splits.
pub fn train_classifier(
    clf: &mut TaskClassifier,
    train: &[PlanRecord],
    heldout: &[PlanRecord],
    epochs: usize,
    lr: f32,
    batch_size: usize,
    seed: u64,
) -> Result<ClassifierReport> {
    if train.is_empty() {
        return Err(Error::invalid("train_classifier", "empty dataset"));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut state = AdamState::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut initial_loss = None;
    let mut last_loss = 0.0f64;
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(batch_size.max(1)) {
            let mut g = Graph::new();
            let mut losses = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let r = &train[i];
                let logits = clf.forward_with(&mut g, &clf.params, &r.start_obs, &r.goal_obs)?;
                let flat = g.reshape(logits, vec![clf.n_tasks]);
                losses.push(g.cross_entropy_logits(flat, r.task));
            }
            let mut total = losses[0];
            for &l in &losses[1..] {
                total = g.add(total, l);
            }
            let loss = g.mul_scalar(total, 1.0 / chunk.len() as f32);
            let grads: Gradients = g.backward(loss)?;
            adam_step(
                &mut clf.params,
                &grads,
                &mut state,
                lr,
                DEFAULT_BETA1,
                DEFAULT_BETA2,
                DEFAULT_EPS,
            )?;
            let loss_v = g.value(loss).item() as f64;
            if initial_loss.is_none() {
                initial_loss = Some(loss_v);
            }
            epoch_loss += loss_v;
            batches += 1;
        }
        last_loss = epoch_loss / batches as f64;
    }
    Ok(ClassifierReport {
        final_train_loss: last_loss,
        initial_train_loss: initial_loss.unwrap_or(0.0),
        train_accuracy: clf.accuracy(train)?,
        heldout_accuracy: clf.accuracy(heldout)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{extract_all_windows, generate_synthetic, split, SyntheticConfig};

    fn datasets(cfg: &SyntheticConfig, t: usize) -> (Vec<PlanRecord>, Vec<PlanRecord>) {
        let world = generate_synthetic(cfg).unwrap();
        let (train_vids, test_vids) = split(&world.videos, 0.7, 11).unwrap();
        let train = extract_all_windows(&train_vids, &[t]).remove(&t).unwrap();
        let test = extract_all_windows(&test_vids, &[t]).remove(&t).unwrap();
        (train, test)
    }

    #[test]
    fn determinism_and_tie_break() {
        let clf = TaskClassifier::with_hidden(4, 3, 16, 2);
        let (l1, p1) = clf.classify(&[0.1, 0.2, 0.3, 0.4], &[0.0, 0.0, 1.0, 1.0]).unwrap();
        let (l2, p2) = clf.classify(&[0.1, 0.2, 0.3, 0.4], &[0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(
            l1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            l2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert!(clf.classify(&[0.0; 3], &[0.0; 4]).is_err());
    }

    #[test]
    fn separable_tasks_reach_high_heldout_accuracy() {
        let cfg = SyntheticConfig {
            videos_per_task: 20,
            obs_noise: 0.05,
            ..SyntheticConfig::toy_deterministic()
        };
        let (train, test) = datasets(&cfg, 3);
        let world_dim = cfg.obs_dim;
        let mut clf = TaskClassifier::with_hidden(world_dim, cfg.n_tasks, 64, 3);
        let report = train_classifier(&mut clf, &train, &test, 12, 2e-3, 32, 3).unwrap();
        assert!(
            report.heldout_accuracy >= 0.95,
            "heldout accuracy {}",
            report.heldout_accuracy
        );
        // nearest-centroid oracle must also separate this data
        let centroid_acc = nearest_centroid_accuracy(&train, &test, cfg.n_tasks);
        assert!(centroid_acc >= 0.95, "oracle accuracy {centroid_acc}");
        assert!(report.final_train_loss < report.initial_train_loss);
    }

    /// Independent oracle: classify by nearest task centroid of the
    /// concatenated observation features.
    fn nearest_centroid_accuracy(
        train: &[PlanRecord],
        test: &[PlanRecord],
        n_tasks: usize,
    ) -> f64 {
        let dim = train[0].start_obs.len() * 2;
        let mut centroids = vec![vec![0.0f64; dim]; n_tasks];
        let mut counts = vec![0usize; n_tasks];
        for r in train {
            for (i, v) in r.start_obs.iter().chain(&r.goal_obs).enumerate() {
                centroids[r.task][i] += *v as f64;
            }
            counts[r.task] += 1;
        }
        for (c, &n) in centroids.iter_mut().zip(&counts) {
            for v in c.iter_mut() {
                *v /= n.max(1) as f64;
            }
        }
        let mut correct = 0usize;
        for r in test {
            let x: Vec<f64> = r
                .start_obs
                .iter()
                .chain(&r.goal_obs)
                .map(|&v| v as f64)
                .collect();
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (k, c) in centroids.iter().enumerate() {
                let d: f64 = x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            if best == r.task {
                correct += 1;
            }
        }
        correct as f64 / test.len() as f64
    }

    #[test]
    fn single_task_dataset_is_trivially_perfect() {
        let cfg = SyntheticConfig {
            n_tasks: 1,
            videos_per_task: 10,
            ..SyntheticConfig::toy_deterministic()
        };
        let (train, test) = datasets(&cfg, 3);
        let mut clf = TaskClassifier::with_hidden(cfg.obs_dim, 1, 16, 4);
        let report = train_classifier(&mut clf, &train, &test, 2, 1e-3, 16, 4).unwrap();
        assert_eq!(report.train_accuracy, 1.0);
        assert_eq!(report.heldout_accuracy, 1.0);
    }

    #[test]
    fn shuffled_labels_fall_to_chance() {
        use rand::seq::SliceRandom;
        let cfg = SyntheticConfig {
            videos_per_task: 25,
            ..SyntheticConfig::toy_deterministic()
        };
        let (mut train, test) = datasets(&cfg, 3);
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let mut labels: Vec<usize> = train.iter().map(|r| r.task).collect();
        labels.shuffle(&mut rng);
        for (r, l) in train.iter_mut().zip(labels) {
            r.task = l;
        }
        let mut clf = TaskClassifier::with_hidden(cfg.obs_dim, cfg.n_tasks, 32, 9);
        let report = train_classifier(&mut clf, &train, &test, 6, 1e-3, 32, 9).unwrap();
        let chance = 1.0 / cfg.n_tasks as f64;
        assert!(
            (report.heldout_accuracy - chance).abs() <= 0.05 + chance,
            "heldout {} vs chance {}",
            report.heldout_accuracy,
            chance
        );
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let mut clf = TaskClassifier::with_hidden(2, 2, 8, 0);
        assert!(train_classifier(&mut clf, &[], &[], 1, 1e-3, 8, 0).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = std::env::temp_dir().join("proplan-clf-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("clf.ckpt");
        let clf = TaskClassifier::with_hidden(3, 4, 16, 5);
        clf.save(&path).unwrap();
        let loaded = TaskClassifier::load(&path).unwrap();
        let (a, _) = clf.classify(&[0.5, 0.1, -0.2], &[0.0, 0.3, 0.9]).unwrap();
        let (b, _) = loaded.classify(&[0.5, 0.1, -0.2], &[0.0, 0.3, 0.9]).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
