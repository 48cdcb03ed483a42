//! Synthetic procedural-task corpus, sliding-window extraction, video-level
//! splitting, and the dataset file format (which also ingests externally
//! computed features).
//!
//! Generation is deterministic given the seed. Each task owns an action
//! subset and a Markov chain over it; each video is a walk; each action
//! boundary yields an observation built from a fixed random unit action
//! embedding plus a task offset plus Gaussian noise. A zero transition
//! concentration degenerates the chain into a deterministic cycle, which is
//! the single-valid-plan toy benchmark.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::conditioning::TaskActionMap;
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"PDPPDATA";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct SyntheticConfig {
    pub n_tasks: usize,
    pub n_actions: usize,
    pub actions_per_task: usize,
    /// Dirichlet concentration of transition rows; 0 builds a deterministic
    /// cycle chain (exactly one valid plan per query).
    pub transition_alpha: f64,
    pub obs_dim: usize,
    pub obs_noise: f32,
    pub videos_per_task: usize,
    pub video_len: (usize, usize),
    pub seed: u64,
}

impl SyntheticConfig {
    /// Default benchmark sized for minutes-scale CPU training.
    pub fn standard() -> SyntheticConfig {
        SyntheticConfig {
            n_tasks: 6,
            n_actions: 24,
            actions_per_task: 6,
            transition_alpha: 0.8,
            obs_dim: 16,
            obs_noise: 0.1,
            videos_per_task: 60,
            video_len: (5, 9),
            seed: 0,
        }
    }

    /// Deterministic single-path chains: every (start, goal, T) query has
    /// exactly one valid plan.
    pub fn toy_deterministic() -> SyntheticConfig {
        SyntheticConfig {
            n_tasks: 3,
            n_actions: 12,
            actions_per_task: 6,
            transition_alpha: 0.0,
            obs_dim: 16,
            obs_noise: 0.05,
            videos_per_task: 40,
            video_len: (6, 9),
            seed: 0,
        }
    }

    /// Noise-free observations with branching chains, so identical queries
    /// repeat across videos and carry several ground-truth modes.
    pub fn multi_mode() -> SyntheticConfig {
        SyntheticConfig {
            n_tasks: 4,
            n_actions: 16,
            actions_per_task: 5,
            transition_alpha: 0.3,
            obs_dim: 16,
            obs_noise: 0.0,
            videos_per_task: 120,
            video_len: (5, 8),
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.actions_per_task > self.n_actions {
            return Err(Error::invalid(
                "synthetic",
                format!(
                    "actions_per_task {} > n_actions {}",
                    self.actions_per_task, self.n_actions
                ),
            ));
        }
        if self.actions_per_task < 2 {
            return Err(Error::invalid("synthetic", "actions_per_task must be >= 2"));
        }
        if self.obs_noise < 0.0 {
            return Err(Error::invalid("synthetic", "obs_noise must be >= 0"));
        }
        if self.video_len.0 < 2 || self.video_len.0 > self.video_len.1 {
            return Err(Error::invalid("synthetic", "bad video length range"));
        }
        Ok(())
    }
}

/// One training/eval instance.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanRecord {
    pub task: usize,
    pub actions: Vec<usize>,
    pub start_obs: Vec<f32>,
    pub goal_obs: Vec<f32>,
}

impl PlanRecord {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }
}

#[derive(Clone, Debug)]
pub struct DatasetMeta {
    pub n_tasks: usize,
    pub n_actions: usize,
    pub obs_dim: usize,
    pub task_actions: Vec<BTreeSet<usize>>,
}

impl DatasetMeta {
    pub fn task_action_map(&self) -> Result<TaskActionMap> {
        TaskActionMap::new(self.task_actions.clone(), self.n_actions)
    }
}

/// A dataset on disk or in memory: metadata plus extracted plan records.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub records: Vec<PlanRecord>,
}

#[derive(Clone, Debug)]
pub struct Video {
    pub task: usize,
    pub actions: Vec<usize>,
    /// boundaries[i] observes the state before action i+1;
    /// boundaries[n] observes the state after the last action.
    pub boundaries: Vec<Vec<f32>>,
}

/// The generated world: videos plus everything the oracles need.
#[derive(Clone, Debug)]
pub struct World {
    pub meta: DatasetMeta,
    pub videos: Vec<Video>,
    tasks: Vec<TaskChain>,
}

#[derive(Clone, Debug)]
struct TaskChain {
    actions: Vec<usize>,
    /// transitions[i][j]: probability of actions[j] after actions[i];
    /// row `actions.len()` is the start distribution.
    transitions: Vec<Vec<f64>>,
}

impl TaskChain {
    fn row_index(&self, state: Option<usize>) -> Option<usize> {
        match state {
            None => Some(self.actions.len()),
            Some(a) => self.actions.iter().position(|&x| x == a),
        }
    }
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<World> {
    cfg.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);

    let action_emb: Vec<Vec<f32>> = (0..cfg.n_actions)
        .map(|_| unit_vector(cfg.obs_dim, &mut rng))
        .collect();
    let start_emb: Vec<Vec<f32>> = (0..cfg.n_tasks)
        .map(|_| unit_vector(cfg.obs_dim, &mut rng))
        .collect();
    let task_offset: Vec<Vec<f32>> = (0..cfg.n_tasks)
        .map(|_| {
            unit_vector(cfg.obs_dim, &mut rng)
                .into_iter()
                .map(|v| 0.5 * v)
                .collect()
        })
        .collect();

    let mut tasks = Vec::with_capacity(cfg.n_tasks);
    let mut task_actions = Vec::with_capacity(cfg.n_tasks);
    for _ in 0..cfg.n_tasks {
        let mut ids: Vec<usize> = (0..cfg.n_actions).collect();
        ids.shuffle(&mut rng);
        ids.truncate(cfg.actions_per_task);
        let k = ids.len();
        let transitions = if cfg.transition_alpha == 0.0 {
            // Deterministic cycle: position i -> position i+1 mod k; walks
            // start at the cycle head.
            let mut rows = vec![vec![0.0f64; k]; k + 1];
            for (i, row) in rows.iter_mut().enumerate().take(k) {
                row[(i + 1) % k] = 1.0;
            }
            rows[k][0] = 1.0;
            rows
        } else {
            let gamma = Gamma::new(cfg.transition_alpha, 1.0)
                .map_err(|e| Error::invalid("synthetic", format!("bad alpha: {e}")))?;
            (0..=k)
                .map(|_| {
                    let mut row: Vec<f64> =
                        (0..k).map(|_| gamma.sample(&mut rng).max(1e-12)).collect();
                    let sum: f64 = row.iter().sum();
                    for v in &mut row {
                        *v /= sum;
                    }
                    row
                })
                .collect()
        };
        task_actions.push(ids.iter().copied().collect::<BTreeSet<usize>>());
        tasks.push(TaskChain {
            actions: ids,
            transitions,
        });
    }

    let meta = DatasetMeta {
        n_tasks: cfg.n_tasks,
        n_actions: cfg.n_actions,
        obs_dim: cfg.obs_dim,
        task_actions,
    };

    let mut videos = Vec::with_capacity(cfg.n_tasks * cfg.videos_per_task);
    for task in 0..cfg.n_tasks {
        for _ in 0..cfg.videos_per_task {
            // Per-video stream derived from the master stream, so videos can
            // be regenerated independently.
            let video_seed = rng.next_u64();
            let mut vrng = ChaCha12Rng::seed_from_u64(video_seed);
            let n = vrng.random_range(cfg.video_len.0..=cfg.video_len.1);
            let chain = &tasks[task];
            let mut actions = Vec::with_capacity(n);
            let mut state_row = chain.actions.len(); // start row
            for _ in 0..n {
                let next = sample_categorical(&chain.transitions[state_row], &mut vrng);
                actions.push(chain.actions[next]);
                state_row = next;
            }
            let mut boundaries = Vec::with_capacity(n + 1);
            boundaries.push(observe(
                &start_emb[task],
                &task_offset[task],
                cfg.obs_noise,
                &mut vrng,
                false,
            ));
            for &a in &actions {
                boundaries.push(observe(
                    &action_emb[a],
                    &task_offset[task],
                    cfg.obs_noise,
                    &mut vrng,
                    true,
                ));
            }
            videos.push(Video {
                task,
                actions,
                boundaries,
            });
        }
    }

    Ok(World {
        meta,
        videos,
        tasks,
    })
}

fn observe(
    emb: &[f32],
    offset: &[f32],
    noise: f32,
    rng: &mut ChaCha12Rng,
    add_offset: bool,
) -> Vec<f32> {
    emb.iter()
        .enumerate()
        .map(|(i, &v)| {
            let base = if add_offset { v + offset[i] } else { v };
            if noise > 0.0 {
                let z: f32 = StandardNormal.sample(rng);
                base + noise * z
            } else {
                base
            }
        })
        .collect()
}

fn unit_vector(dim: usize, rng: &mut ChaCha12Rng) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm: f32 = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 1e-3 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn sample_categorical(probs: &[f64], rng: &mut ChaCha12Rng) -> usize {
    let u: f64 = rng.random::<f64>();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

impl World {
    /// All plans of length `t` with positive probability that start from
    /// `start` (None = the per-task start state, Some(a) = just after action
    /// a) and end with `goal`. Deterministic enumeration order.
    pub fn reachable_plans(
        &self,
        task: usize,
        start: Option<usize>,
        goal: usize,
        t: usize,
    ) -> Vec<Vec<usize>> {
        let chain = &self.tasks[task];
        let Some(row) = chain.row_index(start) else {
            return Vec::new();
        };
        let mut out = Vec::new();
        let mut prefix = Vec::with_capacity(t);
        self.dfs(chain, row, goal, t, &mut prefix, &mut out);
        out
    }

    fn dfs(
        &self,
        chain: &TaskChain,
        row: usize,
        goal: usize,
        remaining: usize,
        prefix: &mut Vec<usize>,
        out: &mut Vec<Vec<usize>>,
    ) {
        if remaining == 0 {
            if prefix.last() == Some(&goal) {
                out.push(prefix.clone());
            }
            return;
        }
        for (j, &p) in chain.transitions[row].iter().enumerate() {
            if p > 0.0 {
                prefix.push(chain.actions[j]);
                self.dfs(chain, j, goal, remaining - 1, prefix, out);
                prefix.pop();
            }
        }
    }

    /// The (start-state, goal-state) identifiers of window i of a video:
    /// start state is the action completed before the window (None at video
    /// start), goal state is the window's last action.
    pub fn window_states(video: &Video, i: usize, t: usize) -> (Option<usize>, usize) {
        let start = if i == 0 {
            None
        } else {
            Some(video.actions[i - 1])
        };
        (start, video.actions[i + t - 1])
    }
}

/// Sliding windows of size `t`: a video with n actions yields n - t + 1
/// records (none when n < t). Record i covers actions i..i+t with the
/// boundary observations at its ends.
pub fn extract_windows(video: &Video, t: usize) -> Vec<PlanRecord> {
    let n = video.actions.len();
    if n < t {
        return Vec::new();
    }
    (0..=n - t)
        .map(|i| PlanRecord {
            task: video.task,
            actions: video.actions[i..i + t].to_vec(),
            start_obs: video.boundaries[i].clone(),
            goal_obs: video.boundaries[i + t].clone(),
        })
        .collect()
}

/// Windows for every horizon in `horizons`, keyed by horizon.
pub fn extract_all_windows(
    videos: &[Video],
    horizons: &[usize],
) -> BTreeMap<usize, Vec<PlanRecord>> {
    let mut out: BTreeMap<usize, Vec<PlanRecord>> = BTreeMap::new();
    for &t in horizons {
        let mut records = Vec::new();
        for video in videos {
            records.extend(extract_windows(video, t));
        }
        out.insert(t, records);
    }
    out
}

/// Video-level split: all windows of a video land on one side, preventing
/// leakage of near-duplicate windows across the boundary. Deterministic given
/// the seed.
pub fn split(videos: &[Video], ratio: f64, seed: u64) -> Result<(Vec<Video>, Vec<Video>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid("split", format!("ratio {ratio} outside (0,1)")));
    }
    let mut idx: Vec<usize> = (0..videos.len()).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let n_train = (ratio * videos.len() as f64).floor() as usize;
    let train = idx[..n_train].iter().map(|&i| videos[i].clone()).collect();
    let test = idx[n_train..].iter().map(|&i| videos[i].clone()).collect();
    Ok((train, test))
}

pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&(dataset.meta.n_tasks as u32).to_le_bytes())?;
    w.write_all(&(dataset.meta.n_actions as u32).to_le_bytes())?;
    w.write_all(&(dataset.meta.obs_dim as u32).to_le_bytes())?;
    for set in &dataset.meta.task_actions {
        w.write_all(&(set.len() as u32).to_le_bytes())?;
        for &a in set {
            w.write_all(&(a as u32).to_le_bytes())?;
        }
    }
    w.write_all(&(dataset.records.len() as u32).to_le_bytes())?;
    for r in &dataset.records {
        w.write_all(&(r.task as u32).to_le_bytes())?;
        w.write_all(&(r.actions.len() as u32).to_le_bytes())?;
        for &a in &r.actions {
            w.write_all(&(a as u32).to_le_bytes())?;
        }
        for &v in r.start_obs.iter().chain(r.goal_obs.iter()) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut r = Reader {
        inner: BufReader::new(File::open(path)?),
        offset: 0,
        path: path.display().to_string(),
    };
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic, "magic")?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format {
            path: r.path,
            what: "bad magic".to_string(),
            offset: 0,
        });
    }
    let version = r.read_u32("version")?;
    if version != DATASET_VERSION {
        return Err(Error::Format {
            path: r.path,
            what: format!("unsupported version {version}"),
            offset: 8,
        });
    }
    let n_tasks = r.read_u32("task count")? as usize;
    let n_actions = r.read_u32("action count")? as usize;
    let obs_dim = r.read_u32("obs dim")? as usize;
    let mut task_actions = Vec::with_capacity(n_tasks);
    for _ in 0..n_tasks {
        let k = r.read_u32("task action count")? as usize;
        let mut set = BTreeSet::new();
        for _ in 0..k {
            set.insert(r.read_u32("action id")? as usize);
        }
        task_actions.push(set);
    }
    let n_records = r.read_u32("record count")? as usize;
    let mut records = Vec::with_capacity(n_records);
    for _ in 0..n_records {
        let task = r.read_u32("record task")? as usize;
        let t = r.read_u32("record horizon")? as usize;
        if t < 2 {
            return Err(Error::Format {
                path: r.path.clone(),
                what: format!("record horizon {t} < 2"),
                offset: r.offset,
            });
        }
        let mut actions = Vec::with_capacity(t);
        for _ in 0..t {
            let a = r.read_u32("action id")? as usize;
            if a >= n_actions {
                return Err(Error::Format {
                    path: r.path.clone(),
                    what: format!("action id {a} >= vocabulary {n_actions}"),
                    offset: r.offset,
                });
            }
            actions.push(a);
        }
        let mut start_obs = Vec::with_capacity(obs_dim);
        let mut goal_obs = Vec::with_capacity(obs_dim);
        for i in 0..2 * obs_dim {
            let v = r.read_f32("observation")?;
            if i < obs_dim {
                start_obs.push(v);
            } else {
                goal_obs.push(v);
            }
        }
        records.push(PlanRecord {
            task,
            actions,
            start_obs,
            goal_obs,
        });
    }
    Ok(Dataset {
        meta: DatasetMeta {
            n_tasks,
            n_actions,
            obs_dim,
            task_actions,
        },
        records,
    })
}

struct Reader {
    inner: BufReader<File>,
    offset: u64,
    path: String,
}

impl Reader {
    fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|_| Error::Format {
            path: self.path.clone(),
            what: format!("truncated while reading {what}"),
            offset: at,
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn read_u32(&mut self, what: &str) -> Result<u32> {
        let mut buf = [0u8; 4];
        self.read_exact(&mut buf, what)?;
        Ok(u32::from_le_bytes(buf))
    }

    fn read_f32(&mut self, what: &str) -> Result<f32> {
        let mut buf = [0u8; 4];
        self.read_exact(&mut buf, what)?;
        Ok(f32::from_le_bytes(buf))
    }
}
