//! End-to-end orchestration: data generation, classifier training, diffusion
//! training (single or joint horizon, one- or two-stage), sampling, and
//! evaluation, plus the run manifest that makes every run reproducible.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::classifier::{train_classifier, ClassifierReport, TaskClassifier};
use crate::conditioning::{ConditionSet, Layout, TaskActionMap, TaskMode};
use crate::data::{
    extract_all_windows, generate_synthetic, split, Dataset, PlanRecord, SyntheticConfig, World,
};
use crate::denoiser::{DenoiserModel, ModelDims, MoeConfig};
use crate::error::{Error, Result};
use crate::evaluation::{prob_metrics, EvalReport, ProbReport, QueryGroup};
use crate::sampling::{sample_many, sample_plan, two_stage_plan, SamplerConfig};
use crate::schedule::{build_schedule, NoiseSchedule};
use crate::training::{endpoint_record, joint_train, prepare_item, TrainConfig, Trainer, TrainItem};

/// 64-bit FNV-1a, hex encoded; used for config/version content hashes.
pub fn fnv1a64(data: &[u8]) -> String {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in data {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{hash:016x}")
}

pub fn version_string() -> String {
    format!("proplan-{}", env!("CARGO_PKG_VERSION"))
}

/// Everything needed to reproduce a run, written atomically at run end.
#[derive(Clone, Debug, Default)]
pub struct RunManifest {
    pub command: String,
    pub config_text: String,
    pub seed: u64,
    pub wall_clock_secs: f64,
    pub outputs: Vec<String>,
    pub metrics: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "command = {}", self.command);
        let _ = writeln!(s, "config_hash = {}", fnv1a64(self.config_text.as_bytes()));
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "version = {}", version_string());
        let _ = writeln!(s, "version_hash = {}", fnv1a64(version_string().as_bytes()));
        let _ = writeln!(s, "wall_clock_secs = {:.3}", self.wall_clock_secs);
        for out in &self.outputs {
            let _ = writeln!(s, "output = {out}");
        }
        for (k, v) in &self.metrics {
            let _ = writeln!(s, "metric.{k} = {v}");
        }
        let _ = writeln!(s, "# config");
        for line in self.config_text.lines() {
            let _ = writeln!(s, "config.{line}");
        }
        s
    }

    /// Write via a temp file + rename so the manifest appears atomically.
    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.render())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }
}

pub fn config_hash(text: &str) -> String {
    fnv1a64(text.as_bytes())
}

/// Generate a world, split at video level, and extract windows for the
/// requested horizons into train/test datasets.
pub fn make_datasets(
    synth: &SyntheticConfig,
    horizons: &[usize],
    ratio: f64,
    split_seed: u64,
) -> Result<(World, Dataset, Dataset)> {
    let world = generate_synthetic(synth)?;
    let (train_videos, test_videos) = split(&world.videos, ratio, split_seed)?;
    let collect = |videos: &[crate::data::Video]| -> Dataset {
        let mut records = Vec::new();
        for (_, recs) in extract_all_windows(videos, horizons) {
            records.extend(recs);
        }
        Dataset {
            meta: world.meta.clone(),
            records,
        }
    };
    Ok((world.clone(), collect(&train_videos), collect(&test_videos)))
}

/// Layout derived from a training config and dataset metadata.
pub fn layout_for(cfg: &TrainConfig, dataset: &Dataset) -> Result<Layout> {
    Layout::new(
        cfg.horizons.clone(),
        cfg.horizon_mode,
        cfg.task_mode,
        dataset.meta.n_tasks,
        dataset.meta.n_actions,
        dataset.meta.obs_dim,
    )
}

/// Group records by horizon and build train items.
pub fn build_train_items(
    dataset: &Dataset,
    layout: &Layout,
    vpa: bool,
) -> Result<BTreeMap<usize, Vec<TrainItem>>> {
    let mut out: BTreeMap<usize, Vec<TrainItem>> = BTreeMap::new();
    for r in &dataset.records {
        if layout.horizons.contains(&r.horizon()) {
            out.entry(r.horizon())
                .or_default()
                .push(prepare_item(r, layout, vpa)?);
        }
    }
    Ok(out)
}

/// Train a diffusion model over the configured horizons.
pub fn train_diffusion(
    dataset: &Dataset,
    cfg: &TrainConfig,
    variant: &str,
    dims: ModelDims,
    moe: Option<MoeConfig>,
    vpa: bool,
) -> Result<Trainer> {
    let layout = layout_for(cfg, dataset)?;
    let sched = build_schedule(&cfg.schedule, cfg.diffusion_steps)?;
    let task_map = match cfg.task_mode {
        TaskMode::Mask => Some(dataset.meta.task_action_map()?),
        _ => None,
    };
    let model = DenoiserModel::new(variant, layout, dims, moe, cfg.seed)?;
    let mut trainer = Trainer::new(model, cfg.clone(), sched, task_map)?;
    let items = build_train_items(dataset, &trainer.model.layout, vpa)?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    joint_train(&mut trainer, &items, &mut rng)?;
    Ok(trainer)
}

/// Train the two-column endpoint model used by two-stage prediction.
pub fn train_endpoint_model(
    dataset: &Dataset,
    cfg: &TrainConfig,
    target_horizon: usize,
    variant: &str,
    dims: ModelDims,
    vpa: bool,
) -> Result<Trainer> {
    let endpoint_records: Vec<PlanRecord> = dataset
        .records
        .iter()
        .filter(|r| r.horizon() == target_horizon)
        .map(endpoint_record)
        .collect();
    if endpoint_records.is_empty() {
        return Err(Error::invalid(
            "train_endpoint_model",
            format!("no records with horizon {target_horizon}"),
        ));
    }
    let endpoint_dataset = Dataset {
        meta: dataset.meta.clone(),
        records: endpoint_records,
    };
    let endpoint_cfg = TrainConfig {
        horizons: vec![2],
        horizon_mode: crate::conditioning::HorizonMode::None,
        ..cfg.clone()
    };
    train_diffusion(&endpoint_dataset, &endpoint_cfg, variant, dims, None, vpa)
}

/// How the task condition is produced at inference time.
#[derive(Clone, Copy)]
pub enum TaskSource<'a> {
    /// First-stage classifier prediction (the default pipeline).
    Classifier(&'a TaskClassifier),
    /// Ground-truth labels (VPA protocol and ablations).
    GroundTruth,
}

/// Build the inference-time condition set for a query record.
pub fn query_condition(record: &PlanRecord, source: &TaskSource, vpa: bool) -> Result<ConditionSet> {
    let task = match source {
        TaskSource::Classifier(clf) => {
            let (_, predicted) = clf.classify(&record.start_obs, &record.goal_obs)?;
            predicted
        }
        TaskSource::GroundTruth => record.task,
    };
    let mut cond = ConditionSet::new(
        record.start_obs.clone(),
        record.goal_obs.clone(),
        Some(task),
        record.horizon(),
    );
    if vpa {
        cond = cond.with_zero_goal();
    }
    Ok(cond)
}

pub struct EvalSettings<'a> {
    pub sampler: SamplerConfig,
    pub task_source: TaskSource<'a>,
    pub task_map: Option<&'a TaskActionMap>,
    pub vpa: bool,
    /// Sampling seeds; reported metrics average over them.
    pub seeds: Vec<u64>,
}

pub struct EvalOutcome {
    pub report: EvalReport,
    /// Predictions from the first seed, aligned with the query records.
    pub predictions: Vec<Vec<usize>>,
    pub tasks: Vec<usize>,
}

/// Sample one plan per query per seed and average SR/mAcc/mIoU over seeds.
pub fn evaluate_model(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    queries: &[PlanRecord],
    settings: &EvalSettings,
) -> Result<EvalOutcome> {
    if queries.is_empty() {
        return Err(Error::invalid("evaluate_model", "no queries"));
    }
    let horizon = queries[0].horizon();
    let gts: Vec<Vec<usize>> = queries.iter().map(|q| q.actions.clone()).collect();
    let mut sr_sum = 0.0;
    let mut macc_sum = 0.0;
    let mut miou_sum = 0.0;
    let mut first_preds: Option<Vec<Vec<usize>>> = None;
    let mut tasks = Vec::with_capacity(queries.len());
    for (si, &seed) in settings.seeds.iter().enumerate() {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut preds = Vec::with_capacity(queries.len());
        for q in queries {
            let cond = query_condition(q, &settings.task_source, settings.vpa)?;
            if si == 0 {
                tasks.push(cond.task.unwrap_or(q.task));
            }
            let (plan, _) = sample_plan(
                model,
                &cond,
                sched,
                &settings.sampler,
                settings.task_map,
                &mut rng,
            )?;
            preds.push(plan);
        }
        let r = EvalReport::compute(horizon, &preds, &gts)?;
        sr_sum += r.sr;
        macc_sum += r.m_acc;
        miou_sum += r.m_iou;
        if first_preds.is_none() {
            first_preds = Some(preds);
        }
    }
    let n = settings.seeds.len() as f64;
    Ok(EvalOutcome {
        report: EvalReport {
            horizon,
            n_queries: queries.len(),
            sr: sr_sum / n,
            m_acc: macc_sum / n,
            m_iou: miou_sum / n,
            prob: None,
            samples_per_query: 1,
            seeds: settings.seeds.clone(),
        },
        predictions: first_preds.unwrap(),
        tasks,
    })
}

/// Two-stage evaluation; per query the rng substream is shared between the
/// endpoint and interior stages.
pub fn evaluate_two_stage(
    endpoint_model: &DenoiserModel,
    interior_model: &DenoiserModel,
    sched: &NoiseSchedule,
    queries: &[PlanRecord],
    settings: &EvalSettings,
) -> Result<(EvalReport, EvalReport)> {
    if queries.is_empty() {
        return Err(Error::invalid("evaluate_two_stage", "no queries"));
    }
    let horizon = queries[0].horizon();
    let gts: Vec<Vec<usize>> = queries.iter().map(|q| q.actions.clone()).collect();
    let gt_endpoints: Vec<Vec<usize>> = gts
        .iter()
        .map(|g| vec![*g.first().unwrap(), *g.last().unwrap()])
        .collect();
    let mut full_sr = 0.0;
    let mut full_macc = 0.0;
    let mut full_miou = 0.0;
    let mut ep_sr = 0.0;
    let mut ep_macc = 0.0;
    let mut ep_miou = 0.0;
    for &seed in &settings.seeds {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut full = Vec::with_capacity(queries.len());
        let mut endpoints = Vec::with_capacity(queries.len());
        for q in queries {
            let cond = query_condition(q, &settings.task_source, settings.vpa)?;
            let (plan, eps) = two_stage_plan(
                endpoint_model,
                interior_model,
                &cond,
                sched,
                &settings.sampler,
                settings.task_map,
                &mut rng,
            )?;
            full.push(plan);
            endpoints.push(eps);
        }
        let rf = EvalReport::compute(horizon, &full, &gts)?;
        full_sr += rf.sr;
        full_macc += rf.m_acc;
        full_miou += rf.m_iou;
        let re = EvalReport::compute(2, &endpoints, &gt_endpoints)?;
        ep_sr += re.sr;
        ep_macc += re.m_acc;
        ep_miou += re.m_iou;
    }
    let n = settings.seeds.len() as f64;
    let mk = |horizon: usize, sr: f64, macc: f64, m_iou: f64, nq: usize| EvalReport {
        horizon,
        n_queries: nq,
        sr: sr / n,
        m_acc: macc / n,
        m_iou: m_iou / n,
        prob: None,
        samples_per_query: 1,
        seeds: settings.seeds.clone(),
    };
    let full = mk(horizon, full_sr, full_macc, full_miou, queries.len());
    let endpoint = mk(2, ep_sr, ep_macc, ep_miou, queries.len());
    // Full-sequence success requires correct endpoints, which requires
    // stage-1 success, so this holds per query.
    assert!(
        endpoint.sr >= full.sr - 1e-12,
        "endpoint SR {} must bound full-sequence SR {}",
        endpoint.sr,
        full.sr
    );
    Ok((full, endpoint))
}

/// Per-group sampling for the probabilistic suite: `count` samples per query
/// group (one shared condition per group).
pub fn evaluate_probabilistic(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    groups: &[QueryGroup],
    count: usize,
    settings: &EvalSettings,
    seed: u64,
) -> Result<ProbReport> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut sampled = Vec::with_capacity(groups.len());
    for g in groups {
        let record = PlanRecord {
            task: g.task,
            actions: g.gt_modes.keys().next().unwrap().clone(),
            start_obs: g.start_obs.clone(),
            goal_obs: g.goal_obs.clone(),
        };
        let cond = query_condition(&record, &settings.task_source, settings.vpa)?;
        let plans = sample_many(
            model,
            &cond,
            count,
            sched,
            &settings.sampler,
            settings.task_map,
            &mut rng,
        )?;
        sampled.push(plans);
    }
    prob_metrics(groups, &sampled)
}

pub struct PipelineConfig {
    pub synth: SyntheticConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub variant: String,
    pub dims: ModelDims,
    pub moe: Option<MoeConfig>,
    pub split_ratio: f64,
    pub vpa: bool,
    pub gt_task: bool,
    pub classifier_epochs: usize,
    pub classifier_lr: f32,
    pub eval_seeds: Vec<u64>,
}

impl PipelineConfig {
    /// Deterministic-toy pipeline sized to converge in about a minute of CPU
    /// time; the single-path data needs far less capacity than the desk
    /// defaults provide.
    pub fn desk_toy() -> PipelineConfig {
        PipelineConfig {
            synth: SyntheticConfig::toy_deterministic(),
            train: TrainConfig {
                diffusion_steps: 50,
                total_steps: 1500,
                batch_size: 24,
                warmup_steps: 200,
                lr_peak: 2e-3,
                lr_decay: vec![(1000, 0.5)],
                ..TrainConfig::desk()
            },
            sampler: SamplerConfig::default(),
            variant: "unet3".to_string(),
            dims: ModelDims {
                widths: vec![16, 32],
                depth: 0,
                heads: 2,
                groups: 4,
                time_dim: 16,
                mlp_ratio: 2,
            },
            moe: None,
            split_ratio: 0.7,
            vpa: false,
            gt_task: false,
            classifier_epochs: 10,
            classifier_lr: 2e-3,
            eval_seeds: vec![101, 202, 303],
        }
    }
}

pub struct PipelineOutcome {
    pub reports: BTreeMap<usize, EvalReport>,
    pub classifier_report: ClassifierReport,
    pub trainer: Trainer,
    pub classifier: TaskClassifier,
    pub train_dataset: Dataset,
    pub test_dataset: Dataset,
    pub world: World,
}

/// gen-data -> train-classifier -> train -> sample -> eval. The classifier's
/// predicted task (not GT) feeds the diffusion condition unless `gt_task` or
/// `vpa` is set.
pub fn end_to_end_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    let (world, train_ds, test_ds) =
        make_datasets(&cfg.synth, &cfg.train.horizons, cfg.split_ratio, cfg.train.seed)?;

    let mut classifier = TaskClassifier::new(train_ds.meta.obs_dim, train_ds.meta.n_tasks, cfg.train.seed);
    let classifier_report = train_classifier(
        &mut classifier,
        &train_ds.records,
        &test_ds.records,
        cfg.classifier_epochs,
        cfg.classifier_lr,
        64,
        cfg.train.seed,
    )?;

    let trainer = train_diffusion(
        &train_ds,
        &cfg.train,
        &cfg.variant,
        cfg.dims.clone(),
        cfg.moe,
        cfg.vpa,
    )?;

    let task_map = trainer.task_map.clone();
    let mut reports = BTreeMap::new();
    for &t in &cfg.train.horizons {
        let queries: Vec<PlanRecord> = test_ds
            .records
            .iter()
            .filter(|r| r.horizon() == t)
            .cloned()
            .collect();
        if queries.is_empty() {
            continue;
        }
        let task_source = if cfg.gt_task || cfg.vpa {
            TaskSource::GroundTruth
        } else {
            TaskSource::Classifier(&classifier)
        };
        let settings = EvalSettings {
            sampler: cfg.sampler.clone(),
            task_source,
            task_map: task_map.as_ref(),
            vpa: cfg.vpa,
            seeds: cfg.eval_seeds.clone(),
        };
        let outcome = evaluate_model(&trainer.model, &trainer.sched, &queries, &settings)?;
        reports.insert(t, outcome.report);
    }

    Ok(PipelineOutcome {
        reports,
        classifier_report,
        trainer,
        classifier,
        train_dataset: train_ds,
        test_dataset: test_ds,
        world,
    })
}

/// Timestamped run directory name: nanoseconds since epoch + config hash
/// prefix, so back-to-back runs of one config land in distinct directories.
pub fn run_dir_name(config_text: &str) -> String {
    let ts = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0);
    format!("{ts}-{}", &config_hash(config_text)[..8])
}

/// Convenience timer for manifest wall-clock fields.
pub struct RunTimer(Instant);

impl RunTimer {
    pub fn start() -> RunTimer {
        RunTimer(Instant::now())
    }
    pub fn secs(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

pub fn ensure_dir(path: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(path)?;
    Ok(path.to_path_buf())
}
