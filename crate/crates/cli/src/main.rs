//! Command-line entry point: data generation, classifier training, diffusion
//! training (single/joint horizon, one-/two-stage), sampling, evaluation, and
//! ablation sweeps. Every run writes its outputs plus a manifest into a run
//! directory named by timestamp and config hash; the `PDPP_SEED` environment
//! variable overrides the seed everywhere.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use proplan_core::classifier::{train_classifier, TaskClassifier};
use proplan_core::conditioning::TaskMode;
use proplan_core::data::{read_dataset, write_dataset, Dataset, SyntheticConfig};
use proplan_core::denoiser::{load_model, save_model, DenoiserModel, ModelDims, MoeConfig};
use proplan_core::error::{Error, Result};
use proplan_core::evaluation::{
    group_queries, miou, read_predictions, success_rate, write_predictions, EvalReport,
};
use proplan_core::pipeline::{
    end_to_end_pipeline, ensure_dir, evaluate_model, evaluate_probabilistic, make_datasets,
    run_dir_name, EvalSettings, PipelineConfig, RunManifest, RunTimer, TaskSource,
};
use proplan_core::sampling::{BaselineMode, Method, SamplerConfig};
use proplan_core::schedule::build_schedule;
use proplan_core::training::TrainConfig;

#[derive(Parser)]
#[command(
    name = "proplan",
    about = "Goal-directed procedure planning with projected conditional diffusion",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic procedural corpus and write train/test datasets.
    GenData(GenDataArgs),
    /// Train the first-stage task classifier.
    TrainClassifier(TrainClassifierArgs),
    /// Train a diffusion planner (joint over the configured horizons).
    Train(TrainArgs),
    /// Train the two-column endpoint model for two-stage prediction.
    TrainEndpoint(TrainEndpointArgs),
    /// Sample plans for every query in a dataset and dump them as TSV.
    Sample(SampleArgs),
    /// Evaluate a model or re-score a prediction dump.
    Eval(EvalArgs),
    /// Ablation sweeps: guidance scale, horizons, or task conditioning.
    Sweep(SweepArgs),
    /// Run the whole pipeline on synthetic data and report metrics.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct RunDirArgs {
    /// Parent directory for run outputs.
    #[arg(long, default_value = "runs")]
    out_root: PathBuf,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 6)]
    tasks: usize,
    #[arg(long, default_value_t = 24)]
    actions: usize,
    #[arg(long, default_value_t = 6)]
    actions_per_task: usize,
    /// Dirichlet transition concentration; 0 builds deterministic chains.
    #[arg(long, default_value_t = 0.8)]
    transition_alpha: f64,
    #[arg(long, default_value_t = 16)]
    obs_dim: usize,
    #[arg(long, default_value_t = 0.1)]
    obs_noise: f32,
    #[arg(long, default_value_t = 60)]
    videos_per_task: usize,
    #[arg(long, default_value_t = 5)]
    min_actions: usize,
    #[arg(long, default_value_t = 9)]
    max_actions: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Horizons to extract sliding windows for.
    #[arg(long, value_delimiter = ',', default_value = "3,4")]
    horizons: Vec<usize>,
    /// Train fraction of the video-level split.
    #[arg(long, default_value_t = 0.7)]
    ratio: f64,
    #[command(flatten)]
    run: RunDirArgs,
}

#[derive(Args)]
struct TrainClassifierArgs {
    #[arg(long)]
    train_data: PathBuf,
    #[arg(long)]
    test_data: PathBuf,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 2e-3)]
    lr: f32,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 128)]
    hidden: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    run: RunDirArgs,
}

#[derive(Args, Clone)]
struct TrainCommonArgs {
    #[arg(long)]
    train_data: PathBuf,
    /// Optional structured-text config file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training preset: desk, crosstask_base, crosstask_how, niv, coin.
    #[arg(long, default_value = "desk")]
    preset: String,
    #[arg(long)]
    horizons: Option<String>,
    /// Task conditioning: none, concat, mask.
    #[arg(long)]
    task_cond: Option<String>,
    /// Horizon conditioning: none, concat.
    #[arg(long)]
    horizon_cond: Option<String>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    diffusion_steps: Option<usize>,
    #[arg(long)]
    lr_peak: Option<f32>,
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long)]
    weight_w: Option<f32>,
    #[arg(long)]
    cfg_dropout: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Backbone variant: unet3, unet_attn2, transformer12.
    #[arg(long, default_value = "unet3")]
    variant: String,
    /// Dim preset: desk, full, tiny.
    #[arg(long, default_value = "desk")]
    dims: String,
    /// Mixture-of-experts: none or `site,routing`
    /// (site: attention|convolution; routing: direct|learned).
    #[arg(long, default_value = "none")]
    moe: String,
    /// Zero the goal observation and use the ground-truth task label.
    #[arg(long, default_value_t = false)]
    vpa: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: TrainCommonArgs,
    #[command(flatten)]
    run: RunDirArgs,
}

#[derive(Args)]
struct TrainEndpointArgs {
    #[command(flatten)]
    common: TrainCommonArgs,
    /// Full-plan horizon whose records feed the endpoint model.
    #[arg(long)]
    horizon: usize,
    #[command(flatten)]
    run: RunDirArgs,
}

#[derive(Args, Clone)]
struct SamplerArgs {
    /// Sampling method: ddpm or ddim.
    #[arg(long, default_value = "ddim")]
    method: String,
    #[arg(long, default_value_t = 10)]
    ddim_steps: usize,
    #[arg(long, default_value_t = 0.0)]
    eta: f64,
    #[arg(long)]
    cfg_lambda: Option<f32>,
    /// Baseline mode: none, deterministic, noise.
    #[arg(long, default_value = "none")]
    baseline: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SamplerArgs {
    fn build(&self) -> Result<SamplerConfig> {
        Ok(SamplerConfig {
            method: Method::parse(&self.method)?,
            ddim_steps: self.ddim_steps,
            eta: self.eta,
            cfg_lambda: self.cfg_lambda,
            baseline: BaselineMode::parse(&self.baseline)?,
            num_samples: 1,
            seed: self.seed,
        })
    }
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Task classifier checkpoint; omit to use ground-truth task labels.
    #[arg(long)]
    classifier: Option<PathBuf>,
    #[arg(long, default_value_t = false)]
    gt_task: bool,
    #[arg(long, default_value_t = false)]
    vpa: bool,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[command(flatten)]
    run: RunDirArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Re-score an existing prediction dump instead of sampling.
    #[arg(long)]
    preds: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    classifier: Option<PathBuf>,
    #[arg(long, default_value_t = false)]
    gt_task: bool,
    #[arg(long, default_value_t = false)]
    vpa: bool,
    /// mIoU pooling batch size (1 is the reported standard).
    #[arg(long, default_value_t = 1)]
    batch_size: usize,
    /// Also compute the probabilistic suite with this many samples/query.
    #[arg(long)]
    prob_samples: Option<usize>,
    /// Sampling seeds; metrics average over them.
    #[arg(long, value_delimiter = ',', default_value = "101,202,303")]
    eval_seeds: Vec<u64>,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[command(flatten)]
    run: RunDirArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    classifier: Option<PathBuf>,
    #[arg(long, default_value_t = false)]
    gt_task: bool,
    #[arg(long, default_value_t = false)]
    vpa: bool,
    /// Guidance scales to sweep, e.g. `0,0.3,1,3`.
    #[arg(long, value_delimiter = ',')]
    cfg_lambda: Option<Vec<f32>>,
    /// Horizons to sweep.
    #[arg(long, value_delimiter = ',')]
    horizons: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',', default_value = "101,202,303")]
    eval_seeds: Vec<u64>,
    /// Sampling method: ddpm or ddim.
    #[arg(long, default_value = "ddim")]
    method: String,
    #[arg(long, default_value_t = 10)]
    ddim_steps: usize,
    #[arg(long, default_value_t = 0.0)]
    eta: f64,
    /// Baseline mode: none, deterministic, noise.
    #[arg(long, default_value = "none")]
    baseline: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    run: RunDirArgs,
}

#[derive(Args)]
struct PipelineArgs {
    /// Synthetic benchmark: toy, standard, multi-mode.
    #[arg(long, default_value = "toy")]
    benchmark: String,
    #[command(flatten)]
    common: TrainCommonArgs2,
    #[command(flatten)]
    run: RunDirArgs,
}

/// Reduced training knobs for the pipeline command (no data file involved).
#[derive(Args, Clone)]
struct TrainCommonArgs2 {
    #[arg(long)]
    horizons: Option<String>,
    #[arg(long)]
    task_cond: Option<String>,
    #[arg(long)]
    horizon_cond: Option<String>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = false)]
    vpa: bool,
    #[arg(long, default_value_t = false)]
    gt_task: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

/// PDPP_SEED overrides any configured seed.
fn env_seed(seed: u64) -> u64 {
    match std::env::var("PDPP_SEED") {
        Ok(v) => v.parse().unwrap_or(seed),
        Err(_) => seed,
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::TrainClassifier(args) => cmd_train_classifier(args),
        Command::Train(args) => cmd_train(args),
        Command::TrainEndpoint(args) => cmd_train_endpoint(args),
        Command::Sample(args) => cmd_sample(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Pipeline(args) => cmd_pipeline(args),
    }
}

fn make_run_dir(root: &Path, config_text: &str) -> Result<PathBuf> {
    let dir = root.join(run_dir_name(config_text));
    ensure_dir(&dir)
}

fn finish_run(
    dir: &Path,
    command: &str,
    config_text: String,
    seed: u64,
    timer: &RunTimer,
    outputs: Vec<String>,
    metrics: BTreeMap<String, String>,
) -> Result<()> {
    let manifest = RunManifest {
        command: command.to_string(),
        config_text,
        seed,
        wall_clock_secs: timer.secs(),
        outputs,
        metrics,
    };
    manifest.write(&dir.join("manifest.txt"))?;
    println!("run dir: {}", dir.display());
    Ok(())
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let timer = RunTimer::start();
    let seed = env_seed(args.seed);
    let synth = SyntheticConfig {
        n_tasks: args.tasks,
        n_actions: args.actions,
        actions_per_task: args.actions_per_task,
        transition_alpha: args.transition_alpha,
        obs_dim: args.obs_dim,
        obs_noise: args.obs_noise,
        videos_per_task: args.videos_per_task,
        video_len: (args.min_actions, args.max_actions),
        seed,
    };
    let config_text = format!(
        "command = gen-data\nseed = {seed}\ntasks = {}\nactions = {}\nactions_per_task = {}\ntransition_alpha = {}\nobs_dim = {}\nobs_noise = {}\nvideos_per_task = {}\nvideo_len = {}..{}\nhorizons = {:?}\nratio = {}\n",
        synth.n_tasks,
        synth.n_actions,
        synth.actions_per_task,
        synth.transition_alpha,
        synth.obs_dim,
        synth.obs_noise,
        synth.videos_per_task,
        synth.video_len.0,
        synth.video_len.1,
        args.horizons,
        args.ratio
    );
    let dir = make_run_dir(&args.run.out_root, &config_text)?;
    let (_, train, test) = make_datasets(&synth, &args.horizons, args.ratio, seed)?;
    let train_path = dir.join("train.pdpp");
    let test_path = dir.join("test.pdpp");
    write_dataset(&train_path, &train)?;
    write_dataset(&test_path, &test)?;
    println!(
        "wrote {} train / {} test records",
        train.records.len(),
        test.records.len()
    );
    let mut metrics = BTreeMap::new();
    metrics.insert("train_records".into(), train.records.len().to_string());
    metrics.insert("test_records".into(), test.records.len().to_string());
    finish_run(
        &dir,
        "gen-data",
        config_text,
        seed,
        &timer,
        vec![
            train_path.display().to_string(),
            test_path.display().to_string(),
        ],
        metrics,
    )
}

fn cmd_train_classifier(args: TrainClassifierArgs) -> Result<()> {
    let timer = RunTimer::start();
    let seed = env_seed(args.seed);
    let train = read_dataset(&args.train_data)?;
    let test = read_dataset(&args.test_data)?;
    let config_text = format!(
        "command = train-classifier\nseed = {seed}\nepochs = {}\nlr = {}\nbatch_size = {}\nhidden = {}\n",
        args.epochs, args.lr, args.batch_size, args.hidden
    );
    let dir = make_run_dir(&args.run.out_root, &config_text)?;
    let mut clf = TaskClassifier::with_hidden(train.meta.obs_dim, train.meta.n_tasks, args.hidden, seed);
    let report = train_classifier(
        &mut clf,
        &train.records,
        &test.records,
        args.epochs,
        args.lr,
        args.batch_size,
        seed,
    )?;
    let out = dir.join("classifier.ckpt");
    clf.save(&out)?;
    println!(
        "classifier accuracy: train {:.4}, heldout {:.4}",
        report.train_accuracy, report.heldout_accuracy
    );
    let mut metrics = BTreeMap::new();
    metrics.insert("train_accuracy".into(), format!("{:.6}", report.train_accuracy));
    metrics.insert(
        "heldout_accuracy".into(),
        format!("{:.6}", report.heldout_accuracy),
    );
    finish_run(
        &dir,
        "train-classifier",
        config_text,
        seed,
        &timer,
        vec![out.display().to_string()],
        metrics,
    )
}

fn resolve_train_config(common: &TrainCommonArgs) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(path) => TrainConfig::from_text(&std::fs::read_to_string(path)?)?,
        None => TrainConfig::preset(&common.preset)?,
    };
    if let Some(h) = &common.horizons {
        cfg.set_field("horizons", h)?;
    }
    if let Some(t) = &common.task_cond {
        cfg.set_field("task_mode", t)?;
    }
    if let Some(h) = &common.horizon_cond {
        cfg.set_field("horizon_mode", h)?;
    }
    if let Some(s) = common.steps {
        cfg.total_steps = s;
    }
    if let Some(b) = common.batch_size {
        cfg.batch_size = b;
    }
    if let Some(d) = common.diffusion_steps {
        cfg.diffusion_steps = d;
    }
    if let Some(lr) = common.lr_peak {
        cfg.lr_peak = lr;
    }
    if let Some(w) = common.warmup {
        cfg.warmup_steps = w;
    }
    if let Some(w) = common.weight_w {
        cfg.weight_w = w;
    }
    if let Some(p) = common.cfg_dropout {
        cfg.cfg_dropout_p = p;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.seed = env_seed(cfg.seed);
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_dims(variant: &str, dims: &str) -> Result<ModelDims> {
    match (variant, dims) {
        ("unet3", "desk") => Ok(ModelDims::desk_unet3()),
        ("unet3", "full") => Ok(ModelDims::full_unet3()),
        ("unet_attn2", "desk") => Ok(ModelDims::desk_unet_attn2()),
        ("unet_attn2", "full") => Ok(ModelDims::full_unet_attn2()),
        ("transformer12", "desk") => Ok(ModelDims::desk_transformer()),
        ("transformer12", "full") => Ok(ModelDims::full_transformer12()),
        ("transformer12", "tiny") => Ok(ModelDims::tiny_transformer()),
        (_, "tiny") => Ok(ModelDims::tiny_unet()),
        (v, d) => Err(Error::UnknownName {
            kind: "dims preset",
            name: format!("{v}/{d}"),
            known: "desk, full, tiny per variant".to_string(),
        }),
    }
}

fn train_common(
    common: &TrainCommonArgs,
    run: &RunDirArgs,
    endpoint_horizon: Option<usize>,
) -> Result<()> {
    let timer = RunTimer::start();
    let cfg = resolve_train_config(common)?;
    let dims = resolve_dims(&common.variant, &common.dims)?;
    let moe = MoeConfig::parse(&common.moe)?;
    let dataset = read_dataset(&common.train_data)?;
    let command = if endpoint_horizon.is_some() {
        "train-endpoint"
    } else {
        "train"
    };
    let config_text = format!(
        "command = {command}\nvariant = {}\ndims = {}\nmoe = {}\nvpa = {}\nendpoint_horizon = {:?}\n{}",
        common.variant,
        common.dims,
        common.moe,
        common.vpa,
        endpoint_horizon,
        cfg.to_text()
    );
    let dir = make_run_dir(&run.out_root, &config_text)?;

    let trainer = match endpoint_horizon {
        Some(t) => proplan_core::pipeline::train_endpoint_model(
            &dataset,
            &cfg,
            t,
            &common.variant,
            dims,
            common.vpa,
        )?,
        None => proplan_core::pipeline::train_diffusion(
            &dataset,
            &cfg,
            &common.variant,
            dims,
            moe,
            common.vpa,
        )?,
    };
    let out = dir.join("model.ckpt");
    save_model(&out, &trainer.model, &cfg.schedule, cfg.diffusion_steps)?;
    println!(
        "trained {} ({} parameters) for {} steps",
        trainer.model.variant(),
        trainer.model.param_count(),
        trainer.step
    );
    let mut metrics = BTreeMap::new();
    metrics.insert("param_count".into(), trainer.model.param_count().to_string());
    metrics.insert("steps".into(), trainer.step.to_string());
    finish_run(
        &dir,
        command,
        config_text,
        cfg.seed,
        &timer,
        vec![out.display().to_string()],
        metrics,
    )
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    train_common(&args.common, &args.run, None)
}

fn cmd_train_endpoint(args: TrainEndpointArgs) -> Result<()> {
    train_common(&args.common, &args.run, Some(args.horizon))
}

struct LoadedModel {
    model: DenoiserModel,
    sched: proplan_core::schedule::NoiseSchedule,
}

fn load_model_with_schedule(path: &Path) -> Result<LoadedModel> {
    let (model, sched_name, sched_n) = load_model(path)?;
    let sched = build_schedule(&sched_name, sched_n)?;
    Ok(LoadedModel { model, sched })
}

fn task_source<'a>(
    classifier: &'a Option<TaskClassifier>,
    gt_task: bool,
    vpa: bool,
) -> Result<TaskSource<'a>> {
    if gt_task || vpa {
        return Ok(TaskSource::GroundTruth);
    }
    match classifier {
        Some(clf) => Ok(TaskSource::Classifier(clf)),
        None => Err(Error::invalid(
            "task condition",
            "provide --classifier or pass --gt-task (VPA mode implies ground truth)",
        )),
    }
}

fn cmd_sample(args: SampleArgs) -> Result<()> {
    let timer = RunTimer::start();
    let seed = env_seed(args.sampler.seed);
    let loaded = load_model_with_schedule(&args.model)?;
    let dataset = read_dataset(&args.data)?;
    let scfg = SamplerConfig {
        seed,
        ..args.sampler.build()?
    };
    let clf = match &args.classifier {
        Some(p) => Some(TaskClassifier::load(p)?),
        None => None,
    };
    let source = task_source(&clf, args.gt_task, args.vpa)?;
    let config_text = format!(
        "command = sample\nmodel = {}\ndata = {}\nmethod = {}\nddim_steps = {}\neta = {}\ncfg_lambda = {:?}\nbaseline = {}\nseed = {seed}\nvpa = {}\n",
        args.model.display(),
        args.data.display(),
        args.sampler.method,
        args.sampler.ddim_steps,
        args.sampler.eta,
        args.sampler.cfg_lambda,
        args.sampler.baseline,
        args.vpa
    );
    let dir = make_run_dir(&args.run.out_root, &config_text)?;

    let task_map = dataset.meta.task_action_map().ok().filter(|_| {
        loaded.model.layout.task_mode == TaskMode::Mask
    });
    let settings = EvalSettings {
        sampler: scfg,
        task_source: source,
        task_map: task_map.as_ref(),
        vpa: args.vpa,
        seeds: vec![seed],
    };
    // Sample per horizon present in the data, preserving record order.
    let mut all_tasks = Vec::new();
    let mut all_plans = Vec::new();
    for t in horizons_in(&dataset) {
        let queries: Vec<_> = dataset
            .records
            .iter()
            .filter(|r| r.horizon() == t)
            .cloned()
            .collect();
        let outcome = evaluate_model(&loaded.model, &loaded.sched, &queries, &settings)?;
        all_tasks.extend(outcome.tasks);
        all_plans.extend(outcome.predictions);
    }
    let out = dir.join("preds.tsv");
    write_predictions(&out, &all_tasks, &all_plans)?;
    println!("wrote {} plans", all_plans.len());
    finish_run(
        &dir,
        "sample",
        config_text,
        seed,
        &timer,
        vec![out.display().to_string()],
        BTreeMap::new(),
    )
}

fn horizons_in(dataset: &Dataset) -> Vec<usize> {
    let mut hs: Vec<usize> = dataset.records.iter().map(|r| r.horizon()).collect();
    hs.sort_unstable();
    hs.dedup();
    hs
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let timer = RunTimer::start();
    let dataset = read_dataset(&args.data)?;
    let seed = env_seed(args.sampler.seed);

    let config_text = format!(
        "command = eval\ndata = {}\npreds = {:?}\nmodel = {:?}\nbatch_size = {}\nprob_samples = {:?}\nseed = {seed}\n",
        args.data.display(),
        args.preds,
        args.model,
        args.batch_size,
        args.prob_samples
    );
    let dir = make_run_dir(&args.run.out_root, &config_text)?;
    let mut outputs = Vec::new();
    let mut metrics = BTreeMap::new();
    let mut report_text = String::new();

    if let Some(preds_path) = &args.preds {
        // Offline re-scoring of a prediction dump.
        let preds = read_predictions(preds_path)?;
        if preds.len() != dataset.records.len() {
            return Err(Error::Shape {
                op: "eval",
                dim: "prediction count",
                got: preds.len(),
                expected: dataset.records.len(),
            });
        }
        let plans: Vec<Vec<usize>> = preds.iter().map(|(_, p)| p.clone()).collect();
        let gts: Vec<Vec<usize>> = dataset.records.iter().map(|r| r.actions.clone()).collect();
        let sr = success_rate(&plans, &gts)?;
        let macc = proplan_core::evaluation::mean_accuracy(&plans, &gts)?;
        let m_iou = miou(&plans, &gts, args.batch_size)?;
        report_text = format!(
            "sr = {sr:.4}\nmacc = {macc:.4}\nmiou = {m_iou:.4}\nbatch_size = {}\n#machine\tsr={sr:.6}\tmacc={macc:.6}\tmiou={m_iou:.6}\tbatch_size={}\n",
            args.batch_size, args.batch_size
        );
        metrics.insert("sr".into(), format!("{sr:.6}"));
        metrics.insert("macc".into(), format!("{macc:.6}"));
        metrics.insert("miou".into(), format!("{m_iou:.6}"));
    } else if let Some(model_path) = &args.model {
        let loaded = load_model_with_schedule(model_path)?;
        let clf = match &args.classifier {
            Some(p) => Some(TaskClassifier::load(p)?),
            None => None,
        };
        let source = task_source(&clf, args.gt_task, args.vpa)?;
        let task_map = dataset
            .meta
            .task_action_map()
            .ok()
            .filter(|_| loaded.model.layout.task_mode == TaskMode::Mask);
        let scfg = SamplerConfig {
            seed,
            ..args.sampler.build()?
        };
        let settings = EvalSettings {
            sampler: scfg,
            task_source: source,
            task_map: task_map.as_ref(),
            vpa: args.vpa,
            seeds: args.eval_seeds.clone(),
        };
        for t in horizons_in(&dataset) {
            let queries: Vec<_> = dataset
                .records
                .iter()
                .filter(|r| r.horizon() == t)
                .cloned()
                .collect();
            let outcome = evaluate_model(&loaded.model, &loaded.sched, &queries, &settings)?;
            let mut report: EvalReport = outcome.report;
            if let Some(count) = args.prob_samples {
                let groups = group_queries(&queries);
                let prob =
                    evaluate_probabilistic(&loaded.model, &loaded.sched, &groups, count, &settings, seed)?;
                report.prob = Some(prob);
                report.samples_per_query = count;
            }
            report_text.push_str(&report.render());
            metrics.insert(format!("sr_t{t}"), format!("{:.6}", report.sr));
            metrics.insert(format!("macc_t{t}"), format!("{:.6}", report.m_acc));
            metrics.insert(format!("miou_t{t}"), format!("{:.6}", report.m_iou));
        }
    } else {
        return Err(Error::invalid("eval", "provide either --preds or --model"));
    }

    print!("{report_text}");
    let report_path = dir.join("report.txt");
    std::fs::write(&report_path, &report_text)?;
    outputs.push(report_path.display().to_string());
    finish_run(&dir, "eval", config_text, seed, &timer, outputs, metrics)
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let timer = RunTimer::start();
    let loaded = load_model_with_schedule(&args.model)?;
    let dataset = read_dataset(&args.data)?;
    let seed = env_seed(args.seed);
    let clf = match &args.classifier {
        Some(p) => Some(TaskClassifier::load(p)?),
        None => None,
    };
    let source = task_source(&clf, args.gt_task, args.vpa)?;
    let task_map = dataset
        .meta
        .task_action_map()
        .ok()
        .filter(|_| loaded.model.layout.task_mode == TaskMode::Mask);

    let config_text = format!(
        "command = sweep\nmodel = {}\ndata = {}\ncfg_lambda = {:?}\nhorizons = {:?}\nseed = {seed}\n",
        args.model.display(),
        args.data.display(),
        args.cfg_lambda,
        args.horizons
    );
    let dir = make_run_dir(&args.run.out_root, &config_text)?;
    let base = SamplerConfig {
        method: Method::parse(&args.method)?,
        ddim_steps: args.ddim_steps,
        eta: args.eta,
        cfg_lambda: None,
        baseline: BaselineMode::parse(&args.baseline)?,
        num_samples: 1,
        seed,
    };

    let mut report_text = String::new();
    let mut metrics = BTreeMap::new();
    let mut run_eval = |label: String, scfg: SamplerConfig, horizon: Option<usize>| -> Result<()> {
        for t in horizons_in(&dataset) {
            if let Some(only) = horizon {
                if t != only {
                    continue;
                }
            }
            let queries: Vec<_> = dataset
                .records
                .iter()
                .filter(|r| r.horizon() == t)
                .cloned()
                .collect();
            if queries.is_empty() {
                continue;
            }
            let settings = EvalSettings {
                sampler: scfg.clone(),
                task_source: source,
                task_map: task_map.as_ref(),
                vpa: args.vpa,
                seeds: args.eval_seeds.clone(),
            };
            let outcome = evaluate_model(&loaded.model, &loaded.sched, &queries, &settings)?;
            report_text.push_str(&format!("## {label} T={t}\n"));
            report_text.push_str(&outcome.report.render());
            metrics.insert(
                format!("{label}_t{t}_sr"),
                format!("{:.6}", outcome.report.sr),
            );
        }
        Ok(())
    };

    if let Some(lambdas) = &args.cfg_lambda {
        for &l in lambdas {
            let scfg = SamplerConfig {
                cfg_lambda: Some(l),
                ..base.clone()
            };
            run_eval(format!("lambda={l}"), scfg, None)?;
        }
    } else if let Some(horizons) = &args.horizons {
        for &t in horizons {
            run_eval(format!("horizon={t}"), base.clone(), Some(t))?;
        }
    } else {
        return Err(Error::invalid(
            "sweep",
            "provide --cfg-lambda or --horizons to sweep",
        ));
    }

    print!("{report_text}");
    let report_path = dir.join("sweep.txt");
    std::fs::write(&report_path, &report_text)?;
    finish_run(
        &dir,
        "sweep",
        config_text,
        seed,
        &timer,
        vec![report_path.display().to_string()],
        metrics,
    )
}

fn cmd_pipeline(args: PipelineArgs) -> Result<()> {
    let timer = RunTimer::start();
    let mut cfg = PipelineConfig::desk_toy();
    match args.benchmark.as_str() {
        "toy" => {}
        "standard" => cfg.synth = SyntheticConfig::standard(),
        "multi-mode" => cfg.synth = SyntheticConfig::multi_mode(),
        other => {
            return Err(Error::UnknownName {
                kind: "benchmark",
                name: other.to_string(),
                known: "toy, standard, multi-mode".to_string(),
            })
        }
    }
    if let Some(h) = &args.common.horizons {
        cfg.train.set_field("horizons", h)?;
    }
    if let Some(t) = &args.common.task_cond {
        cfg.train.set_field("task_mode", t)?;
    }
    if let Some(h) = &args.common.horizon_cond {
        cfg.train.set_field("horizon_mode", h)?;
    }
    if let Some(s) = args.common.steps {
        cfg.train.total_steps = s;
    }
    if let Some(s) = args.common.seed {
        cfg.train.seed = s;
    }
    cfg.train.seed = env_seed(cfg.train.seed);
    cfg.synth.seed = cfg.train.seed;
    cfg.vpa = args.common.vpa;
    cfg.gt_task = args.common.gt_task;

    let config_text = format!(
        "command = pipeline\nbenchmark = {}\nvpa = {}\ngt_task = {}\n{}",
        args.benchmark,
        cfg.vpa,
        cfg.gt_task,
        cfg.train.to_text()
    );
    let dir = make_run_dir(&args.run.out_root, &config_text)?;

    let outcome = end_to_end_pipeline(&cfg)?;
    let mut metrics = BTreeMap::new();
    let mut report_text = String::new();
    println!(
        "classifier heldout accuracy: {:.4}",
        outcome.classifier_report.heldout_accuracy
    );
    for (t, r) in &outcome.reports {
        print!("{}", r.render());
        report_text.push_str(&r.render());
        metrics.insert(format!("sr_t{t}"), format!("{:.6}", r.sr));
    }
    metrics.insert(
        "classifier_heldout".into(),
        format!("{:.6}", outcome.classifier_report.heldout_accuracy),
    );
    let model_path = dir.join("model.ckpt");
    save_model(
        &model_path,
        &outcome.trainer.model,
        &cfg.train.schedule,
        cfg.train.diffusion_steps,
    )?;
    let clf_path = dir.join("classifier.ckpt");
    outcome.classifier.save(&clf_path)?;
    let report_path = dir.join("report.txt");
    std::fs::write(&report_path, &report_text)?;
    finish_run(
        &dir,
        "pipeline",
        config_text,
        cfg.train.seed,
        &timer,
        vec![
            model_path.display().to_string(),
            clf_path.display().to_string(),
            report_path.display().to_string(),
        ],
        metrics,
    )
}
