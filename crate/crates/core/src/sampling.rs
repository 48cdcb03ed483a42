//! Plan sampling: the DDPM and DDIM loops with condition projection at every
//! step, classifier-free-guided variants, two-stage inference, and the
//! deterministic / noise ablation baselines.

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::conditioning::{
    extract_plan, extract_plan_masked, ConditionSet, Projector, TaskActionMap, TaskMode,
};
use crate::denoiser::DenoiserModel;
use crate::error::{Error, Result};
use crate::numerics::array::{axpby, Array};
use crate::schedule::{ddim_step, ddim_timesteps, ddpm_posterior, NoiseSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Ddpm,
    Ddim,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Ddpm => "ddpm",
            Method::Ddim => "ddim",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        match s {
            "ddpm" => Ok(Method::Ddpm),
            "ddim" => Ok(Method::Ddim),
            other => Err(Error::UnknownName {
                kind: "sampling method",
                name: other.to_string(),
                known: "ddpm, ddim".to_string(),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineMode {
    None,
    /// x_N = 0 and a noise-free chain: a deterministic function of the
    /// conditions.
    Deterministic,
    /// A single model call at n = N (no diffusion chain).
    Noise,
}

impl BaselineMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            BaselineMode::None => "none",
            BaselineMode::Deterministic => "deterministic",
            BaselineMode::Noise => "noise",
        }
    }

    pub fn parse(s: &str) -> Result<BaselineMode> {
        match s {
            "none" => Ok(BaselineMode::None),
            "deterministic" => Ok(BaselineMode::Deterministic),
            "noise" => Ok(BaselineMode::Noise),
            other => Err(Error::UnknownName {
                kind: "baseline mode",
                name: other.to_string(),
                known: "none, deterministic, noise".to_string(),
            }),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SamplerConfig {
    pub method: Method,
    pub ddim_steps: usize,
    pub eta: f64,
    /// Classifier-free guidance scale; None is plain conditional sampling,
    /// 0 short-circuits to the conditional branch and -1 to the
    /// unconditional branch so both equalities are exact.
    pub cfg_lambda: Option<f32>,
    pub baseline: BaselineMode,
    pub num_samples: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            method: Method::Ddim,
            ddim_steps: 10,
            eta: 0.0,
            cfg_lambda: None,
            baseline: BaselineMode::None,
            num_samples: 1,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if let Some(l) = self.cfg_lambda {
            if l < -1.0 {
                return Err(Error::invalid("sampler", "cfg lambda must be >= -1"));
            }
        }
        if self.method == Method::Ddim
            && (self.ddim_steps == 0 || self.ddim_steps > sched.n_steps())
        {
            return Err(Error::invalid(
                "sampler",
                format!(
                    "ddim steps {} outside 1..={}",
                    self.ddim_steps,
                    sched.n_steps()
                ),
            ));
        }
        Ok(())
    }
}

struct Guided<'a> {
    model: &'a DenoiserModel,
    projector: Projector,
    uncond: Option<(ConditionSet, Projector)>,
    lambda: Option<f32>,
}

impl<'a> Guided<'a> {
    fn new(
        model: &'a DenoiserModel,
        cond: &ConditionSet,
        task_map: Option<&TaskActionMap>,
        lambda: Option<f32>,
    ) -> Result<Guided<'a>> {
        let projector = Projector::new(cond, &model.layout, task_map)?;
        let uncond = match lambda {
            Some(l) if l != 0.0 => {
                let u = cond.unconditional();
                let p = Projector::new(&u, &model.layout, task_map)?;
                Some((u, p))
            }
            _ => None,
        };
        Ok(Guided {
            model,
            projector,
            uncond,
            lambda,
        })
    }

    /// Project the state, assert the projection contract, and predict x0
    /// (guided when a lambda is configured).
    fn predict(&self, x: &Array, n: usize) -> Result<(Array, Array)> {
        let state = self.projector.apply(x);
        if !self.projector.condition_rows_match(&state) {
            return Err(Error::invalid(
                "sampler",
                "projection contract violated: condition rows drifted",
            ));
        }
        let x0_c = match self.lambda {
            Some(-1.0) => {
                // pure unconditional prediction; skip the conditional branch
                let (_, up) = self.uncond.as_ref().unwrap();
                let u_state = up.apply(x);
                return Ok((self.model.denoise(&u_state, n)?, state));
            }
            _ => self.model.denoise(&state, n)?,
        };
        let x0 = match (self.lambda, &self.uncond) {
            (Some(l), Some((_, up))) if l != 0.0 && l != -1.0 => {
                let u_state = up.apply(x);
                let x0_u = self.model.denoise(&u_state, n)?;
                // x0_c + l (x0_c - x0_u)
                axpby(1.0 + l, &x0_c, -l, &x0_u)
            }
            _ => x0_c,
        };
        Ok((x0, state))
    }

    fn extract(&self, x0: &Array, cond: &ConditionSet, task_map: Option<&TaskActionMap>) -> Vec<usize> {
        let layout = &self.model.layout;
        let final_state = self.projector.apply(x0);
        match (layout.task_mode, cond.task, task_map) {
            (TaskMode::Mask, Some(task), Some(map)) => {
                extract_plan_masked(&final_state, layout, cond.horizon, map.actions(task))
            }
            _ => extract_plan(&final_state, layout, cond.horizon),
        }
    }
}

/// Sample one plan. Returns the extracted action ids and the final
/// (projected) x0 prediction.
pub fn sample_plan(
    model: &DenoiserModel,
    cond: &ConditionSet,
    sched: &NoiseSchedule,
    scfg: &SamplerConfig,
    task_map: Option<&TaskActionMap>,
    rng: &mut ChaCha12Rng,
) -> Result<(Vec<usize>, Array)> {
    scfg.validate(sched)?;
    let guided = Guided::new(model, cond, task_map, scfg.cfg_lambda)?;
    let shape = [model.layout.rows(), cond.horizon];
    let deterministic = scfg.baseline == BaselineMode::Deterministic;

    let mut x = if deterministic {
        Array::zeros(&shape)
    } else {
        Array::randn(&shape, rng)
    };

    let n_steps = sched.n_steps();
    let x0_final = match scfg.baseline {
        BaselineMode::Noise => {
            // one-shot denoising from the start distribution
            let (x0, _) = guided.predict(&x, n_steps)?;
            x0
        }
        _ => match scfg.method {
            Method::Ddpm => {
                let mut x0_hat = None;
                for n in (1..=n_steps).rev() {
                    let (x0, state) = guided.predict(&x, n)?;
                    if n > 1 {
                        let (mu, var) = ddpm_posterior(&x0, &state, n, sched)?;
                        x = if deterministic {
                            mu
                        } else {
                            let z = Array::randn(&shape, rng);
                            axpby(1.0, &mu, (var.sqrt()) as f32, &z)
                        };
                    } else {
                        x0_hat = Some(x0);
                    }
                }
                x0_hat.unwrap()
            }
            Method::Ddim => {
                let ts = ddim_timesteps(n_steps, scfg.ddim_steps)?;
                let eta = if deterministic { 0.0 } else { scfg.eta };
                let mut x0_hat = None;
                for idx in (0..ts.len()).rev() {
                    let t_n = ts[idx];
                    let (x0, state) = guided.predict(&x, t_n)?;
                    if idx > 0 {
                        let t_prev = ts[idx - 1];
                        let noise = if eta > 0.0 {
                            Array::randn(&shape, rng)
                        } else {
                            Array::zeros(&shape)
                        };
                        x = ddim_step(&x0, &state, t_n, t_prev, eta, sched, &noise)?;
                    } else {
                        x0_hat = Some(x0);
                    }
                }
                x0_hat.unwrap()
            }
        },
    };

    let plan = guided.extract(&x0_final, cond, task_map);
    let final_state = guided.projector.apply(&x0_final);
    Ok((plan, final_state))
}

/// Classifier-free-guided sampling; `sample_plan` with a guidance scale.
pub fn sample_cfg(
    model: &DenoiserModel,
    cond: &ConditionSet,
    sched: &NoiseSchedule,
    lambda: f32,
    scfg: &SamplerConfig,
    task_map: Option<&TaskActionMap>,
    rng: &mut ChaCha12Rng,
) -> Result<(Vec<usize>, Array)> {
    let cfg = SamplerConfig {
        cfg_lambda: Some(lambda),
        ..scfg.clone()
    };
    sample_plan(model, cond, sched, &cfg, task_map, rng)
}

/// Two-stage inference: sample {a_1, a_T} from the 2-column endpoint model,
/// then condition the interior model on them. Positions 1 and T of the final
/// plan equal stage 1's outputs exactly (enforced by projection).
pub fn two_stage_plan(
    endpoint_model: &DenoiserModel,
    interior_model: &DenoiserModel,
    cond: &ConditionSet,
    sched: &NoiseSchedule,
    scfg: &SamplerConfig,
    task_map: Option<&TaskActionMap>,
    rng: &mut ChaCha12Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if cond.endpoint_actions.is_some() {
        return Err(Error::invalid(
            "two_stage_plan",
            "condition set already carries endpoint actions",
        ));
    }
    let stage1_cond = ConditionSet::new(
        cond.start_obs.clone(),
        cond.goal_obs.clone(),
        cond.task,
        2,
    );
    let (endpoints, _) = sample_plan(endpoint_model, &stage1_cond, sched, scfg, task_map, rng)?;
    let mut full_cond = cond.clone();
    full_cond.endpoint_actions = Some((endpoints[0], endpoints[1]));
    let (plan, _) = sample_plan(interior_model, &full_cond, sched, scfg, task_map, rng)?;
    Ok((plan, endpoints))
}

/// Independent sampling chains with per-chain substreams derived from the
/// master rng; returns all plans with multiplicities.
pub fn sample_many(
    model: &DenoiserModel,
    cond: &ConditionSet,
    count: usize,
    sched: &NoiseSchedule,
    scfg: &SamplerConfig,
    task_map: Option<&TaskActionMap>,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<Vec<usize>>> {
    if count == 0 {
        return Err(Error::invalid("sample_many", "count must be >= 1"));
    }
    let seeds: Vec<u64> = (0..count).map(|_| rng.next_u64()).collect();
    let mut plans = Vec::with_capacity(count);
    for seed in seeds {
        let mut chain_rng = ChaCha12Rng::seed_from_u64(seed);
        let (plan, _) = sample_plan(model, cond, sched, scfg, task_map, &mut chain_rng)?;
        plans.push(plan);
    }
    Ok(plans)
}
