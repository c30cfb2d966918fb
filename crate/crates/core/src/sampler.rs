//! Reverse steps (deterministic and stochastic DDIM) and ODE inversion.
//!
//! All timesteps are schedule positions (see [`crate::schedule`]).

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{cfg_predict_eps, ConditionVector, DenoiserModel, LogitHook};
use crate::error::{Result, SowError};
use crate::grid::LatentGrid;
use crate::schedule::{NoiseSchedule, StepGrid};

/// Stochasticity `eta` plus the ordered list of timesteps a pass visits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub eta: f64,
    pub steps: Vec<usize>,
}

impl SamplerConfig {
    pub fn new(eta: f64, steps: Vec<usize>) -> Result<Self> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(SowError::invalid(format!("eta must lie in [0, 1], got {eta}")));
        }
        let ascending = steps.windows(2).all(|w| w[0] < w[1]);
        let descending = steps.windows(2).all(|w| w[0] > w[1]);
        if !(ascending || descending) {
            return Err(SowError::invalid("sampler steps must be strictly monotone"));
        }
        Ok(Self { eta, steps })
    }

    /// Descending sampling grid from coarse step `from` down to coarse step `to`.
    pub fn descending(eta: f64, grid: &StepGrid, from: usize, to: usize) -> Result<Self> {
        let mut steps = grid.positions(to, from)?;
        steps.reverse();
        Self::new(eta, steps)
    }
}

fn check_pair(schedule: &NoiseSchedule, t: usize, t_prev: usize) -> Result<(f64, f64)> {
    if t_prev > t {
        return Err(SowError::InvalidTimestep {
            t: t_prev,
            reason: format!("reverse step must not move up from {t}"),
        });
    }
    let ab = schedule.alpha_bar(t)?;
    let ab_prev = schedule.alpha_bar(t_prev)?;
    if ab <= 0.0 {
        return Err(SowError::InvalidTimestep {
            t,
            reason: "alpha_bar is zero".into(),
        });
    }
    Ok((ab, ab_prev))
}

/// DDIM variance `sigma^2 = eta^2 (1 - ab_prev)/(1 - ab) (1 - ab/ab_prev)`.
pub fn ddim_variance(schedule: &NoiseSchedule, t: usize, t_prev: usize, eta: f64) -> Result<f64> {
    let (ab, ab_prev) = check_pair(schedule, t, t_prev)?;
    if t == t_prev {
        return Ok(0.0);
    }
    Ok(eta * eta * (1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev))
}

/// The DDIM update for a given noise prediction. `noise` is only read when
/// `eta > 0`.
pub fn ddim_update(
    schedule: &NoiseSchedule,
    x_t: &LatentGrid,
    eps: &LatentGrid,
    t: usize,
    t_prev: usize,
    eta: f64,
    noise: Option<&LatentGrid>,
) -> Result<LatentGrid> {
    let (ab, ab_prev) = check_pair(schedule, t, t_prev)?;
    if t == t_prev {
        return Ok(x_t.clone());
    }
    let x0 = x_t.axpby(1.0 / ab.sqrt(), eps, -(1.0 - ab).sqrt() / ab.sqrt())?;
    if eta == 0.0 {
        return x0.axpby(ab_prev.sqrt(), eps, (1.0 - ab_prev).sqrt());
    }
    let var = ddim_variance(schedule, t, t_prev, eta)?;
    let noise = noise.ok_or_else(|| SowError::invalid("stochastic step needs a noise grid"))?;
    x_t.ensure_same_shape(noise, "ddim noise")?;
    let dir = (1.0 - ab_prev - var).max(0.0).sqrt();
    x0.axpby(ab_prev.sqrt(), eps, dir)?.axpby(1.0, noise, var.sqrt())
}

fn ensure_step_finite(x: LatentGrid, step: usize) -> Result<LatentGrid> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(SowError::NumericalDivergence {
            step,
            detail: "latent became non-finite".into(),
        })
    }
}

/// Deterministic reverse step `x_t -> x_{t_prev}` (`eta = 0`).
pub fn ddim_step(
    model: &dyn DenoiserModel,
    schedule: &NoiseSchedule,
    x_t: &LatentGrid,
    t: usize,
    t_prev: usize,
    cond: Option<&ConditionVector>,
) -> Result<LatentGrid> {
    ddim_step_hooked(model, schedule, x_t, t, t_prev, cond, None)
}

/// Deterministic reverse step with an attention-logit hook on the model.
pub fn ddim_step_hooked(
    model: &dyn DenoiserModel,
    schedule: &NoiseSchedule,
    x_t: &LatentGrid,
    t: usize,
    t_prev: usize,
    cond: Option<&ConditionVector>,
    hook: Option<&mut dyn LogitHook>,
) -> Result<LatentGrid> {
    check_pair(schedule, t, t_prev)?;
    if t == t_prev {
        return Ok(x_t.clone());
    }
    let eps = cfg_predict_eps(model, schedule, x_t, t, cond, hook)?;
    ensure_step_finite(ddim_update(schedule, x_t, &eps, t, t_prev, 0.0, None)?, t)
}

/// Stochastic reverse step with DDIM variance scaled by `eta`.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step_stochastic(
    model: &dyn DenoiserModel,
    schedule: &NoiseSchedule,
    x_t: &LatentGrid,
    t: usize,
    t_prev: usize,
    cond: Option<&ConditionVector>,
    eta: f64,
    noise: &LatentGrid,
) -> Result<LatentGrid> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(SowError::invalid(format!("eta must lie in [0, 1], got {eta}")));
    }
    check_pair(schedule, t, t_prev)?;
    if t == t_prev {
        return Ok(x_t.clone());
    }
    let eps = cfg_predict_eps(model, schedule, x_t, t, cond, None)?;
    ensure_step_finite(
        ddim_update(schedule, x_t, &eps, t, t_prev, eta, Some(noise))?,
        t,
    )
}

/// Runs a descending step list. Noise for stochastic steps is drawn from
/// `rng` only when `eta > 0`.
pub fn sample<R: Rng + ?Sized>(
    model: &dyn DenoiserModel,
    schedule: &NoiseSchedule,
    x: &LatentGrid,
    cfg: &SamplerConfig,
    cond: Option<&ConditionVector>,
    rng: &mut R,
) -> Result<LatentGrid> {
    if cfg.steps.windows(2).any(|w| w[0] <= w[1]) {
        return Err(SowError::invalid("sampling steps must be descending"));
    }
    let mut x = x.clone();
    for w in cfg.steps.windows(2) {
        x = if cfg.eta == 0.0 {
            ddim_step(model, schedule, &x, w[0], w[1], cond)?
        } else {
            let noise = x.noise_like(rng);
            ddim_step_stochastic(model, schedule, &x, w[0], w[1], cond, cfg.eta, &noise)?
        };
    }
    Ok(x)
}

/// Ascending positions of `grid` from the data end up to `target_t`.
pub fn inversion_steps(grid: &StepGrid, target_coarse: usize) -> Result<Vec<usize>> {
    grid.positions(0, target_coarse)
}

/// Integrates the probability-flow ODE from `x_0` up to `target_t` with the
/// reversed DDIM recursion over `steps` (ascending positions starting at 0).
///
/// Each hop `t -> t_next` evaluates the model at `t_next` on the current
/// latent, the usual explicit DDIM inversion, so the model is never queried at
/// the data end itself.
pub fn ode_invert(
    model: &dyn DenoiserModel,
    schedule: &NoiseSchedule,
    x_0: &LatentGrid,
    target_t: usize,
    cond: Option<&ConditionVector>,
    steps: &[usize],
) -> Result<LatentGrid> {
    let mut out = None;
    invert_walk(model, schedule, x_0, target_t, cond, steps, |_, x| {
        out = Some(x.clone());
    })?;
    Ok(out.unwrap_or_else(|| x_0.clone()))
}

fn invert_walk(
    model: &dyn DenoiserModel,
    schedule: &NoiseSchedule,
    x_0: &LatentGrid,
    target_t: usize,
    cond: Option<&ConditionVector>,
    steps: &[usize],
    mut visit: impl FnMut(usize, &LatentGrid),
) -> Result<()> {
    if !x_0.is_finite() {
        return Err(SowError::invalid("inversion input is not finite"));
    }
    if steps.first() != Some(&0) || steps.windows(2).any(|w| w[0] >= w[1]) {
        return Err(SowError::invalid(
            "inversion steps must ascend strictly from position 0",
        ));
    }
    if !steps.contains(&target_t) {
        return Err(SowError::InvalidTimestep {
            t: target_t,
            reason: "inversion target is not on the step grid".into(),
        });
    }
    let mut x = x_0.clone();
    visit(0, &x);
    for (i, w) in steps.windows(2).enumerate() {
        let (t, t_next) = (w[0], w[1]);
        if t >= target_t {
            break;
        }
        let ab = schedule.alpha_bar(t)?;
        let ab_next = schedule.alpha_bar(t_next)?;
        let eps = cfg_predict_eps(model, schedule, &x, t_next, cond, None)
            .map_err(|e| match e {
                SowError::NumericalDivergence { detail, .. } => {
                    SowError::NumericalDivergence { step: i, detail }
                }
                other => other,
            })?;
        let x0 = x.axpby(1.0 / ab.sqrt(), &eps, -(1.0 - ab).sqrt() / ab.sqrt())?;
        x = x0.axpby(ab_next.sqrt(), &eps, (1.0 - ab_next).sqrt())?;
        if !x.is_finite() {
            return Err(SowError::NumericalDivergence {
                step: i,
                detail: format!("inversion latent became non-finite at t={t_next}"),
            });
        }
        visit(t_next, &x);
    }
    Ok(())
}

/// Inverted latents `v_t` for every grid timestep in `[t1, t2]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LatentTrajectory {
    latents: BTreeMap<usize, LatentGrid>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrajectoryManifest {
    format: String,
    timesteps: Vec<usize>,
    files: Vec<String>,
    hashes: Vec<String>,
}

impl LatentTrajectory {
    pub fn get(&self, t: usize) -> Option<&LatentGrid> {
        self.latents.get(&t)
    }

    pub fn require(&self, t: usize) -> Result<&LatentGrid> {
        self.get(t).ok_or_else(|| {
            SowError::contract(format!("trajectory holds no latent for timestep {t}"))
        })
    }

    pub fn timesteps(&self) -> Vec<usize> {
        self.latents.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    pub fn insert(&mut self, t: usize, latent: LatentGrid) {
        self.latents.insert(t, latent);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&usize, &LatentGrid)> {
        self.latents.iter()
    }

    /// Writes `v_{t}.bin` per timestep plus `manifest.json` into `dir`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = TrajectoryManifest {
            format: "sow-trajectory/1".into(),
            timesteps: Vec::new(),
            files: Vec::new(),
            hashes: Vec::new(),
        };
        for (t, v) in &self.latents {
            let name = format!("v_{t}.bin");
            v.write_bin(BufWriter::new(fs::File::create(dir.join(&name))?))?;
            manifest.timesteps.push(*t);
            manifest.files.push(name);
            manifest.hashes.push(v.content_hash());
        }
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }

    pub fn import(dir: &Path) -> Result<Self> {
        let manifest: TrajectoryManifest =
            serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let mut out = Self::default();
        for ((t, file), hash) in manifest
            .timesteps
            .iter()
            .zip(&manifest.files)
            .zip(&manifest.hashes)
        {
            let v = LatentGrid::read_bin(BufReader::new(fs::File::open(dir.join(file))?))?;
            if &v.content_hash() != hash {
                return Err(SowError::invalid(format!("hash mismatch for {file}")));
            }
            out.insert(*t, v);
        }
        Ok(out)
    }
}

/// Inverts `v_0` up to `t2`, keeping every grid latent with `t1 <= t <= t2`.
pub fn invert_and_store(
    model: &dyn DenoiserModel,
    schedule: &NoiseSchedule,
    v_0: &LatentGrid,
    t1: usize,
    t2: usize,
    cond: Option<&ConditionVector>,
    steps: &[usize],
) -> Result<LatentTrajectory> {
    if t1 > t2 {
        return Err(SowError::invalid(format!("need t1 <= t2, got {t1} > {t2}")));
    }
    if !steps.contains(&t1) {
        return Err(SowError::InvalidTimestep {
            t: t1,
            reason: "t1 is not on the step grid".into(),
        });
    }
    let mut traj = LatentTrajectory::default();
    invert_walk(model, schedule, v_0, t2, cond, steps, |t, x| {
        if (t1..=t2).contains(&t) {
            traj.insert(t, x.clone());
        }
    })?;
    Ok(traj)
}
