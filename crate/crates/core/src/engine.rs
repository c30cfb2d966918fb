//! The generation loop: seed canvas, cyclic one-way diffusion with gated
//! attention modulation, then a stochastic finish that pins the condition.
//!
//! Timesteps in [`EngineConfig`] are coarse-grid indices; they are mapped to
//! schedule positions through a [`StepGrid`].

use std::time::Instant;

use log::{debug, info};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention_mod::{ModulationConfig, RegionModulator};
use crate::denoiser::{cfg_predict_eps, ConditionVector, DenoiserModel, LogitHook};
use crate::error::{Result, SowError, StageExt};
use crate::grid::{LatentGrid, RegionBox};
use crate::planner::{self, MllmClient, PlanOutcome, PlannerConfig, PlannerRequest, PromptTemplates};
use crate::raster;
use crate::sampler::{ddim_update, invert_and_store, inversion_steps, LatentTrajectory};
use crate::schedule::{NoiseSchedule, StepGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Normal,
    AttributeEditing,
    StyleTransfer,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Normal, Preset::AttributeEditing, Preset::StyleTransfer];

    /// `(t3, eta)` for the preset.
    pub fn schedule(self) -> (Vec<usize>, f64) {
        match self {
            Preset::Normal => (vec![4, 3], 0.0),
            Preset::AttributeEditing => (vec![4], 0.1),
            Preset::StyleTransfer => (vec![4], 1.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Normal => "normal",
            Preset::AttributeEditing => "attribute_editing",
            Preset::StyleTransfer => "style_transfer",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = SowError;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                SowError::invalid(format!(
                    "unknown preset `{s}` (expected normal, attribute_editing or style_transfer)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackgroundKind {
    Gray,
    Black,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub cycles: usize,
    pub t1: usize,
    pub t2: usize,
    /// Overrides the preset's preservation steps when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t3: Option<Vec<usize>>,
    /// Overrides the preset's eta when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    pub preset: Preset,
    pub background: BackgroundKind,
    /// Where each noise jump lands; `t2` when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jump_target: Option<usize>,
    /// Turns the gated attention modulation on or off.
    pub modulation: bool,
    pub guidance_scale: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            cycles: 10,
            t1: 5,
            t2: 7,
            t3: None,
            eta: None,
            preset: Preset::Normal,
            background: BackgroundKind::Gray,
            jump_target: None,
            modulation: true,
            guidance_scale: 1.0,
        }
    }
}

impl EngineConfig {
    pub fn with_preset(preset: Preset) -> Self {
        Self {
            preset,
            ..Self::default()
        }
    }

    pub fn t3(&self) -> Vec<usize> {
        let mut t3 = self.t3.clone().unwrap_or_else(|| self.preset.schedule().0);
        t3.sort_unstable_by(|a, b| b.cmp(a));
        t3.dedup();
        t3
    }

    pub fn eta(&self) -> f64 {
        self.eta.unwrap_or_else(|| self.preset.schedule().1)
    }

    pub fn jump_target(&self) -> usize {
        self.jump_target.unwrap_or(self.t2)
    }

    pub fn validate(&self, grid: &StepGrid) -> Result<()> {
        if !(self.t1 < self.t2 && self.t2 <= grid.coarse_steps) {
            return Err(SowError::invalid(format!(
                "need 0 <= t1 < t2 <= {}, got t1={} t2={}",
                grid.coarse_steps, self.t1, self.t2
            )));
        }
        if let Some(bad) = self.t3().into_iter().find(|&t| t >= self.t1) {
            return Err(SowError::invalid(format!(
                "preservation step {bad} must be below t1={}",
                self.t1
            )));
        }
        let eta = self.eta();
        if !(0.0..=1.0).contains(&eta) {
            return Err(SowError::invalid(format!("eta must lie in [0, 1], got {eta}")));
        }
        let jt = self.jump_target();
        if jt < self.t2 || jt > grid.coarse_steps {
            return Err(SowError::invalid(format!(
                "jump_target {jt} must lie in [t2, {}]",
                grid.coarse_steps
            )));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(SowError::invalid("guidance_scale must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Pastes `v0` into `box_v` of a `channels x height x width` canvas filled
/// with the background. The codec is the identity, so this is also the
/// seed latent.
pub fn seed_initialize<R: Rng + ?Sized>(
    v0: &LatentGrid,
    box_v: &RegionBox,
    background: BackgroundKind,
    shape: (usize, usize, usize),
    rng: &mut R,
) -> Result<LatentGrid> {
    let (c, h, w) = shape;
    let mut canvas = match background {
        BackgroundKind::Gray => LatentGrid::filled(c, h, w, raster::GRAY),
        BackgroundKind::Black => LatentGrid::filled(c, h, w, -1.0),
        BackgroundKind::Random => LatentGrid::from_array(Array3::from_shape_fn((c, h, w), |_| {
            rng.random_range(-1.0..=1.0)
        })),
    };
    if box_v.area() == 0 {
        return Ok(canvas);
    }
    box_v.check_inside(canvas.token_grid())?;
    canvas.paste(box_v, v0)?;
    Ok(canvas)
}

/// Overwrites `box_v` of `x_t` with `v_t`; both must belong to the same timestep.
pub fn replace_region(
    x_t: &LatentGrid,
    t_x: usize,
    v_t: &LatentGrid,
    t_v: usize,
    box_v: &RegionBox,
) -> Result<LatentGrid> {
    if t_x != t_v {
        return Err(SowError::contract(format!(
            "replacing the region of x at t={t_x} with v at t={t_v}"
        )));
    }
    let mut out = x_t.clone();
    out.copy_region_from(v_t, box_v)?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Cycle,
    Preserve,
}

/// One visited timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: Phase,
    pub cycle: usize,
    /// Coarse-grid timestep the state sits at before the step.
    pub t: usize,
    pub replaced: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rc: Option<f64>,
    pub modulated: bool,
    /// Hash of the working latent after any replacement at this step.
    pub latent_hash: String,
}

/// The working latent right after a replacement, for external checks.
pub struct ReplacementView<'a> {
    pub phase: Phase,
    pub cycle: usize,
    pub t: usize,
    pub x: &'a LatentGrid,
    pub v: &'a LatentGrid,
    pub box_v: &'a RegionBox,
}

pub type Observer<'a> = &'a mut dyn FnMut(&ReplacementView<'_>);

/// Shared inputs of a run.
pub struct Pipeline<'a> {
    pub model: &'a dyn DenoiserModel,
    pub schedule: &'a NoiseSchedule,
    pub grid: StepGrid,
    pub engine: &'a EngineConfig,
    pub modulation: &'a ModulationConfig,
}

/// Per-run trace plus timing.
#[derive(Debug, Clone, Default)]
pub struct RunTrace {
    pub steps: Vec<StepRecord>,
    pub cycle_ms: Vec<f64>,
}

/// Records layer 0's logits of the first forward pass it sees.
struct Capture {
    logits: Option<Array3<f64>>,
}

impl LogitHook for Capture {
    fn apply(&mut self, layer: usize, logits: Array3<f64>) -> Array3<f64> {
        if layer == 0 && self.logits.is_none() {
            self.logits = Some(logits.clone());
        }
        logits
    }
}

impl Pipeline<'_> {
    fn pos(&self, coarse: usize) -> Result<usize> {
        self.grid.position(coarse)
    }

    /// Inverts the seed canvas and keeps `v_t` for every coarse step the run needs.
    pub fn invert(&self, seed_canvas: &LatentGrid, cond: Option<&ConditionVector>) -> Result<LatentTrajectory> {
        let e = self.engine;
        let top = e.jump_target().max(e.t2);
        let lo = e.t3().last().copied().unwrap_or(e.t1).min(e.t1);
        let steps = inversion_steps(&self.grid, top)?;
        let fine = invert_and_store(
            self.model,
            self.schedule,
            seed_canvas,
            self.pos(lo)?,
            self.pos(top)?,
            cond,
            &steps,
        )?;
        // re-key by coarse index
        let mut out = LatentTrajectory::default();
        for (p, v) in fine.iter() {
            out.insert(p / self.grid.stride, v.clone());
        }
        if e.t3().contains(&0) {
            out.insert(0, seed_canvas.clone());
        }
        Ok(out)
    }

    /// One deterministic step `t -> t - 1` in the cycle band, modulated when
    /// the gate opens.
    fn cycle_step(
        &self,
        x: &LatentGrid,
        t: usize,
        cycle: usize,
        cond: Option<&ConditionVector>,
        modulator: Option<&RegionModulator>,
    ) -> Result<(LatentGrid, Option<f64>, bool)> {
        let (pt, pp) = (self.pos(t)?, self.pos(t - 1)?);
        let mut capture = Capture { logits: None };
        let eps_plain = cfg_predict_eps(self.model, self.schedule, x, pt, cond, Some(&mut capture))?;
        let mut rc = None;
        let mut eps = eps_plain;
        let mut modulated = false;
        if let (Some(m), Some(logits)) = (modulator, capture.logits.as_ref()) {
            let value = m.rc(logits)?;
            if value.defined {
                rc = Some(value.value);
                if value.value > m.config.tau {
                    let (p_plus, p_minus) = m.offsets(cycle);
                    let r = value.value;
                    let cfg = m.config;
                    let mut hook = |_layer: usize, a: Array3<f64>| {
                        let dim = a.dim();
                        crate::attention_mod::modulate(a, &p_plus, &p_minus, r, &cfg)
                            .unwrap_or_else(|_| Array3::zeros(dim))
                    };
                    eps = cfg_predict_eps(self.model, self.schedule, x, pt, cond, Some(&mut hook))?;
                    modulated = true;
                }
            }
        }
        let next = ddim_update(self.schedule, x, &eps, pt, pp, 0.0, None)?;
        if !next.is_finite() {
            return Err(SowError::NumericalDivergence {
                step: t,
                detail: format!("latent became non-finite in cycle {cycle}"),
            });
        }
        Ok((next, rc, modulated))
    }

    /// Cyclic one-way diffusion; returns `x` at coarse step `t1`.
    #[allow(clippy::too_many_arguments)]
    pub fn run_cow(
        &self,
        trajectory: &LatentTrajectory,
        box_v: &RegionBox,
        modulator: Option<&RegionModulator>,
        cond: Option<&ConditionVector>,
        rng: &mut ChaCha8Rng,
        trace: &mut RunTrace,
        mut observer: Option<Observer<'_>>,
    ) -> Result<LatentGrid> {
        let e = self.engine;
        if e.cycles == 0 {
            return Ok(trajectory.require(e.t1)?.clone());
        }
        let mut x = trajectory.require(e.t2)?.clone();
        let mut top = e.t2;
        for cycle in 0..e.cycles {
            let started = Instant::now();
            for t in (e.t1..=top).rev() {
                let v = trajectory.require(t)?;
                x = replace_region(&x, t, v, t, box_v)?;
                if let Some(obs) = observer.as_deref_mut() {
                    obs(&ReplacementView {
                        phase: Phase::Cycle,
                        cycle,
                        t,
                        x: &x,
                        v,
                        box_v,
                    });
                }
                let hash = x.content_hash();
                if t == e.t1 {
                    trace.steps.push(StepRecord {
                        phase: Phase::Cycle,
                        cycle,
                        t,
                        replaced: true,
                        rc: None,
                        modulated: false,
                        latent_hash: hash,
                    });
                    break;
                }
                let (next, rc, modulated) = self.cycle_step(&x, t, cycle, cond, modulator)?;
                debug!("cycle {cycle} t={t} rc={rc:?} modulated={modulated}");
                trace.steps.push(StepRecord {
                    phase: Phase::Cycle,
                    cycle,
                    t,
                    replaced: true,
                    rc,
                    modulated,
                    latent_hash: hash,
                });
                x = next;
            }
            if cycle + 1 < e.cycles {
                top = e.jump_target();
                let noise = x.noise_like(rng);
                x = self.schedule.jump_noise(&x, self.pos(e.t1)?, self.pos(top)?, &noise)?;
            }
            trace.cycle_ms.push(started.elapsed().as_secs_f64() * 1e3);
        }
        Ok(x)
    }

    /// Stochastic finish from `t1` to the data end, replacing `box_v` at every
    /// step listed in `t3`.
    #[allow(clippy::too_many_arguments)]
    pub fn preserve_and_finish(
        &self,
        x_t1: &LatentGrid,
        trajectory: &LatentTrajectory,
        box_v: &RegionBox,
        cond: Option<&ConditionVector>,
        rng: &mut ChaCha8Rng,
        trace: &mut RunTrace,
        mut observer: Option<Observer<'_>>,
    ) -> Result<LatentGrid> {
        let e = self.engine;
        let t3 = e.t3();
        let eta = e.eta();
        let mut x = x_t1.clone();
        for t in (0..=e.t1).rev() {
            let replaced = t3.contains(&t);
            if replaced {
                let v = trajectory.require(t)?;
                x = replace_region(&x, t, v, t, box_v)?;
                if let Some(obs) = observer.as_deref_mut() {
                    obs(&ReplacementView {
                        phase: Phase::Preserve,
                        cycle: e.cycles,
                        t,
                        x: &x,
                        v,
                        box_v,
                    });
                }
            }
            trace.steps.push(StepRecord {
                phase: Phase::Preserve,
                cycle: e.cycles,
                t,
                replaced,
                rc: None,
                modulated: false,
                latent_hash: x.content_hash(),
            });
            if t == 0 {
                break;
            }
            let (pt, pp) = (self.pos(t)?, self.pos(t - 1)?);
            let eps = cfg_predict_eps(self.model, self.schedule, &x, pt, cond, None)?;
            let noise = if eta > 0.0 { Some(x.noise_like(rng)) } else { None };
            x = ddim_update(self.schedule, &x, &eps, pt, pp, eta, noise.as_ref())?;
            if !x.is_finite() {
                return Err(SowError::NumericalDivergence {
                    step: t,
                    detail: "latent became non-finite in the final phase".into(),
                });
            }
        }
        Ok(x)
    }
}

/// Maps a text prompt onto a class id (stable across runs and platforms).
pub fn prompt_condition(prompt: &str, guidance_scale: f64) -> Result<ConditionVector> {
    let digest = Sha256::digest(prompt.as_bytes());
    let id = u32::from_le_bytes([digest[0], digest[1], digest[2], digest[3]]);
    ConditionVector::new(id, guidance_scale)
}

/// Run record written next to the output image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub seed: u64,
    pub preset: Preset,
    /// Echo of the full run configuration.
    pub config: serde_json::Value,
    pub plan: PlanOutcome,
    pub token_box_v: RegionBox,
    pub token_box_r: RegionBox,
    pub condition: ConditionVector,
    pub t3: Vec<usize>,
    pub eta: f64,
    pub steps: Vec<StepRecord>,
    pub trajectory_hashes: Vec<(usize, String)>,
    pub seed_hash: String,
    pub output_hash: String,
    pub timings: Timings,
    /// SHA-256 of this manifest without `timings` and `content_hash`.
    pub content_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub cycle_ms: Vec<f64>,
    pub total_ms: f64,
}

impl Manifest {
    pub fn compute_content_hash(&self) -> Result<String> {
        let mut value = serde_json::to_value(self)?;
        if let Some(map) = value.as_object_mut() {
            map.remove("timings");
            map.remove("content_hash");
        }
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&value)?)))
    }
}

pub struct Generation {
    pub output: LatentGrid,
    pub manifest: Manifest,
    pub trajectory: LatentTrajectory,
}

/// Everything `generate` needs besides the request.
pub struct Generator<'a> {
    pub model: &'a dyn DenoiserModel,
    pub schedule: &'a NoiseSchedule,
    pub grid: StepGrid,
    pub engine: EngineConfig,
    pub modulation: ModulationConfig,
    pub planner: PlannerConfig,
    pub templates: PromptTemplates,
    pub client: Option<&'a dyn MllmClient>,
    /// Shape of the working latent.
    pub latent_shape: (usize, usize, usize),
    /// Resample a condition that does not fit `box_v` instead of failing.
    pub resize_condition: bool,
}

impl Generator<'_> {
    pub fn generate(
        &self,
        request: &PlannerRequest,
        seed: u64,
        config_echo: serde_json::Value,
        observer: Option<Observer<'_>>,
    ) -> Result<Generation> {
        let started = Instant::now();
        self.engine.validate(&self.grid).stage("config")?;
        self.modulation.validate().stage("config")?;
        let (c, h, w) = self.latent_shape;
        let tokens = crate::grid::TokenGrid::new(h, w);
        let stride = self.planner.stride(tokens).stage("plan")?;
        let plan = planner::plan(request, &self.planner, stride, self.client, &self.templates).stage("plan")?;
        let (box_v, box_r) = plan.result.token_boxes(stride).stage("plan")?;
        info!("plan box_v={:?} box_r={:?} fallback={}", box_v, box_r, plan.fallback);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (_, ch, cw) = request.condition_image.shape();
        let resized;
        let condition = if self.resize_condition && (ch, cw) != (box_v.h, box_v.w) && box_v.area() > 0 {
            info!("resampling condition {ch}x{cw} to {}x{}", box_v.h, box_v.w);
            resized = raster::resample_nearest(&request.condition_image, box_v.h, box_v.w).stage("seed")?;
            &resized
        } else {
            &request.condition_image
        };
        let seed_canvas = seed_initialize(
            condition,
            &box_v,
            self.engine.background,
            (c, h, w),
            &mut rng,
        )
        .stage("seed")?;
        let cond = prompt_condition(&plan.result.intensified_prompt, self.engine.guidance_scale)?;
        let pipeline = Pipeline {
            model: self.model,
            schedule: self.schedule,
            grid: self.grid,
            engine: &self.engine,
            modulation: &self.modulation,
        };
        let trajectory = pipeline.invert(&seed_canvas, Some(&cond)).stage("invert")?;
        let modulator = if self.engine.modulation && self.model.attention_layers() > 0 {
            Some(RegionModulator::new(box_v, box_r, tokens, self.modulation).stage("modulation")?)
        } else {
            None
        };
        let mut trace = RunTrace::default();
        let mut observer = observer;
        let x_t1 = pipeline
            .run_cow(
                &trajectory,
                &box_v,
                modulator.as_ref(),
                Some(&cond),
                &mut rng,
                &mut trace,
                observer
                    .as_mut()
                    .map(|o| &mut **o as &mut dyn FnMut(&ReplacementView<'_>)),
            )
            .stage("cycle")?;
        let output = pipeline
            .preserve_and_finish(&x_t1, &trajectory, &box_v, Some(&cond), &mut rng, &mut trace, observer)
            .stage("preserve")?;

        let mut manifest = Manifest {
            format: "sow-manifest/1".into(),
            seed,
            preset: self.engine.preset,
            config: config_echo,
            plan,
            token_box_v: box_v,
            token_box_r: box_r,
            condition: cond,
            t3: self.engine.t3(),
            eta: self.engine.eta(),
            steps: trace.steps,
            trajectory_hashes: trajectory.iter().map(|(t, v)| (*t, v.content_hash())).collect(),
            seed_hash: seed_canvas.content_hash(),
            output_hash: output.content_hash(),
            timings: Timings {
                cycle_ms: trace.cycle_ms,
                total_ms: started.elapsed().as_secs_f64() * 1e3,
            },
            content_hash: String::new(),
        };
        manifest.content_hash = manifest.compute_content_hash()?;
        Ok(Generation {
            output,
            manifest,
            trajectory,
        })
    }
}
