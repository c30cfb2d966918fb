//! Discrete noise schedules and the forward / noise-jump kernels.
//!
//! Timesteps are *positions* on the schedule: position `0` is clean data
//! (`alpha_bar = 1`), position `t` in `1..=num_steps` is the state after `t`
//! forward steps and uses `betas[t - 1]` / `alpha_bars[t - 1]`. This matches
//! the usual `1..T` numbering of diffusion steps, with arrays stored 0-based.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SowError};
use crate::grid::LatentGrid;

/// Parameters of a linear beta schedule, as they appear in config files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub num_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            num_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.num_steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear betas from `beta_start` to `beta_end`, both endpoints included.
    pub fn linear(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if num_steps == 0 {
            return Err(SowError::invalid("num_steps must be at least 1"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(SowError::invalid(format!(
                "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let betas = if num_steps == 1 {
            vec![beta_start]
        } else {
            let span = beta_end - beta_start;
            let last = (num_steps - 1) as f64;
            (0..num_steps)
                .map(|i| beta_start + span * i as f64 / last)
                .collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(SowError::invalid("schedule needs at least one beta"));
        }
        if let Some((i, b)) = betas
            .iter()
            .enumerate()
            .find(|(_, &b)| !(b > 0.0 && b < 1.0))
        {
            return Err(SowError::invalid(format!("beta[{i}] = {b} outside (0, 1)")));
        }
        let alpha_bars = betas
            .iter()
            .scan(1.0, |acc, &b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_position(&self, t: usize) -> Result<()> {
        if t > self.num_steps() {
            Err(SowError::InvalidTimestep {
                t,
                reason: format!("schedule has {} steps", self.num_steps()),
            })
        } else {
            Ok(())
        }
    }

    /// Cumulative signal fraction at position `t`; `1` at the data end.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_position(t)?;
        Ok(if t == 0 { 1.0 } else { self.alpha_bars[t - 1] })
    }

    /// Variance added by the single forward step into position `t` (`t >= 1`).
    pub fn beta(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Err(SowError::InvalidTimestep {
                t,
                reason: "no forward step leads into the data end".into(),
            });
        }
        self.check_position(t)?;
        Ok(self.betas[t - 1])
    }

    /// One Markov forward step `x_{t-1} -> x_t`:
    /// `sqrt(1 - beta_t) x + sqrt(beta_t) noise`.
    pub fn forward_step(&self, x: &LatentGrid, t: usize, noise: &LatentGrid) -> Result<LatentGrid> {
        x.ensure_same_shape(noise, "forward_step noise")?;
        let beta = self.beta(t)?;
        x.axpby((1.0 - beta).sqrt(), noise, beta.sqrt())
    }

    /// Jumps `x` from position `from_t` to `to_t > from_t` in one shot:
    /// `sqrt(r) x + sqrt(1 - r) noise` with `r = alpha_bar(to) / alpha_bar(from)`.
    pub fn jump_noise(
        &self,
        x: &LatentGrid,
        from_t: usize,
        to_t: usize,
        noise: &LatentGrid,
    ) -> Result<LatentGrid> {
        if to_t <= from_t {
            return Err(SowError::invalid(format!(
                "jump_noise needs to_t > from_t, got {from_t} -> {to_t}"
            )));
        }
        x.ensure_same_shape(noise, "jump_noise noise")?;
        let ratio = self.alpha_bar(to_t)? / self.alpha_bar(from_t)?;
        x.axpby(ratio.sqrt(), noise, (1.0 - ratio).sqrt())
    }
}

/// A coarse user-facing step grid laid over the full schedule by uniform striding.
///
/// Coarse step `k` sits at schedule position `k * stride`, so on the default
/// 10-step grid over 1000 positions coarse step 7 is position 700 and coarse
/// step 0 is the data end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepGrid {
    pub coarse_steps: usize,
    pub stride: usize,
}

impl StepGrid {
    pub fn new(schedule: &NoiseSchedule, coarse_steps: usize) -> Result<Self> {
        let total = schedule.num_steps();
        if coarse_steps == 0 || coarse_steps > total {
            return Err(SowError::invalid(format!(
                "coarse step count {coarse_steps} must lie in 1..={total}"
            )));
        }
        if !total.is_multiple_of(coarse_steps) {
            return Err(SowError::invalid(format!(
                "coarse step count {coarse_steps} does not divide {total} schedule steps"
            )));
        }
        Ok(Self {
            coarse_steps,
            stride: total / coarse_steps,
        })
    }

    pub fn position(&self, coarse: usize) -> Result<usize> {
        if coarse > self.coarse_steps {
            return Err(SowError::InvalidTimestep {
                t: coarse,
                reason: format!("coarse grid has {} steps", self.coarse_steps),
            });
        }
        Ok(coarse * self.stride)
    }

    /// Schedule positions from coarse `lo` up to coarse `hi`, inclusive and ascending.
    pub fn positions(&self, lo: usize, hi: usize) -> Result<Vec<usize>> {
        if lo > hi {
            return Err(SowError::invalid(format!("empty coarse range {lo}..={hi}")));
        }
        (lo..=hi).map(|k| self.position(k)).collect()
    }
}
