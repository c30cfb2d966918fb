//! Noise-prediction models.
//!
//! [`GaussianMixtureDenoiser`] has an exact closed-form score and serves as a
//! verification oracle. [`ToyAttentionDenoiser`] is a small self-attention
//! denoiser whose pre-softmax logits can be read and rewritten through a
//! [`LogitHook`], which is what attention modulation plugs into.

mod gmm;
mod toy;
pub mod weights;

pub use gmm::GaussianMixtureDenoiser;
pub use toy::{ToyAttentionDenoiser, ToyConfig};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SowError};
use crate::grid::LatentGrid;
use crate::schedule::NoiseSchedule;

/// Desk-scale stand-in for a text prompt: a class id plus its guidance weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionVector {
    pub class_id: u32,
    pub guidance_scale: f64,
    /// When set, the guidance baseline is this class instead of the empty condition.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negative_class: Option<u32>,
}

impl ConditionVector {
    pub fn new(class_id: u32, guidance_scale: f64) -> Result<Self> {
        if !(guidance_scale >= 0.0 && guidance_scale.is_finite()) {
            return Err(SowError::invalid(format!(
                "guidance_scale must be finite and >= 0, got {guidance_scale}"
            )));
        }
        Ok(Self {
            class_id,
            guidance_scale,
            negative_class: None,
        })
    }

    pub fn with_negative(mut self, class_id: u32) -> Self {
        self.negative_class = Some(class_id);
        self
    }
}

/// Receives one layer's logits `A` (`heads x queries x keys`) before the
/// softmax and returns the logits to use instead.
pub trait LogitHook {
    fn apply(&mut self, layer: usize, logits: Array3<f64>) -> Array3<f64>;
}

impl<F> LogitHook for F
where
    F: FnMut(usize, Array3<f64>) -> Array3<f64>,
{
    fn apply(&mut self, layer: usize, logits: Array3<f64>) -> Array3<f64> {
        self(layer, logits)
    }
}

/// An epsilon-prediction model.
///
/// Implementations are deterministic in `(x_t, t, condition)` and return a
/// grid shaped like `x_t`.
pub trait DenoiserModel: Send + Sync {
    fn predict_eps(
        &self,
        schedule: &NoiseSchedule,
        x_t: &LatentGrid,
        t: usize,
        condition: Option<&ConditionVector>,
    ) -> Result<LatentGrid>;

    /// Same as [`predict_eps`](Self::predict_eps) with a logit hook installed on
    /// every self-attention layer. Models without attention ignore the hook.
    fn predict_eps_hooked(
        &self,
        schedule: &NoiseSchedule,
        x_t: &LatentGrid,
        t: usize,
        condition: Option<&ConditionVector>,
        _hook: &mut dyn LogitHook,
    ) -> Result<LatentGrid> {
        self.predict_eps(schedule, x_t, t, condition)
    }

    fn attention_layers(&self) -> usize {
        0
    }
}

/// Classifier-free guidance: `eps_uncond + s * (eps_cond - eps_uncond)`.
///
/// Without a condition this is the plain unconditional prediction. Scales of
/// exactly 0 and 1 return the corresponding branch unmixed. A negative class,
/// if present, replaces the empty condition as the baseline branch.
pub fn cfg_predict_eps(
    model: &dyn DenoiserModel,
    schedule: &NoiseSchedule,
    x_t: &LatentGrid,
    t: usize,
    condition: Option<&ConditionVector>,
    mut hook: Option<&mut dyn LogitHook>,
) -> Result<LatentGrid> {
    let mut eval = |cond: Option<&ConditionVector>| match hook.as_deref_mut() {
        Some(h) => model.predict_eps_hooked(schedule, x_t, t, cond, h),
        None => model.predict_eps(schedule, x_t, t, cond),
    };
    let Some(cond) = condition else {
        return eval(None);
    };
    let baseline = cond.negative_class.map(|class_id| ConditionVector {
        class_id,
        guidance_scale: 1.0,
        negative_class: None,
    });
    let scale = cond.guidance_scale;
    if scale == 0.0 {
        return eval(baseline.as_ref());
    }
    if scale == 1.0 {
        return eval(Some(cond));
    }
    let eps_uncond = eval(baseline.as_ref())?;
    let eps_cond = eval(Some(cond))?;
    let diff = eps_cond.axpby(1.0, &eps_uncond, -1.0)?;
    eps_uncond.axpby(1.0, &diff, scale)
}

/// Checks a model output before it is used downstream.
pub(crate) fn ensure_finite(eps: LatentGrid, t: usize) -> Result<LatentGrid> {
    if eps.is_finite() {
        Ok(eps)
    } else {
        Err(SowError::NumericalDivergence {
            step: t,
            detail: "denoiser produced a non-finite value".into(),
        })
    }
}
