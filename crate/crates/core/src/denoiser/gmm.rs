use crate::error::{Result, SowError};
use crate::grid::LatentGrid;
use crate::schedule::NoiseSchedule;

use super::{ensure_finite, ConditionVector, DenoiserModel};

/// Isotropic Gaussian mixture over grid-shaped data with an exact noise prediction.
///
/// Under the forward process each component `N(mu_i, s_i^2 I)` becomes
/// `N(sqrt(ab) mu_i, (ab s_i^2 + 1 - ab) I)`, so the posterior mean of `x_0`
/// and therefore the optimal epsilon are available in closed form.
///
/// A condition selects component `class_id % n` on its own.
#[derive(Debug, Clone)]
pub struct GaussianMixtureDenoiser {
    weights: Vec<f64>,
    means: Vec<LatentGrid>,
    variances: Vec<f64>,
}

impl GaussianMixtureDenoiser {
    pub fn new(weights: Vec<f64>, means: Vec<LatentGrid>, variances: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != variances.len() {
            return Err(SowError::invalid(
                "mixture needs matching, nonempty weights, means and variances",
            ));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(SowError::invalid("mixture weights must be nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(SowError::invalid(format!("mixture weights sum to {total}, not 1")));
        }
        if variances.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(SowError::invalid("component variances must be positive"));
        }
        let shape = means[0].shape();
        if means.iter().any(|m| m.shape() != shape) {
            return Err(SowError::invalid("component means differ in shape"));
        }
        Ok(Self {
            weights,
            means,
            variances,
        })
    }

    /// A single `N(mean, variance I)` component.
    pub fn single(mean: LatentGrid, variance: f64) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![variance])
    }

    /// `N(0, I)` data on a `channels x height x width` grid.
    pub fn unit_gaussian(channels: usize, height: usize, width: usize) -> Self {
        Self::single(LatentGrid::zeros(channels, height, width), 1.0).expect("valid unit gaussian")
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[LatentGrid] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    fn active_components(&self, condition: Option<&ConditionVector>) -> Vec<(usize, f64)> {
        match condition {
            Some(c) => vec![(c.class_id as usize % self.components(), 1.0)],
            None => self.weights.iter().copied().enumerate().collect(),
        }
    }

    /// `E[x_0 | x_t]` under the (possibly class-restricted) mixture.
    pub fn posterior_mean(
        &self,
        schedule: &NoiseSchedule,
        x_t: &LatentGrid,
        t: usize,
        condition: Option<&ConditionVector>,
    ) -> Result<LatentGrid> {
        self.means[0].ensure_same_shape(x_t, "mixture input")?;
        let ab = schedule.alpha_bar(t)?;
        let sab = ab.sqrt();
        let dim = x_t.len() as f64;
        let active = self.active_components(condition);

        let log_post: Vec<f64> = active
            .iter()
            .map(|&(i, w)| {
                if w == 0.0 {
                    return f64::NEG_INFINITY;
                }
                let var = ab * self.variances[i] + 1.0 - ab;
                let sq: f64 = x_t
                    .iter()
                    .zip(self.means[i].iter())
                    .map(|(x, m)| {
                        let d = x - sab * m;
                        d * d
                    })
                    .sum();
                w.ln() - 0.5 * dim * var.ln() - 0.5 * sq / var
            })
            .collect();
        let max = log_post.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let unnorm: Vec<f64> = log_post.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = unnorm.iter().sum();

        let mut out = LatentGrid::zeros(x_t.shape().0, x_t.shape().1, x_t.shape().2);
        for (&(i, _), r) in active.iter().zip(unnorm) {
            let r = r / z;
            if r == 0.0 {
                continue;
            }
            let var = ab * self.variances[i] + 1.0 - ab;
            let gain = sab * self.variances[i] / var;
            let arr = out.array_mut();
            ndarray::Zip::from(arr)
                .and(x_t.array())
                .and(self.means[i].array())
                .for_each(|o, &x, &m| *o += r * (m + gain * (x - sab * m)));
        }
        Ok(out)
    }
}

impl DenoiserModel for GaussianMixtureDenoiser {
    fn predict_eps(
        &self,
        schedule: &NoiseSchedule,
        x_t: &LatentGrid,
        t: usize,
        condition: Option<&ConditionVector>,
    ) -> Result<LatentGrid> {
        let ab = schedule.alpha_bar(t)?;
        let one_minus = 1.0 - ab;
        if one_minus < 1e-12 {
            return Err(SowError::NearDataSingularity {
                t,
                one_minus_alpha_bar: one_minus,
            });
        }
        let x0 = self.posterior_mean(schedule, x_t, t, condition)?;
        let eps = x_t
            .axpby(1.0, &x0, -ab.sqrt())?
            .scaled(1.0 / one_minus.sqrt());
        ensure_finite(eps, t)
    }
}
