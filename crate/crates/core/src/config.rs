//! Run configuration: one TOML file with a table per module.
//!
//! Every table and every key is optional; missing values take the defaults
//! of the owning module. Unknown keys are rejected. Command-line flags are
//! applied on top of the file by the CLI.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention_mod::ModulationConfig;
use crate::denoiser::{ToyAttentionDenoiser, ToyConfig};
use crate::engine::EngineConfig;
use crate::error::{Result, SowError};
use crate::grid::TokenGrid;
use crate::harness::{AttentionBiasConfig, CycleProgressConfig, DisturbConfig, MergeConfig, SensitivityConfig};
use crate::planner::PlannerConfig;
use crate::schedule::{NoiseSchedule, ScheduleConfig, StepGrid};

/// The commented default configuration shipped with the repository.
pub const DEFAULT_CONFIG_TOML: &str = include_str!("../../../config/sow.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub schedule: ScheduleConfig,
    pub sampler: SamplerSection,
    pub engine: EngineConfig,
    #[serde(rename = "mod")]
    pub modulation: ModulationConfig,
    pub planner: PlannerConfig,
    pub denoiser: DenoiserSection,
    pub experiments: ExperimentsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            schedule: ScheduleConfig::default(),
            sampler: SamplerSection::default(),
            engine: EngineConfig::default(),
            modulation: ModulationConfig::default(),
            planner: PlannerConfig::default(),
            denoiser: DenoiserSection::default(),
            experiments: ExperimentsSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    /// Coarse steps laid uniformly over the schedule.
    pub coarse_steps: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self { coarse_steps: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserSection {
    /// Token grid of the working latent.
    pub height: usize,
    pub width: usize,
    /// Toy weights file; random weights from `toy.seed` when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    pub toy: ToyConfig,
}

impl Default for DenoiserSection {
    fn default() -> Self {
        Self {
            height: 8,
            width: 8,
            weights: None,
            toy: ToyConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentsSection {
    /// Token grid side for the cycle progress sweep.
    pub cycle_grid: usize,
    pub merge: MergeConfig,
    pub attention_bias: AttentionBiasConfig,
    pub cycle_progress: CycleProgressConfig,
    pub sensitivity: SensitivityConfig,
    pub disturb_reconstruct: DisturbConfig,
}

impl Default for ExperimentsSection {
    fn default() -> Self {
        Self {
            cycle_grid: 16,
            merge: MergeConfig::default(),
            attention_bias: AttentionBiasConfig::default(),
            cycle_progress: CycleProgressConfig::default(),
            sensitivity: SensitivityConfig::default(),
            disturb_reconstruct: DisturbConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| SowError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SowError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| SowError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| SowError::Config(e.to_string()))
    }

    /// The echo written into run manifests.
    pub fn echo(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self)?)
    }

    pub fn from_echo(value: &serde_json::Value) -> Result<Self> {
        Ok(serde_json::from_value(value.clone())?)
    }

    pub fn build_schedule(&self) -> Result<NoiseSchedule> {
        self.schedule.build()
    }

    pub fn step_grid(&self, schedule: &NoiseSchedule) -> Result<StepGrid> {
        StepGrid::new(schedule, self.sampler.coarse_steps)
    }

    pub fn token_grid(&self) -> TokenGrid {
        TokenGrid::new(self.denoiser.height, self.denoiser.width)
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        (self.denoiser.toy.channels, self.denoiser.height, self.denoiser.width)
    }

    pub fn build_model(&self) -> Result<ToyAttentionDenoiser> {
        match &self.denoiser.weights {
            Some(path) => {
                let model = ToyAttentionDenoiser::load(path, self.token_grid())?;
                if model.config() != &self.denoiser.toy {
                    log::warn!(
                        "weights in {} override the [denoiser.toy] table",
                        path.display()
                    );
                }
                Ok(model)
            }
            None => ToyAttentionDenoiser::new(self.denoiser.toy, self.token_grid()),
        }
    }

    /// Cross-field checks, delegated to each module's validator.
    pub fn validate(&self) -> Result<()> {
        let schedule = self.build_schedule()?;
        let grid = self.step_grid(&schedule)?;
        self.engine.validate(&grid)?;
        self.modulation.validate()?;
        self.planner.validate()?;
        if self.denoiser.height == 0 || self.denoiser.width == 0 {
            return Err(SowError::Config("denoiser grid must be nonempty".into()));
        }
        self.planner.stride(self.token_grid())?;
        self.denoiser.toy.validate()?;
        if self.experiments.cycle_grid == 0 {
            return Err(SowError::Config("experiments.cycle_grid must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_file_matches_defaults() {
        let cfg = RunConfig::from_toml(DEFAULT_CONFIG_TOML).unwrap();
        assert_eq!(cfg, RunConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_tables_keep_other_defaults() {
        let cfg = RunConfig::from_toml("seed = 3\n[engine]\ncycles = 4\n[mod]\nT = 5.0\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.engine.cycles, 4);
        assert_eq!(cfg.engine.t2, 7);
        assert_eq!(cfg.modulation.horizon, 5.0);
        assert_eq!(cfg.modulation.tau, 0.273);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["colour = 1", "[engine]\ncycels = 4", "[mod]\nomega = 1.0", "[nope]\n"] {
            assert!(matches!(RunConfig::from_toml(text), Err(SowError::Config(_))), "{text}");
        }
    }

    #[test]
    fn toml_and_echo_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.engine.eta = Some(0.25);
        cfg.engine.t3 = Some(vec![2]);
        cfg.modulation.tau = 0.1;
        cfg.denoiser.weights = Some(PathBuf::from("w.bin"));
        assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
        assert_eq!(RunConfig::from_echo(&cfg.echo().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn validation_reaches_every_section() {
        let bad: Vec<Box<dyn Fn(&mut RunConfig)>> = vec![
            Box::new(|c| c.schedule.beta_end = 2.0),
            Box::new(|c| c.sampler.coarse_steps = 0),
            Box::new(|c| c.engine.t1 = 9),
            Box::new(|c| c.modulation.tau = 2.0),
            Box::new(|c| c.planner.clamp_min = 0),
            Box::new(|c| c.denoiser.width = 0),
            Box::new(|c| c.denoiser.toy.heads = 0),
        ];
        for f in bad {
            let mut c = RunConfig::default();
            f(&mut c);
            assert!(c.validate().is_err(), "{c:?}");
        }
    }
}
