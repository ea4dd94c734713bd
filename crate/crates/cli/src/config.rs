//! Run configuration: one TOML file mirroring [`RunConfig`], overridable
//! from the command line and echoed into every output directory.

use std::path::{Path, PathBuf};

use posediff_core::denoiser::{DenoiserConfig, TrainConfig};
use posediff_core::diffusion::ScheduleConfig;
use posediff_core::evalkit::Thresholds;
use posediff_core::guidance::GuidanceConfig;
use posediff_core::scenegen::SceneDistribution;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "POSEDIFF_SEED";
/// Name of the echoed configuration in output directories.
pub const EFFECTIVE_CONFIG: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory (written by `synth`, read by the other commands).
    pub dir: PathBuf,
    pub n_scenes: usize,
    pub train_ratio: f64,
    pub distribution: SceneDistribution,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data"),
            n_scenes: 20,
            train_ratio: 0.8,
            distribution: SceneDistribution::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceSection {
    pub enabled: bool,
    pub epsilon: f64,
    pub alpha: f64,
    pub ggs_iters: usize,
    pub guided_last_steps: usize,
    /// Optional fixed strength, still subject to the cap.
    pub strength: Option<f64>,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        let g = GuidanceConfig::default();
        Self {
            enabled: true,
            epsilon: g.epsilon,
            alpha: g.alpha,
            ggs_iters: g.ggs_iters,
            guided_last_steps: g.guided_last_steps,
            strength: g.strength,
        }
    }
}

impl GuidanceSection {
    pub fn config(&self) -> GuidanceConfig {
        GuidanceConfig {
            epsilon: self.epsilon,
            alpha: self.alpha,
            ggs_iters: self.ggs_iters,
            guided_last_steps: self.guided_last_steps,
            strength: self.strength,
        }
    }

    /// `None` when guidance is switched off.
    pub fn active(&self) -> Option<GuidanceConfig> {
        self.enabled.then(|| self.config())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Where `train`, `sample`, `eval` and `plot` write their artifacts.
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    /// `train.seed` is always replaced by the top-level seed.
    pub train: TrainConfig,
    pub guidance: GuidanceSection,
    pub eval: Thresholds,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            schedule: ScheduleConfig::default(),
            denoiser: DenoiserConfig::default(),
            train: TrainConfig::default(),
            guidance: GuidanceSection::default(),
            eval: Thresholds::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Applies `POSEDIFF_SEED` when `env_seed` holds it.
    pub fn apply_seed_env(&mut self, env_seed: Option<&str>) -> Result<(), CliError> {
        if let Some(v) = env_seed {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    /// Copies derived values into place and checks every section.
    pub fn finalize(&mut self) -> Result<(), CliError> {
        self.train.seed = self.seed;
        self.schedule.build()?;
        self.denoiser.validate()?;
        if self.guidance.enabled {
            self.guidance.config().validate()?;
        }
        let d = &self.data;
        if d.n_scenes < 2 {
            return Err(CliError::Config(format!("data.n_scenes must be at least 2, got {}", d.n_scenes)));
        }
        if !(0.0..=1.0).contains(&d.train_ratio) {
            return Err(CliError::Config(format!("data.train_ratio {} outside [0, 1]", d.train_ratio)));
        }
        let (lo, hi) = d.distribution.frames;
        if lo < 2 || hi < lo {
            return Err(CliError::Config(format!("data.distribution.frames ({lo}, {hi}) must satisfy 2 <= lo <= hi")));
        }
        if self.train.batch_size == 0 {
            return Err(CliError::Config("train.batch_size must be positive".into()));
        }
        if !(self.train.learning_rate >= 0.0 && self.train.learning_rate.is_finite()) {
            return Err(CliError::Config(format!("train.learning_rate {} invalid", self.train.learning_rate)));
        }
        let th = &self.eval;
        if th.angle_deg.is_empty() || th.ate_fraction.is_empty() {
            return Err(CliError::Config("eval thresholds must be nonempty".into()));
        }
        Ok(())
    }

    /// Writes the effective configuration into `dir`.
    pub fn echo_into(&self, dir: &Path) -> Result<(), CliError> {
        let text = self.to_toml()?;
        posediff_core::io::write_text(&dir.join(EFFECTIVE_CONFIG), &text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let c = RunConfig::default();
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = RunConfig::from_toml("seed = 5\n[guidance]\nalpha = 0.001\n").unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.guidance.alpha, 0.001);
        assert_eq!(c.guidance.ggs_iters, 100);
        assert_eq!(c.schedule, ScheduleConfig::default());
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        assert!(matches!(RunConfig::from_toml("sede = 1"), Err(CliError::Config(_))));
        assert!(matches!(RunConfig::from_toml("[guidance]\nalfa = 1.0"), Err(CliError::Config(_))));
    }

    #[test]
    fn env_seed_overrides_and_rejects_garbage() {
        let mut c = RunConfig::default();
        c.apply_seed_env(Some("42")).unwrap();
        assert_eq!(c.seed, 42);
        assert!(c.apply_seed_env(Some("x")).is_err());
    }

    #[test]
    fn infinite_epsilon_survives_toml() {
        let mut c = RunConfig::default();
        c.guidance.epsilon = f64::INFINITY;
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back.guidance.epsilon, f64::INFINITY);
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut c = RunConfig::default();
        c.guidance.alpha = -1.0;
        assert!(matches!(c.finalize(), Err(CliError::Config(_))));
        let mut c = RunConfig::default();
        c.schedule.beta_end = 2.0;
        assert!(matches!(c.finalize(), Err(CliError::Config(_))));
    }
}
