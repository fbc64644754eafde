//! Structured-text configuration: every tunable lives in one TOML file with
//! schema validation (unknown keys are rejected) and is checked against the
//! module preconditions at load time.

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::experiments::dataset::GenParams;
use crate::geom::Vec2;
use crate::model::{TrainConfig, VitConfig};
use crate::sim::MaterialParams;

/// The default configuration file shipped with the crate.
pub const DEFAULT_TOML: &str = include_str!("default_config.toml");

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub simulator: SimulatorConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub evaluation: EvaluationConfig,
}

impl Default for Config {
    fn default() -> Self {
        toml::from_str(DEFAULT_TOML).expect("embedded default config parses")
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SimulatorConfig {
    pub rows: usize,
    pub cols: usize,
    pub cell_size_cm: f64,
    pub incline_deg: f64,
    pub fill_depth_cm: f64,
    pub repose_deg: f64,
    pub max_stable_deg: f64,
    pub relax_fraction: f64,
    pub scoop_depth_cm: f64,
    pub transport_gain: f64,
    pub leg_side_cm: f64,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        let m = MaterialParams::default();
        SimulatorConfig {
            rows: 120,
            cols: 120,
            cell_size_cm: 0.5,
            incline_deg: 18.0,
            fill_depth_cm: 10.0,
            repose_deg: m.repose_deg,
            max_stable_deg: m.max_stable_deg,
            relax_fraction: m.relax_fraction,
            scoop_depth_cm: m.scoop_depth,
            transport_gain: m.transport_gain,
            leg_side_cm: 6.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub patch: usize,
    pub embed_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            patch: 12,
            embed_dim: 64,
            blocks: 2,
            heads: 4,
            ff_dim: 128,
            head_hidden: 32,
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub augment_hflip: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 60,
            batch_size: 16,
            learning_rate: 3e-4,
            augment_hflip: true,
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub trials_per_cell: usize,
    pub probe_obstacle_x_cm: f64,
    pub probe_obstacle_y_cm: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            trials_per_cell: 20,
            probe_obstacle_x_cm: 30.0,
            probe_obstacle_y_cm: 34.0,
        }
    }
}

impl Config {
    /// Parse and validate a TOML config.
    pub fn from_toml(text: &str) -> Result<Config> {
        let config: Config =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load<P: AsRef<std::path::Path>>(path: P) -> Result<Config> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.gen_params()?;
        self.vit_config(false)?.validate()?;
        self.vit_config(true)?.validate()?;
        if self.training.epochs == 0 || self.training.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.training.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.evaluation.trials_per_cell == 0 {
            return Err(Error::Config("trials_per_cell must be positive".into()));
        }
        Ok(())
    }

    pub fn material(&self) -> MaterialParams {
        MaterialParams {
            repose_deg: self.simulator.repose_deg,
            max_stable_deg: self.simulator.max_stable_deg,
            relax_fraction: self.simulator.relax_fraction,
            scoop_depth: self.simulator.scoop_depth_cm,
            transport_gain: self.simulator.transport_gain,
        }
    }

    /// Simulation/generation parameters. Validates the simulator section by
    /// constructing a bed.
    pub fn gen_params(&self) -> Result<GenParams> {
        let params = GenParams {
            incline_deg: self.simulator.incline_deg,
            rows: self.simulator.rows,
            cols: self.simulator.cols,
            cell_size: self.simulator.cell_size_cm,
            fill_depth: self.simulator.fill_depth_cm,
            material: self.material(),
            leg_side: self.simulator.leg_side_cm,
        };
        crate::sim::SlopeState::with_material(
            params.incline_deg,
            params.rows.min(8),
            params.cols.min(8),
            params.cell_size,
            params.fill_depth,
            params.material,
        )?;
        Ok(params)
    }

    pub fn extent(&self) -> Vec2 {
        Vec2::new(
            self.simulator.cols as f64 * self.simulator.cell_size_cm,
            self.simulator.rows as f64 * self.simulator.cell_size_cm,
        )
    }

    /// Model architecture for either variant.
    pub fn vit_config(&self, ablation: bool) -> Result<VitConfig> {
        let cfg = VitConfig {
            rows: self.simulator.rows,
            cols: self.simulator.cols,
            channels: if ablation { 2 } else { 3 },
            patch: self.model.patch,
            embed: self.model.embed_dim,
            blocks: self.model.blocks,
            heads: self.model.heads,
            ff: self.model.ff_dim,
            head_hidden: self.model.head_hidden,
            extra_head_inputs: if ablation { 2 } else { 0 },
            extent: self.extent(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.training.epochs,
            batch_size: self.training.batch_size,
            learning_rate: self.training.learning_rate,
            augment_hflip: self.training.augment_hflip,
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedded_default_parses_and_matches_the_code_defaults() {
        let config = Config::from_toml(DEFAULT_TOML).unwrap();
        assert_eq!(config, Config::default());
        assert_eq!(config.simulator.incline_deg, 18.0);
        assert_eq!(config.simulator.leg_side_cm, 6.0);
        assert_eq!(config.evaluation.trials_per_cell, 20);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = format!("{DEFAULT_TOML}\n[simulator2]\nfoo = 1\n");
        assert!(Config::from_toml(&bad).is_err());
        assert!(Config::from_toml("[simulator]\nnot_a_knob = 3\n").is_err());
    }

    #[test]
    fn invalid_values_are_rejected_at_load() {
        assert!(Config::from_toml("[simulator]\nincline_deg = 50.0\n").is_err());
        assert!(Config::from_toml("[simulator]\nrepose_deg = 25.0\n").is_err());
        assert!(Config::from_toml("[training]\nepochs = 0\n").is_err());
        assert!(Config::from_toml("[model]\npatch = 7\n").is_err());
    }

    #[test]
    fn partial_configs_inherit_defaults() {
        let config = Config::from_toml("[training]\nepochs = 3\n").unwrap();
        assert_eq!(config.training.epochs, 3);
        assert_eq!(config.simulator.rows, 120);
    }
}
