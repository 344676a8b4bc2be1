//! Flat JSON config. Every key is optional; a CLI flag overrides the file,
//! and the file overrides the built-in default.

use std::path::Path;

use reach_intent::abc::{InferenceConfig, Kernel};
use reach_intent::session::{PriorWeights, SessionConfig};
use reach_intent::similarity::Window;
use reach_intent::task_sim::TaskConfig;
use serde::Deserialize;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub count: Option<usize>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub repeats: Option<usize>,
    pub sim_cells: Option<usize>,
    pub seeds: Option<usize>,
    pub host: Option<String>,
    pub port: Option<u16>,
    pub fraction: Option<f64>,
    pub kernel: Option<Kernel>,
    pub epsilon: Option<f64>,
    pub window: Option<usize>,
    pub prior_proximity: Option<f64>,
    pub prior_gaze: Option<f64>,
    pub prior_objects: Option<f64>,
    pub conflict_radius: Option<f64>,
    pub p_safe: Option<f64>,
    pub objects: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}

/// CLI flag, else config file, else default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

/// Inference knobs shared by several subcommands.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct InferenceFlags {
    /// Likelihood kernel: gaussian or indicator.
    #[arg(long, value_parser = parse_kernel)]
    pub kernel: Option<Kernel>,
    /// Kernel bandwidth (m, gaussian) or loss threshold (m², indicator).
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Number of recent points compared.
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub prior_proximity: Option<f64>,
    #[arg(long)]
    pub prior_gaze: Option<f64>,
    #[arg(long)]
    pub prior_objects: Option<f64>,
    #[arg(long)]
    pub conflict_radius: Option<f64>,
    #[arg(long)]
    pub p_safe: Option<f64>,
}

fn parse_kernel(s: &str) -> Result<Kernel, String> {
    match s {
        "gaussian" => Ok(Kernel::Gaussian),
        "indicator" => Ok(Kernel::Indicator),
        other => Err(format!("unknown kernel {other:?} (gaussian or indicator)")),
    }
}

impl InferenceFlags {
    pub fn inference(&self, file: &FileConfig) -> CliResult<InferenceConfig> {
        let base = InferenceConfig::default();
        let kernel = pick(self.kernel, file.kernel, base.kernel);
        let default_epsilon = match kernel {
            Kernel::Gaussian => reach_intent::abc::DEFAULT_GAUSSIAN_BANDWIDTH,
            Kernel::Indicator => reach_intent::abc::DEFAULT_INDICATOR_EPSILON,
        };
        let window = Window::new(pick(self.window, file.window, base.window.get()))?;
        let config = InferenceConfig {
            kernel,
            epsilon: pick(self.epsilon, file.epsilon, default_epsilon),
            window,
            ..base
        };
        config.validate()?;
        Ok(config)
    }

    pub fn prior_weights(&self, file: &FileConfig) -> CliResult<PriorWeights> {
        let base = PriorWeights::default();
        let weights = PriorWeights {
            proximity: pick(self.prior_proximity, file.prior_proximity, base.proximity),
            gaze: pick(self.prior_gaze, file.prior_gaze, base.gaze),
            objects: pick(self.prior_objects, file.prior_objects, base.objects),
        };
        weights.validate()?;
        Ok(weights)
    }

    pub fn session(&self, file: &FileConfig) -> CliResult<SessionConfig> {
        let base = SessionConfig::default();
        let config = SessionConfig {
            inference: self.inference(file)?,
            prior_weights: self.prior_weights(file)?,
            conflict_radius: pick(self.conflict_radius, file.conflict_radius, base.conflict_radius),
            p_safe: pick(self.p_safe, file.p_safe, base.p_safe),
            ..base
        };
        config.validate()?;
        Ok(config)
    }

    pub fn task(&self, file: &FileConfig) -> CliResult<TaskConfig> {
        let base = TaskConfig::default();
        let config = TaskConfig {
            inference: self.inference(file)?,
            prior_weights: self.prior_weights(file)?,
            conflict_radius: pick(self.conflict_radius, file.conflict_radius, base.conflict_radius),
            p_safe: pick(self.p_safe, file.p_safe, base.p_safe),
            objects: file.objects.unwrap_or(base.objects),
            ..base
        };
        config.validate()?;
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_beats_file_beats_default() {
        assert_eq!(pick(Some(1), Some(2), 3), 1);
        assert_eq!(pick(None, Some(2), 3), 2);
        assert_eq!(pick(None::<i32>, None, 3), 3);
    }

    #[test]
    fn file_values_flow_into_the_inference_config() {
        let file: FileConfig = serde_json::from_str(r#"{"kernel": "indicator", "window": 5}"#).unwrap();
        let flags = InferenceFlags {
            window: Some(7),
            ..Default::default()
        };
        let c = flags.inference(&file).unwrap();
        assert_eq!(c.kernel, Kernel::Indicator);
        assert_eq!(c.epsilon, reach_intent::abc::DEFAULT_INDICATOR_EPSILON);
        assert_eq!(c.window.get(), 7);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(serde_json::from_str::<FileConfig>(r#"{"epsilonn": 1}"#).is_err());
        let file = FileConfig {
            prior_gaze: Some(-1.0),
            ..Default::default()
        };
        assert!(matches!(
            InferenceFlags::default().prior_weights(&file),
            Err(CliError::Usage(_))
        ));
    }
}
