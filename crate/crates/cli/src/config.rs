use std::fs;
use std::path::Path;

use baunet::data::{SplitSpec, SynthConfig};
use baunet::training::TrainConfig;
use baunet::unet::ArchConfig;
use baunet::uq::McConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

/// Everything a command may read. Unknown keys are rejected at every level.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; `--seed` copies it into every component seed.
    pub seed: u64,
    pub data: DataConfig,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub mc: McConfig,
    pub sweep: SweepConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n: usize,
    pub size: usize,
    pub synth: SynthConfig,
    pub split: SplitSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n: 200,
            size: 64,
            synth: SynthConfig::default(),
            split: SplitSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub t_values: Vec<usize>,
    pub repeats: usize,
    /// Images of the chosen split used per estimate.
    pub images: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            t_values: vec![5, 10, 15, 20, 25, 30],
            repeats: 20,
            images: 4,
        }
    }
}

/// What `resolved_config.json` holds: enough to rerun the command.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Snapshot {
    pub command: String,
    pub args: Value,
    pub config: RunConfig,
}

impl RunConfig {
    /// Reads a config file: either a bare config or a snapshot written by an
    /// earlier run.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        let value: Value =
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let is_snapshot = value.get("command").is_some() && value.get("config").is_some();
        let parsed = if is_snapshot {
            serde_json::from_value::<Snapshot>(value).map(|s| s.config)
        } else {
            serde_json::from_value(value)
        };
        parsed.map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.data.split.seed = seed;
        self.train.seed = seed;
        self.mc.seed = seed;
    }

    /// Applies `key.path=value` overrides. Values parse as JSON, falling
    /// back to a plain string; the key must already exist.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), CliError> {
        if overrides.is_empty() {
            return Ok(());
        }
        let mut root = serde_json::to_value(&*self).expect("config serializes");
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("override `{item}` is not KEY=VALUE")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut root;
            for part in key.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|o| o.get_mut(part))
                    .ok_or_else(|| CliError::Usage(format!("unknown config key `{key}`")))?;
            }
            *slot = value;
        }
        *self = serde_json::from_value(root).map_err(|e| CliError::Usage(format!("invalid override: {e}")))?;
        Ok(())
    }
}
