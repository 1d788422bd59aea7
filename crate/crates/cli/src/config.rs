use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use nds_core::synth::SynthConfig;
use nds_core::train::TrainConfig;
use nds_core::zoo::ModelConfig;
use serde::{Deserialize, Serialize};

/// Resolved settings written into a run directory; `eval`, `predict` and
/// `info` read it back from there.
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";
/// Verbatim copy of the `--config` file, when one was given.
pub const CONFIG_ECHO: &str = "config.toml";
pub const RUN_INFO: &str = "run.json";

/// Everything a run can be configured with. Every key is optional; unknown
/// keys are rejected. Command-line flags override file values, and a
/// top-level `seed` (or `--seed`) overrides the seeds of every section.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub synth: SynthConfig,
}

/// A parsed config file plus what the defaults cannot tell apart.
pub struct Loaded {
    pub config: RunConfig,
    pub text: Option<String>,
    /// Whether the file pinned `model.input_channels`.
    pub explicit_channels: bool,
}

pub fn load(path: Option<&Path>) -> Result<Loaded> {
    let Some(path) = path else {
        return Ok(Loaded {
            config: RunConfig::default(),
            text: None,
            explicit_channels: false,
        });
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let config: RunConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    let table: toml::Table = toml::from_str(&text)?;
    let explicit_channels = table
        .get("model")
        .and_then(|m| m.as_table())
        .is_some_and(|m| m.contains_key("input_channels"));
    Ok(Loaded {
        config,
        text: Some(text),
        explicit_channels,
    })
}

impl RunConfig {
    /// Applies the run seed to every section.
    pub fn apply_seed(&mut self, flag: Option<u64>) {
        if let Some(seed) = flag.or(self.seed) {
            self.seed = Some(seed);
            self.train.seed = seed;
            self.model.seed = seed;
            self.synth.seed = seed;
        }
    }

    /// Seed of the train/val/test split.
    pub fn split_seed(&self) -> u64 {
        self.seed.unwrap_or(self.train.seed)
    }

    /// Derives the model's input channels from the input representation.
    pub fn sync_channels(&mut self) {
        let per_flight = self.train.repr.channels();
        self.model.input_channels = if self.model.arch.is_nine_channel() {
            3 * per_flight
        } else {
            per_flight
        };
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.validate()?;
        self.train.check_model_config(&self.model)?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn read_resolved(run: &Path) -> Result<RunConfig> {
        let path = run.join(RESOLVED_CONFIG);
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}
