//! Run configuration: one JSON document with a section per module, plus
//! dotted `--set key=value` overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mtorl_core::allocation::{ScoreAggregation, DEFAULT_ALPHA, DEFAULT_TAU};
use mtorl_core::data::{RewardSpec, SequenceConfig};
use mtorl_core::model::ModelConfig;
use mtorl_core::simulator::{EnvironmentConfig, LoggingPolicy, ProcedureConfig, SeparableEnv};
use mtorl_core::training::{AdamConfig, Averaging, LossWeights, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataPaths {
    /// JSON-lines journey log.
    pub journeys: Option<PathBuf>,
    /// JSON-lines user profiles.
    pub profiles: Option<PathBuf>,
    /// Ground-truth environment written by `gen-data`.
    pub environment: Option<PathBuf>,
    /// JSON-lines reward predictions for `allocate`.
    pub predictions: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingSection {
    #[serde(flatten)]
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub averaging: Averaging,
    pub stop_below_policy_loss: Option<f64>,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            optimizer: t.optimizer,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            averaging: t.averaging,
            stop_below_policy_loss: t.stop_below_policy_loss,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AllocationSection {
    pub tau: f64,
    pub alpha: f64,
    pub top_n: usize,
    pub aggregation: ScoreAggregation,
}

impl Default for AllocationSection {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            alpha: DEFAULT_ALPHA,
            top_n: 20,
            aggregation: ScoreAggregation::Last,
        }
    }
}

/// Every setting of every subcommand. `seed` drives all random streams; the
/// per-section seed fields are overwritten from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataPaths,
    pub sequence: SequenceConfig,
    pub reward: RewardSpec,
    /// `fused_dim`, `seq_len` and `channels` are derived from `sequence` and `reward`.
    pub model: ModelConfig,
    pub training: TrainingSection,
    pub loss: LossWeights,
    pub environment: SeparableEnv,
    /// Replaces the generated separable environment when present.
    pub explicit_environment: Option<EnvironmentConfig>,
    pub logging: LoggingPolicy,
    pub procedure: ProcedureConfig,
    pub allocation: AllocationSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sequence = SequenceConfig::default();
        let mut cfg = Self {
            seed: 0,
            data: DataPaths::default(),
            environment: SeparableEnv {
                channels: sequence.channels,
                touch_dim: sequence.touch_dim,
                ..SeparableEnv::default()
            },
            sequence,
            reward: RewardSpec::default(),
            model: ModelConfig::default(),
            training: TrainingSection::default(),
            loss: LossWeights::default(),
            explicit_environment: None,
            logging: LoggingPolicy::default(),
            procedure: ProcedureConfig::default(),
            allocation: AllocationSection::default(),
        };
        cfg.resolve();
        cfg
    }
}

impl RunConfig {
    /// Reads `path` (defaults when absent), applies overrides and the seed, and validates.
    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let file = match path {
            Some(p) => {
                let text =
                    std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str::<Value>(&text)
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => Value::Object(Default::default()),
        };
        let base: RunConfig = serde_json::from_value(file.clone()).context("invalid config")?;
        let mut value = serde_json::to_value(&base)?;
        check_known_keys(&file, &value, "")?;
        for item in overrides {
            apply_override(&mut value, item)?;
        }
        let mut cfg: RunConfig =
            serde_json::from_value(value).context("config invalid after --set overrides")?;
        if let Some(seed) = seed {
            cfg.seed = seed;
        }
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Propagates the seed and the derived model shape.
    fn resolve(&mut self) {
        self.environment.seed = self.seed;
        self.procedure.seed = self.seed;
        self.model.fused_dim = self.sequence.fused_dim(&self.reward);
        self.model.seq_len = self.sequence.seq_len;
        self.model.channels = self.sequence.channels;
    }

    pub fn validate(&self) -> Result<()> {
        self.sequence.validate().context("sequence")?;
        self.reward.validate().context("reward")?;
        self.model.validate().context("model")?;
        self.train_config().validate().context("training")?;
        self.procedure.validate().context("procedure")?;
        if let Some(env) = &self.explicit_environment {
            env.validate().context("explicit_environment")?;
        }
        let a = &self.allocation;
        if !(a.tau > 0.0 && a.tau < 1.0) {
            bail!("allocation.tau must be in (0, 1), got {}", a.tau);
        }
        if !(0.0..=1.0).contains(&a.alpha) {
            bail!("allocation.alpha must be in [0, 1], got {}", a.alpha);
        }
        if a.top_n == 0 {
            bail!("allocation.top_n must be ≥ 1");
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            optimizer: t.optimizer,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            loss: self.loss,
            averaging: t.averaging,
            stop_below_policy_loss: t.stop_below_policy_loss,
            seed: self.seed,
        }
    }

    /// Environment ground truth: the explicit section, the file from
    /// `data.environment`, or the separable generator, in that order.
    pub fn environment_config(&self) -> Result<EnvironmentConfig> {
        if let Some(env) = &self.explicit_environment {
            return Ok(env.clone());
        }
        if let Some(path) = &self.data.environment {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading environment {}", path.display()))?;
            let env: EnvironmentConfig = serde_json::from_str(&text)
                .with_context(|| format!("parsing environment {}", path.display()))?;
            env.validate()?;
            return Ok(env);
        }
        self.generated_environment()
    }

    /// The explicit environment or the separable generator; ignores `data.environment`.
    pub fn generated_environment(&self) -> Result<EnvironmentConfig> {
        match &self.explicit_environment {
            Some(env) => Ok(env.clone()),
            None => Ok(self.environment.build()?),
        }
    }

    /// Writes the effective configuration; reloading it reproduces the run.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(dir.join("config.json"), text)?;
        Ok(())
    }
}

fn check_known_keys(given: &Value, known: &Value, prefix: &str) -> Result<()> {
    let (Value::Object(given), Value::Object(known)) = (given, known) else {
        return Ok(());
    };
    for (key, value) in given {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        match known.get(key) {
            Some(inner) => check_known_keys(value, inner, &path)?,
            None => bail!("unknown config key `{path}`"),
        }
    }
    Ok(())
}

/// `a.b.c=value`; the value is parsed as JSON, falling back to a string.
fn apply_override(root: &mut Value, item: &str) -> Result<()> {
    let (path, raw) = item
        .split_once('=')
        .with_context(|| format!("override `{item}` is not of the form key=value"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let Value::Object(map) = node else {
            bail!("override `{path}`: `{}` is not a section", keys[..i].join("."));
        };
        let Some(next) = map.get_mut(*key) else {
            bail!("override `{path}`: unknown config key `{}`", keys[..=i].join("."));
        };
        node = next;
    }
    *node = value;
    Ok(())
}
