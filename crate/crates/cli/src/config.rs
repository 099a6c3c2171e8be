//! Config-file loading and flag precedence.

use std::path::Path;

use prefopt::experiments::ExperimentConfig;
use prefopt::optim::TrainConfig;
use prefopt::LossKind;
use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

use crate::{CliError, TrainFlags};

/// Environment variable consulted when neither flag nor config sets a seed.
pub const SEED_ENV: &str = "PREFOPT_SEED";

/// A parsed `--config` file: method and lambda lists split off, the rest
/// left for the subcommand's config type.
#[derive(Debug, Default)]
pub struct FileConfig {
    pub methods: Option<Vec<LossKind>>,
    pub lambdas: Option<Vec<f64>>,
    rest: Map<String, Value>,
    origin: String,
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let origin = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("--config {origin}: {e}")))?;
        let value: Value = serde_json::from_str(&text).map_err(|e| invalid(format!("--config {origin}: {e}")))?;
        let Value::Object(mut rest) = value else {
            return Err(invalid(format!("--config {origin}: expected a JSON object")));
        };
        let methods = match rest.remove("methods") {
            None => None,
            Some(Value::String(s)) if s == "all" => Some(LossKind::PRESETS.to_vec()),
            Some(v) => Some(
                serde_json::from_value(v).map_err(|e| invalid(format!("--config {origin}: methods: {e}")))?,
            ),
        };
        let lambdas = match rest.remove("lambdas") {
            None => None,
            Some(v) => Some(
                serde_json::from_value(v).map_err(|e| invalid(format!("--config {origin}: lambdas: {e}")))?,
            ),
        };
        Ok(FileConfig { methods, lambdas, rest, origin })
    }

    fn parse<T: DeserializeOwned>(&self) -> Result<T, CliError> {
        serde_json::from_value(Value::Object(self.rest.clone()))
            .map_err(|e| invalid(format!("--config {}: {e}", self.origin)))
    }

    fn seed(&self) -> Option<&Value> {
        self.rest.get("seed")
    }
}

/// Flag, then config file, then environment, then 0.
pub fn resolve_seed(flag: Option<u64>, file: &FileConfig) -> Result<u64, CliError> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Some(v) = file.seed() {
        return v.as_u64().ok_or_else(|| invalid(format!("--config {}: seed must be a non-negative integer", file.origin)));
    }
    match std::env::var(SEED_ENV) {
        Ok(s) => s.trim().parse().map_err(|_| invalid(format!("{SEED_ENV}=`{s}` is not a non-negative integer"))),
        Err(_) => Ok(0),
    }
}

pub fn experiment_config(flags: &TrainFlags, file: &FileConfig) -> Result<ExperimentConfig, CliError> {
    let mut cfg: ExperimentConfig = file.parse()?;
    if let Some(m) = flags.mode {
        cfg.mode = m;
    }
    if let Some(s) = flags.steps {
        cfg.steps = Some(s);
    }
    if let Some(lr) = flags.lr {
        cfg.learning_rate = Some(lr);
    }
    if let Some(b) = flags.batch {
        cfg.batch_size = b;
    }
    if let Some(c) = flags.clip {
        cfg.clip_max_norm = c.0;
    }
    cfg.seed = resolve_seed(flags.seed, file)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn train_config(flags: &TrainFlags, file: &FileConfig) -> Result<TrainConfig, CliError> {
    let mut cfg: TrainConfig = file.parse()?;
    if let Some(m) = flags.mode {
        cfg.mode = m;
    }
    if let Some(s) = flags.steps {
        cfg.steps = s;
    }
    if let Some(lr) = flags.lr {
        cfg.learning_rate = lr;
    }
    if let Some(b) = flags.batch {
        cfg.batch_size = b;
    }
    if let Some(c) = flags.clip {
        cfg.clip_max_norm = c.0;
    }
    cfg.seed = resolve_seed(flags.seed, file)?;
    cfg.validate()?;
    Ok(cfg)
}
