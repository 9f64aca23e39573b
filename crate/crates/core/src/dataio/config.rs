//! `key = value` config files. Keys are exactly the [`TrainConfig`] field
//! names; `#` starts a comment; missing keys keep their defaults.

use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Malformed { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value `{value}` for `{key}`: {reason}")]
    BadValue {
        line: usize,
        key: String,
        value: String,
        reason: String,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

pub fn parse_config(path: &Path) -> Result<TrainConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config_str(&text)
}

fn value<T: FromStr>(line: usize, key: &str, raw: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    raw.parse().map_err(|e: T::Err| ConfigError::BadValue {
        line,
        key: key.into(),
        value: raw.into(),
        reason: e.to_string(),
    })
}

pub fn parse_config_str(text: &str) -> Result<TrainConfig, ConfigError> {
    let mut c = TrainConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap().trim();
        if body.is_empty() {
            continue;
        }
        let Some((k, v)) = body.split_once('=') else {
            return Err(ConfigError::Malformed {
                line,
                text: raw.into(),
            });
        };
        let (k, v) = (k.trim(), v.trim());
        match k {
            "mode" => c.mode = value(line, k, v)?,
            "head_mode" => c.head_mode = value(line, k, v)?,
            "lambda" => c.lambda = value(line, k, v)?,
            "normalize_deltas" => c.normalize_deltas = value(line, k, v)?,
            "lr" => c.lr = value(line, k, v)?,
            "momentum" => c.momentum = value(line, k, v)?,
            "weight_decay" => c.weight_decay = value(line, k, v)?,
            "schedule" => c.schedule = value(line, k, v)?,
            "epochs" => c.epochs = value(line, k, v)?,
            "batch_size" => c.batch_size = value(line, k, v)?,
            "seed" => c.seed = value(line, k, v)?,
            "modules" => c.modules = value(line, k, v)?,
            "width" => c.width = value(line, k, v)?,
            "layers_per_module" => c.layers_per_module = value(line, k, v)?,
            "head_hidden" => c.head_hidden = value(line, k, v)?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: k.into(),
                })
            }
        }
    }
    if !(c.lr > 0.0) {
        return Err(ConfigError::Invalid(format!("lr must be > 0, got {}", c.lr)));
    }
    c.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(c)
}

/// Canonical form: every key, one per line, in declaration order.
pub fn serialize_config(c: &TrainConfig) -> String {
    format!(
        "mode = {}\nhead_mode = {}\nlambda = {:?}\nnormalize_deltas = {}\nlr = {:?}\n\
         momentum = {:?}\nweight_decay = {:?}\nschedule = {}\nepochs = {}\nbatch_size = {}\n\
         seed = {}\nmodules = {}\nwidth = {}\nlayers_per_module = {}\nhead_hidden = {}\n",
        c.mode,
        c.head_mode,
        c.lambda,
        c.normalize_deltas,
        c.lr,
        c.momentum,
        c.weight_decay,
        c.schedule,
        c.epochs,
        c.batch_size,
        c.seed,
        c.modules,
        c.width,
        c.layers_per_module,
        c.head_hidden
    )
}
