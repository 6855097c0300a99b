use std::fmt;
use std::path::Path;

use bicap_core::model::ModelConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Marks an error as a configuration problem (exit code 2).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

/// Reads a JSON config file; unknown keys are rejected by the target type.
pub fn load_json<T: DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| config_error(format!("reading config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| config_error(format!("config {}: {e}", path.display())))
}

/// Replaces `slot` when a command-line value was given.
pub fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

/// Partial model settings applied on top of the desk defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelOverrides {
    pub context_len: Option<usize>,
    pub embed_dim: Option<usize>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub ff_dim: Option<usize>,
    pub dropout: Option<f64>,
    pub encoder_channels: Option<Vec<usize>>,
    pub image_side: Option<usize>,
    pub grid_side: Option<usize>,
}

impl ModelOverrides {
    pub fn resolve(&self, vocab_size: usize) -> ModelConfig {
        let mut c = ModelConfig::desk(vocab_size);
        set(&mut c.context_len, self.context_len);
        set(&mut c.embed_dim, self.embed_dim);
        set(&mut c.layers, self.layers);
        set(&mut c.heads, self.heads);
        set(&mut c.ff_dim, self.ff_dim);
        set(&mut c.dropout, self.dropout);
        set(&mut c.encoder_channels, self.encoder_channels.clone());
        set(&mut c.image_side, self.image_side);
        set(&mut c.grid_side, self.grid_side);
        c
    }
}
