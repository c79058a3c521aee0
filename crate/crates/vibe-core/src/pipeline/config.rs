//! Layered run configuration.
//!
//! Settings are plain `key=value` pairs. The CLI builds one [`KvConfig`]
//! per run by applying, in order: preset defaults (implicit — commands fall
//! back to them when a key is absent), then a `--config` file, then
//! individual flags. Later writers win, which realizes the precedence
//! "CLI flag > config file > preset default".

use std::path::Path;

use crate::data::store::parse_kv_text;
use crate::error::{Error, Result};

/// Every key any command understands. Unknown keys are configuration
/// errors: silently ignoring a typo like `epocs=10` would be worse.
pub const KNOWN_KEYS: &[&str] = &[
    // shared
    "preset",
    "seed",
    "data",
    "out",
    "epochs",
    "batch",
    "protocol",
    "region",
    "lambda",
    "projections",
    // synthetic dataset generation
    "subjects",
    "noise_std",
    "concept_factor_dim",
    "train_concepts",
    "train_images_per_concept",
    "train_repetitions",
    "test_concepts",
    "test_images_per_concept",
    "test_repetitions",
    "embedding_tokens",
    "embedding_dim",
    "embedding_std",
    "region_gain",
    // training (both stages)
    "learning_rate",
    "weight_decay",
    "beta",
    "kl_warmup_epochs",
    "warmup_epochs",
    "grad_clip",
    "val_fraction",
    "width",
    "latent_channels",
    "repetition_mode",
    "max_steps",
    // stage-II mapper shape
    "qf_queries",
    "qf_hidden",
    "qf_layers",
    "qf_heads",
    "qf_mlp_ratio",
    "qf_cross_every",
    "qf_head_hidden",
    // evaluation / reporting
    "stage",
    "svg",
    "linthresh",
];

/// An ordered set of `key=value` settings; `set` upserts, so later layers
/// override earlier ones while first-write order is preserved for display.
#[derive(Debug, Clone, Default)]
pub struct KvConfig {
    entries: Vec<(String, String)>,
}

impl KvConfig {
    pub fn new() -> Self {
        Self::default()
    }

    /// Set or replace one key.
    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        let key = key.into();
        let value = value.into();
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((key, value)),
        }
    }

    /// Overlay every assignment from a config file (`key=value` lines,
    /// `#` comments and blank lines allowed).
    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        let label = path.display().to_string();
        for (k, v) in parse_kv_text(&text, &label)? {
            self.set(k, v);
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::config(format!("missing required config key '{key}'")))
    }

    /// Typed read: absent keys are `None`, malformed values are config
    /// errors naming the key.
    pub fn parse<F>(&self, key: &str) -> Result<Option<F>>
    where
        F: std::str::FromStr,
        F::Err: std::fmt::Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<F>().map(Some).map_err(|e| {
                Error::config(format!("config key '{key}': {e} (value was '{raw}')"))
            }),
        }
    }

    /// Typed read with a fallback default.
    pub fn parse_or<F>(&self, key: &str, default: F) -> Result<F>
    where
        F: std::str::FromStr,
        F::Err: std::fmt::Display,
    {
        Ok(self.parse(key)?.unwrap_or(default))
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    /// Reject keys no command understands.
    pub fn check_known_keys(&self) -> Result<()> {
        for (k, _) in &self.entries {
            if !KNOWN_KEYS.contains(&k.as_str()) {
                return Err(Error::config(format!("unknown config key '{k}'")));
            }
        }
        Ok(())
    }
}
