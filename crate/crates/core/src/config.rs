//! Sectioned TOML configuration with `section.key=value` overrides.
//!
//! ```toml
//! [train]
//! epochs_coarse = 30
//! [zoom]
//! threshold = 0.5
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cascade::ZoomConfig;
use crate::data_io::SceneConfig;
use crate::error::{Error, Result};
use crate::evalbench::EvalConfig;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub port: u16,
    /// Idle seconds before a session is dropped.
    pub session_ttl: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            port: 8080,
            session_ttl: 1800,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub zoom: ZoomConfig,
    pub eval: EvalConfig,
    pub scene: SceneConfig,
    pub service: ServiceConfig,
}

impl AppConfig {
    /// Parses TOML text, then applies `section.key=value` overrides in order.
    /// Override values use TOML syntax; bare words are taken as strings.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut root: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        for ov in overrides {
            apply_override(&mut root, ov)?;
        }
        let cfg: AppConfig = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.eval.validate()?;
        self.scene.validate()?;
        let z = &self.zoom;
        if !(0.0..=1.0).contains(&z.threshold) || z.margin_min > z.margin_max || !z.target_h.is_multiple_of(4) || !z.target_w.is_multiple_of(4)
        {
            return Err(Error::Config(
                "zoom needs threshold in [0, 1], margin_min ≤ margin_max and targets divisible by 4".into(),
            ));
        }
        if self.model.low_channels == 0 || self.model.high_channels == 0 {
            return Err(Error::Config("model channel widths must be positive".into()));
        }
        Ok(())
    }

    /// Training settings with the model and zoom sections folded in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            model: self.model,
            zoom: self.zoom,
            ..self.train.clone()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        format!("{:x}", Sha256::digest(self.to_toml().as_bytes()))
    }
}

fn apply_override(root: &mut toml::Table, ov: &str) -> Result<()> {
    let (key, raw) = ov
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{ov}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.len() != 2 || path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` must look like section.key")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let section = root
        .entry(path[0].to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let table = section
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("`{}` is not a section", path[0])))?;
    table.insert(path[1].to_string(), value);
    Ok(())
}
