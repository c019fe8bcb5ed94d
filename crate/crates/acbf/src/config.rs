//! TOML overrides on top of preset parameters.
//!
//! Tables merge recursively; any other value replaces the preset value
//! wholesale. Keys that the preset does not have are rejected.

use serde_json::Value;
use thiserror::Error;

use crate::scenarios::ScenarioParams;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot parse override file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("unknown override key '{0}'")]
    UnknownKey(String),
    #[error("override has the wrong shape: {0}")]
    Shape(#[from] serde_json::Error),
}

fn merge(base: &mut Value, over: Value, path: &str) -> Result<(), ConfigError> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() => merge(slot, v, &p)?,
                    Some(slot) => *slot = v,
                    None => return Err(ConfigError::UnknownKey(p)),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

pub fn apply_overrides(params: &ScenarioParams, toml_text: &str) -> Result<ScenarioParams, ConfigError> {
    let over: Value = toml::from_str(toml_text)?;
    let mut base = serde_json::to_value(params)?;
    merge(&mut base, over, "")?;
    Ok(serde_json::from_value(base)?)
}
