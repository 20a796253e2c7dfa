//! Run configuration: a TOML file with `[train]` and `[model]` tables,
//! overridden by `PROTORES_TRAIN_<KEY>` / `PROTORES_MODEL_<KEY>` environment
//! variables. Command-line flags are applied last by the caller, giving
//! flag > environment > file > default.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Other top-level tables (such as `[serve]`) are left to their owners.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
}

/// Environment values are read as TOML literals (`1e-3`, `true`, `[0.1, 0.2,
/// 0.1]`, `"psa"`); anything that does not parse is taken as a bare string.
fn env_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Builds the configuration from an optional file and an environment listing.
pub fn resolve_config<I>(path: Option<&Path>, env: I) -> Result<RunConfig>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut root: toml::Table = match path {
        Some(p) => fs::read_to_string(p)?
            .parse()
            .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => toml::Table::new(),
    };
    for (key, value) in env {
        let (section, field) = if let Some(k) = key.strip_prefix("PROTORES_TRAIN_") {
            ("train", k)
        } else if let Some(k) = key.strip_prefix("PROTORES_MODEL_") {
            ("model", k)
        } else {
            continue;
        };
        let table = root
            .entry(section)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("[{section}] must be a table")))?;
        table.insert(field.to_ascii_lowercase(), env_value(&value));
    }
    RunConfig::deserialize(toml::Value::Table(root)).map_err(|e| Error::Config(e.to_string()))
}

/// [`resolve_config`] against the process environment.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    resolve_config(path, std::env::vars())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderKind;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn defaults_without_file_or_env() {
        assert_eq!(resolve_config(None, env(&[])).unwrap(), RunConfig::default());
    }

    #[test]
    fn env_overrides_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "[train]\nbatch_size = 64\nseed = 3\n[model]\nwidth = 128\nencoder = \"mcdc\"\n").unwrap();
        let cfg = resolve_config(
            Some(&path),
            env(&[
                ("PROTORES_TRAIN_SEED", "9"),
                ("PROTORES_TRAIN_SIGMA_MAX", "[0.1, 0.2, 0.3]"),
                ("PROTORES_MODEL_ENCODER", "masked-fcr"),
                ("HOME", "/root"),
            ]),
        )
        .unwrap();
        assert_eq!(cfg.train.batch_size, 64);
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.train.sigma_max, [0.1, 0.2, 0.3]);
        assert_eq!(cfg.model.width, 128);
        assert_eq!(cfg.model.encoder, EncoderKind::MaskedFcr);
        assert_eq!(cfg.model.layers_per_block, 3);
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(matches!(
            resolve_config(None, env(&[("PROTORES_TRAIN_BATCHSIZE", "3")])),
            Err(Error::Config(_))
        ));
    }
}
