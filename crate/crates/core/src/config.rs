//! TOML configuration files with `[model]` and `[train]` sections.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FileConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub fn load_config(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path)?;
    let config: FileConfig =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    config.model.validate()?;
    config.train.validate()?;
    Ok(config)
}

pub fn load_synth_spec(path: &Path) -> Result<SynthSpec> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, "").unwrap();
        let config = load_config(&path).unwrap();
        assert_eq!(config.model, ModelConfig::default());
        assert_eq!(config.train, TrainConfig::default());
    }

    #[test]
    fn sections_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(
            &path,
            r#"
[model]
base_channels = 8
tcb_base_channels = 4
heads = 2

[train]
lr0 = 1e-3
epochs = 12
crop = [64, 64]
lambda_cl = 0.3
"#,
        )
        .unwrap();
        let config = load_config(&path).unwrap();
        assert_eq!(config.model.base_channels, 8);
        assert_eq!(config.train.epochs, 12);
        assert_eq!(config.train.crop, (64, 64));
    }

    #[test]
    fn invalid_model_section_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, "[model]\ninput_size = 65\n").unwrap();
        assert!(load_config(&path).is_err());
    }

    #[test]
    fn synth_spec_parses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("synth.toml");
        std::fs::write(
            &path,
            "n_samples = 4\nimage_size = 32\ndistortion = \"mixed\"\nlevels = 3\nseed = 7\n",
        )
        .unwrap();
        let spec = load_synth_spec(&path).unwrap();
        assert_eq!(spec.n_samples, 4);
        assert_eq!(spec.levels, 3);
    }
}
