//! Experiment manifest: a TOML file mirroring the command-line flags.
//!
//! ```toml
//! seed = 3
//! mini = true
//! scenario = "complex"
//!
//! [world]
//! episode_step_limit = 80
//!
//! [train]
//! episodes = 400
//! demo_fraction = 0.5
//!
//! [train.loss]
//! margin = 0.8
//! ```
//!
//! Flags override the file; the file overrides the built-in defaults.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::demos::SourceFilter;
use crate::learner::TrainConfig;
use crate::sim::{ScenarioKind, WorldConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub seed: Option<u64>,
    pub mini: Option<bool>,
    pub scenario: Option<ScenarioKind>,
    pub demos: Option<PathBuf>,
    pub demo_source: Option<SourceFilter>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub world: toml::Table,
    #[serde(default)]
    pub train: toml::Table,
    #[serde(default)]
    pub server: ServerSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerSection {
    pub port: Option<u16>,
    pub static_dir: Option<PathBuf>,
    pub demo_out: Option<PathBuf>,
    pub tick_wall_seconds: Option<f64>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        Self::parse(&text)
    }
}

/// Overlays `overrides` onto `base`, recursing into nested tables. Keys
/// that `base` does not have are rejected.
pub fn overlay<T: Serialize + DeserializeOwned>(base: &T, overrides: &toml::Table) -> Result<T, ConfigError> {
    let mut table = toml::Table::try_from(base).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    merge(&mut table, overrides, "")?;
    toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| ConfigError::Invalid(e.to_string()))
}

fn merge(base: &mut toml::Table, overrides: &toml::Table, prefix: &str) -> Result<(), ConfigError> {
    for (key, value) in overrides {
        let path = format!("{prefix}{key}");
        match (base.get_mut(key), value) {
            (None, _) => return Err(ConfigError::Invalid(format!("unknown setting `{path}`"))),
            (Some(toml::Value::Table(inner)), toml::Value::Table(sub)) => merge(inner, sub, &format!("{path}."))?,
            (Some(slot), v) => *slot = v.clone(),
        }
    }
    Ok(())
}

/// Everything a run depends on, after defaults, file and flags are merged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub seed: u64,
    pub mini: bool,
    pub scenario: ScenarioKind,
    pub world: WorldConfig,
    pub train: TrainConfig,
}

impl ResolvedConfig {
    pub fn resolve(
        file: &ConfigFile,
        seed: Option<u64>,
        mini: bool,
        scenario: Option<ScenarioKind>,
    ) -> Result<Self, ConfigError> {
        let mini = mini || file.mini.unwrap_or(false);
        let (world, train) = if mini {
            (WorldConfig::mini(), TrainConfig::mini())
        } else {
            (WorldConfig::default(), TrainConfig::default())
        };
        let world: WorldConfig = overlay(&world, &file.world)?;
        world.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let mut train: TrainConfig = overlay(&train, &file.train)?;
        let seed = seed.or(file.seed).unwrap_or(train.seed);
        train.seed = seed;
        train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(Self { seed, mini, scenario: scenario.or(file.scenario).unwrap_or(ScenarioKind::Simple), world, train })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("resolved config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_flags() {
        let file = ConfigFile::parse(
            "seed = 3\nmini = true\nscenario = \"complex\"\n[world]\nepisode_step_limit = 80\n[train]\nepisodes = 40\n[train.loss]\nmargin = 0.5\n",
        )
        .unwrap();
        let r = ResolvedConfig::resolve(&file, None, false, None).unwrap();
        assert!(r.mini);
        assert_eq!(r.seed, 3);
        assert_eq!(r.train.seed, 3);
        assert_eq!(r.scenario, ScenarioKind::Complex);
        assert_eq!(r.world.episode_step_limit, 80);
        assert_eq!(r.world.map_side, 600.0);
        assert_eq!(r.train.episodes, 40);
        assert_eq!(r.train.loss.margin, 0.5);
        assert_eq!(r.train.loss.n, 10);

        let r = ResolvedConfig::resolve(&file, Some(9), false, Some(ScenarioKind::Simple)).unwrap();
        assert_eq!(r.seed, 9);
        assert_eq!(r.scenario, ScenarioKind::Simple);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ConfigFile::parse("colour = 1").is_err());
        let file = ConfigFile::parse("[train]\nwarp = 1").unwrap();
        assert!(ResolvedConfig::resolve(&file, None, false, None).is_err());
        let file = ConfigFile::parse("[train.loss]\nwarp = 1").unwrap();
        assert!(ResolvedConfig::resolve(&file, None, false, None).is_err());
    }

    #[test]
    fn resolved_prints_as_toml() {
        let r = ResolvedConfig::resolve(&ConfigFile::default(), Some(1), true, None).unwrap();
        let text = r.to_toml();
        let back: ResolvedConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, r);
    }
}
