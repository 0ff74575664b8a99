//! Run configuration files and config-file digests.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::synthetic::SyntheticConfig;
use crate::error::{Error, Result};
use crate::recognition::EvalConfig;
use crate::sweep::SweepConfig;
use crate::trainer::TrainConfig;

/// Stable digest of a settings value: SHA-256 over its JSON form with keys
/// sorted at every level, first 16 hex digits.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let canonical = serde_json::to_value(value).expect("settings serialize to JSON");
    let text = serde_json::to_string(&canonical).expect("JSON value serializes");
    let digest = Sha256::digest(text.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// One TOML file with a section per subcommand. Missing sections and keys
/// take their defaults; unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub r#gen: SyntheticConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.train.episodes = 77;
        cfg.sweep.top_d = vec![3, 5];
        cfg.eval.top = vec![1, 2];
        let back = RunConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        for text in ["[train]\nepisode = 5\n", "[bogus]\n", "[train.dcm]\nscal = 3.0\n", "[gen]\nseeds = 1\n"] {
            let err = RunConfig::parse(text).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{text:?}: {err}");
        }
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg = RunConfig::parse("[train]\nepisodes = 10\n[train.dcm]\nmargin = 0.3\n").unwrap();
        assert_eq!(cfg.train.episodes, 10);
        assert_eq!(cfg.train.dcm.margin, 0.3);
        assert_eq!(cfg.train.dcm.scale, TrainConfig::default().dcm.scale);
        assert_eq!(cfg.r#gen, SyntheticConfig::default());
    }

    #[test]
    fn hash_is_key_order_independent() {
        let a: serde_json::Value = serde_json::from_str(r#"{"a":1,"b":{"c":2,"d":3}}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"b":{"d":3,"c":2},"a":1}"#).unwrap();
        assert_eq!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 16);
    }
}
