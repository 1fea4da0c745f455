//! Settings for the command-line tool: built-in defaults, overlaid by an
//! optional JSON file, overlaid by flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::generator::GeneratorSpec;
use crate::error::{Error, Result};
use crate::experiment::ExperimentConfig;
use crate::model::ModelSettings;
use crate::text::VocabConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Corpus directory (manifests plus `images/`).
    pub data: Option<PathBuf>,
    /// Model bundle to read or write.
    pub model: Option<PathBuf>,
    /// Output directory for generated data.
    pub out: Option<PathBuf>,
    /// Where reports go; stdout when unset.
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub generator: GeneratorSpec,
    pub model: ModelSettings,
    pub vocab: VocabConfig,
    pub train: TrainConfig,
    pub paths: PathsConfig,
}

impl CliConfig {
    /// Parses a JSON document. Keys that are absent keep their defaults;
    /// unknown keys are an error.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Defaults, or the file's contents when `path` is given.
    pub fn base(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    /// One seed for everything: data generation, initialization, shuffling
    /// and dropout.
    pub fn set_seed(&mut self, seed: u64) {
        self.generator.seed = seed;
        self.train.seed = seed;
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            generator: self.generator.clone(),
            model: self.model.clone(),
            vocab: self.vocab,
            train: self.train.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.experiment().validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(CliConfig::from_json("{}").unwrap(), CliConfig::default());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c = CliConfig::from_json(r#"{"train": {"lr": 0.01}, "generator": {"n": 50}}"#).unwrap();
        assert_eq!(c.train.lr, 0.01);
        assert_eq!(c.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(c.generator.n, 50);
        assert_eq!(c.generator.seed, GeneratorSpec::default().seed);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for doc in [r#"{"trian": {}}"#, r#"{"train": {"learning_rate": 1}}"#, r#"{"paths": {"dir": "x"}}"#] {
            let err = CliConfig::from_json(doc).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{doc}: {err}");
            assert_eq!(err.exit_code(), 1);
        }
    }

    #[test]
    fn load_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"bogus": 1}"#).unwrap();
        let msg = CliConfig::load(&path).unwrap_err().to_string();
        assert!(msg.contains("c.json") && msg.contains("bogus"), "{msg}");
        assert!(matches!(CliConfig::load(&dir.path().join("none.json")), Err(Error::Io { .. })));
    }

    #[test]
    fn round_trips_through_json() {
        let mut c = CliConfig::default();
        c.set_seed(42);
        c.paths.data = Some("corpus".into());
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(CliConfig::from_json(&text).unwrap(), c);
    }
}
