//! TOML application configuration: one section per pipeline stage, every
//! field optional with the module defaults filled in.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ann::AnnConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::indexer::IndexerConfig;
use crate::retrieval::RetrievalParams;
use crate::synth::SynthConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    pub encoder: EncoderConfig,
    pub indexer: IndexerConfig,
    pub ann: AnnConfig,
    pub retrieval: RetrievalParams,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: AppConfig = toml::from_str(&text)
            .map_err(|e| Error::malformed(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.indexer.validate()?;
        self.retrieval.validate()?;
        self.synth.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_yields_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.toml");
        std::fs::write(&p, "").unwrap();
        let cfg = AppConfig::load(&p).unwrap();
        assert_eq!(cfg.encoder.n_query, 32);
        assert_eq!(cfg.encoder.dim, 128);
        assert_eq!(cfg.indexer.group_size, 100_000);
        assert_eq!(cfg.ann.partitions, 2000);
        assert_eq!(cfg.retrieval.k, 1000);
    }

    #[test]
    fn sections_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.toml");
        std::fs::write(
            &p,
            "[encoder]\nn_query = 8\ndim = 32\n\n[ann]\npartitions = 64\nprobes = 8\n",
        )
        .unwrap();
        let cfg = AppConfig::load(&p).unwrap();
        assert_eq!(cfg.encoder.n_query, 8);
        assert_eq!(cfg.encoder.dim, 32);
        assert_eq!(cfg.ann.partitions, 64);
        assert_eq!(cfg.ann.probes, 8);
        // untouched sections keep defaults
        assert_eq!(cfg.indexer.batch_size, 128);
    }

    #[test]
    fn invalid_values_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.toml");
        std::fs::write(&p, "[encoder]\nn_query = 1\n").unwrap();
        assert!(AppConfig::load(&p).is_err());
        std::fs::write(&p, "[indexer]\nbytes_per_dim = 3\n").unwrap();
        assert!(AppConfig::load(&p).is_err());
        std::fs::write(&p, "not toml [", ).unwrap();
        assert!(AppConfig::load(&p).is_err());
    }

    #[test]
    fn shipped_example_config_matches_defaults() {
        let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("../../config.example.toml");
        let cfg = AppConfig::load(&path).unwrap();
        let defaults = AppConfig::default();
        assert_eq!(cfg.to_toml(), defaults.to_toml());
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = AppConfig::default();
        let text = cfg.to_toml();
        let back: AppConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.encoder.n_query, cfg.encoder.n_query);
        assert_eq!(back.retrieval.k, cfg.retrieval.k);
        assert_eq!(back.train.learning_rate, cfg.train.learning_rate);
    }
}
