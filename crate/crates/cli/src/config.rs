//! Run configuration: one JSON document that pins every stage of the
//! pipeline, plus the hash that ties artifacts back to it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use echoprobe_core::cka::Comparison;
use echoprobe_core::corpus::CorpusConfig;
use echoprobe_core::error::{Error, Result};
use echoprobe_core::interventions::InterventionConfig;
use echoprobe_core::model::{ModelConfig, TrainConfig};
use echoprobe_core::probes::ProbeConfig;

/// Settings for the representation-similarity stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CkaSection {
    /// Context lengths to analyze; `None` means every corpus length above 2.
    pub lengths: Option<Vec<usize>>,
    pub comparisons: Vec<Comparison>,
    pub max_pairs: usize,
    pub seed: u64,
}

impl Default for CkaSection {
    fn default() -> Self {
        CkaSection {
            lengths: None,
            comparisons: vec![Comparison::SameN, Comparison::Short2],
            max_pairs: 80,
            seed: 2026,
        }
    }
}

/// Settings for the attention-statistics stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttnSection {
    /// Block index to read decoding rows from; `None` means the last block.
    pub layer: Option<usize>,
    pub max_pairs: usize,
    pub seed: u64,
}

impl Default for AttnSection {
    fn default() -> Self {
        AttnSection {
            layer: None,
            max_pairs: 80,
            seed: 2026,
        }
    }
}

/// The complete run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Master seed of the disjoint training corpus (namespace "train").
    pub train_corpus_seed: u64,
    pub probe: ProbeConfig,
    pub cka: CkaSection,
    pub attn: AttnSection,
    pub interventions: InterventionConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            train_corpus_seed: 1007,
            probe: ProbeConfig::default(),
            cka: CkaSection::default(),
            attn: AttnSection::default(),
            interventions: InterventionConfig::default(),
        }
    }
}

impl RunConfig {
    /// Loads a config file; any parse problem is a config error (exit 2).
    /// `None` yields the built-in defaults.
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| {
            Error::config(format!("cannot read config {}: {e}", path.display()))
        })?;
        serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("invalid config {}: {e}", path.display())))
    }

    /// SHA-256 of the canonical JSON serialization; recorded in artifacts.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        let digest = h.finalize();
        let mut out = String::with_capacity(64);
        for b in digest {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }

    /// Corpus config for the disjoint training corpus.
    pub fn train_corpus(&self) -> CorpusConfig {
        CorpusConfig {
            namespace: "train".to_string(),
            master_seed: self.train_corpus_seed,
            ..self.corpus.clone()
        }
    }

    /// Model config with vocab size and sequence capacity derived from the
    /// corpus; the configured values act as minimums.
    pub fn resolved_model(&self, vocab_size: usize) -> ModelConfig {
        let needed = self
            .corpus
            .lengths
            .iter()
            .map(|&n| echoprobe_core::corpus::sequence_len(&self.corpus, n))
            .max()
            .unwrap_or(0);
        ModelConfig {
            vocab_size,
            max_seq_len: self.model.max_seq_len.max(needed),
            ..self.model.clone()
        }
    }

    /// Context lengths the CKA stage analyzes.
    pub fn cka_lengths(&self) -> Vec<usize> {
        match &self.cka.lengths {
            Some(list) => list.clone(),
            None => {
                let mut ls: Vec<usize> = self
                    .corpus
                    .lengths
                    .iter()
                    .copied()
                    .filter(|&n| n > 2)
                    .collect();
                ls.sort_unstable();
                ls
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_and_hash_is_stable() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn empty_json_gives_defaults() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn hash_changes_with_any_field() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        b.corpus.master_seed += 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn train_corpus_is_disjoint_namespace() {
        let cfg = RunConfig::default();
        let t = cfg.train_corpus();
        assert_eq!(t.namespace, "train");
        assert_ne!(t.master_seed, cfg.corpus.master_seed);
        assert_eq!(t.lengths, cfg.corpus.lengths);
    }

    #[test]
    fn resolved_model_covers_longest_sequence() {
        let cfg = RunConfig::default();
        let m = cfg.resolved_model(343);
        let longest = echoprobe_core::corpus::sequence_len(&cfg.corpus, 16);
        assert!(m.max_seq_len >= longest);
        assert_eq!(m.vocab_size, 343);
    }

    #[test]
    fn cka_lengths_default_skips_n2() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.cka_lengths(), vec![4, 8, 16]);
    }
}
