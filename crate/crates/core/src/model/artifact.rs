use std::fs;
use std::path::Path;

use super::{Model, ModelConfig, ModelError};
use crate::diff::{read_checkpoint, write_checkpoint};
use crate::embedding::{load_embeddings, save_embeddings, EmbeddingTable};
use crate::features::{CategoricalVocab, Featurizer, NormStats};
use crate::network::RoadNetwork;

const CHECKPOINT: &str = "checkpoint.txt";
const CONFIG: &str = "model.toml";
const STATS: &str = "norm_stats.csv";
const VOCAB: &str = "vocab.csv";
const EMBEDDINGS: &str = "embeddings.csv";

/// A trained model together with everything needed to featurise queries
/// for it. Stored as a directory of plain-text files.
#[derive(Debug, Clone)]
pub struct ModelArtifact {
    pub model: Model,
    pub stats: NormStats,
    pub vocab: CategoricalVocab,
    pub embeddings: EmbeddingTable,
}

impl ModelArtifact {
    pub fn featurizer<'a>(&'a self, network: &'a RoadNetwork) -> Featurizer<'a> {
        Featurizer {
            network,
            embeddings: &self.embeddings,
            stats: Some(&self.stats),
            vocab: &self.vocab,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<(), ModelError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CHECKPOINT), write_checkpoint(&self.model.params))?;
        let cfg = toml::to_string(&self.model.config).map_err(|e| ModelError::Artifact(e.to_string()))?;
        fs::write(dir.join(CONFIG), cfg)?;
        self.stats.save(&dir.join(STATS))?;
        self.vocab.save(&dir.join(VOCAB))?;
        save_embeddings(&self.embeddings, &dir.join(EMBEDDINGS))
            .map_err(|e| ModelError::Artifact(e.to_string()))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, ModelError> {
        let read = |name: &str| {
            fs::read_to_string(dir.join(name))
                .map_err(|e| ModelError::Artifact(format!("{}: {e}", dir.join(name).display())))
        };
        let config: ModelConfig =
            toml::from_str(&read(CONFIG)?).map_err(|e| ModelError::Artifact(format!("{CONFIG}: {e}")))?;
        let params = read_checkpoint(&read(CHECKPOINT)?).map_err(|e| ModelError::Artifact(format!("{CHECKPOINT}: {e}")))?;
        let model = Model::from_params(config, params)?;
        let stats = NormStats::load(&dir.join(STATS))?;
        let vocab = CategoricalVocab::load(&dir.join(VOCAB))?;
        let embeddings =
            load_embeddings(&dir.join(EMBEDDINGS)).map_err(|e| ModelError::Artifact(format!("{EMBEDDINGS}: {e}")))?;
        for (k, f) in crate::features::CategoricalFeature::ALL.iter().enumerate() {
            let rows = model.params.get(&super::cat_name(*f)).map(|m| m.nrows());
            if rows != Some(vocab.rows(k)) {
                return Err(ModelError::Artifact(format!(
                    "vocabulary of {} does not match its table",
                    f.name()
                )));
            }
        }
        Ok(Self {
            model,
            stats,
            vocab,
            embeddings,
        })
    }
}
