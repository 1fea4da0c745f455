//! Experiment settings and the corpus-to-trained-model path shared by the
//! `train` and `eval --compare` commands.

use serde::{Deserialize, Serialize};

use crate::data::generator::GeneratorSpec;
use crate::data::{encode_samples, Corpus, ReviewSample};
use crate::error::Result;
use crate::model::{Mode, Model, ModelSettings};
use crate::nn::derive_rng;
use crate::text::{VocabConfig, Vocabulary};
use crate::train::{fit, EpochRecord, TrainConfig, TrainReport};

const INIT_STREAM: u64 = 0x494e_4954;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub generator: GeneratorSpec,
    pub model: ModelSettings,
    pub vocab: VocabConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.train.validate()?;
        for mode in Mode::ALL {
            self.model.config(mode).validate().or_else(|e| {
                // vocab_size is filled in from the corpus, so a zero there is fine
                if self.model.text.vocab_size == 0 && mode.uses_text() {
                    let mut settings = self.model.clone();
                    settings.text.vocab_size = 1;
                    settings.config(mode).validate()
                } else {
                    Err(e)
                }
            })?;
        }
        Ok(())
    }

    /// Vocabulary learned from the training texts only.
    pub fn build_vocab(&self, train: &[ReviewSample]) -> Result<Vocabulary> {
        let texts: Vec<&str> = train.iter().map(|s| s.text.as_str()).collect();
        Vocabulary::build(&texts, self.vocab)
    }

    /// Fresh model for `mode`; every mode draws its initial weights from
    /// the same seed.
    pub fn init_model(&self, mode: Mode, vocab: Vocabulary) -> Result<Model> {
        Model::init(mode, &self.model, vocab, &mut derive_rng(self.train.seed, &[INIT_STREAM]))
    }

    /// Builds the vocabulary, trains on `corpus.train` with early stopping
    /// on `corpus.val`, and returns the best-epoch model.
    pub fn train_mode<E: FnMut(&EpochRecord)>(
        &self,
        corpus: &Corpus,
        mode: Mode,
        on_epoch: E,
    ) -> Result<(Model, TrainReport)> {
        let vocab = self.build_vocab(&corpus.train)?;
        let model = self.init_model(mode, vocab)?;
        let train = encode_samples(&corpus.train, &model)?;
        let val = encode_samples(&corpus.val, &model)?;
        fit(model, &train, &val, &self.train, on_epoch)
    }
}
