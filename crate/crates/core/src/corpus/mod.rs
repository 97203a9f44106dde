//! Synthetic concept-to-text data: meaning representations, the template
//! grammar that realises them, vocabulary, dataset files and the decomposed
//! reference index.

mod dataset;
mod grammar;
mod index;
mod mr;
mod vocab;

pub use dataset::{Dataset, Instance, Split};
pub use grammar::{ActSpec, CompiledGrammar, Grammar, DEFAULT_GRAMMAR};
pub use index::{RefSeq, RefSet, ReferenceIndex};
pub use mr::{
    is_placeholder, placeholder_for, AttrKey, DaSchema, DaVector, DialogueAct,
    MeaningRepresentation, SchemaKey, Slot, PLACEHOLDER_PREFIX,
};
pub use vocab::{TokenId, Vocab, BOS, BOS_ID, EOS, EOS_ID, UNK, UNK_ID};

use std::path::Path;

use crate::error::{Error, Result};

/// Everything `gen-data` writes into a data directory.
#[derive(Debug, Clone)]
pub struct CorpusBundle {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub vocab: Vocab,
    pub schema: DaSchema,
}

impl CorpusBundle {
    pub fn generate(grammar: &CompiledGrammar, seed: u64, sizes: (usize, usize, usize)) -> Result<Self> {
        let (train, val, test) = grammar.generate_corpus(seed, sizes)?;
        Ok(CorpusBundle {
            train,
            val,
            test,
            vocab: Vocab::build(grammar.lexicon()),
            schema: grammar.schema(),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for d in [&self.train, &self.val, &self.test] {
            d.save(&dir.join(d.split.file_name()))?;
        }
        self.vocab.save(&dir.join("vocab.txt"))?;
        self.schema.save(&dir.join("schema.txt"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let load = |s: Split| Dataset::load(&dir.join(s.file_name()), s);
        Ok(CorpusBundle {
            train: load(Split::Train)?,
            val: load(Split::Validation)?,
            test: load(Split::Test)?,
            vocab: Vocab::load(&dir.join("vocab.txt"))?,
            schema: DaSchema::load(&dir.join("schema.txt"))?,
        })
    }
}
