//! The trainable system: vocabulary, configuration, and all parameters.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Biography, EvidenceDocument};
use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::generator::{self, GeneratorConfig, Source};
use crate::numerics::ParamStore;
use crate::retriever::{QueryMode, RetrievalConfig, RetrievedEvidence, Retriever};
use crate::text::Vocabulary;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    SectionBySection,
    WholeArticle,
}

impl Granularity {
    pub const ALL: [Granularity; 2] = [Granularity::SectionBySection, Granularity::WholeArticle];

    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::SectionBySection => "section_by_section",
            Granularity::WholeArticle => "whole_article",
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Granularity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown granularity {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub generator: GeneratorConfig,
    pub retrieval: RetrievalConfig,
    pub query_mode: QueryMode,
    pub granularity: Granularity,
    pub max_vocab: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            generator: GeneratorConfig::default(),
            retrieval: RetrievalConfig::default(),
            query_mode: QueryMode::Full,
            granularity: Granularity::SectionBySection,
            max_vocab: 8000,
        }
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig::desk(),
            generator: GeneratorConfig::desk(),
            retrieval: RetrievalConfig::desk(),
            max_vocab: 2000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.generator.validate()?;
        self.retrieval.validate()?;
        if self.max_vocab <= crate::text::NUM_RESERVED {
            return Err(Error::Config("max_vocab must exceed the reserved tokens".into()));
        }
        Ok(())
    }
}

/// Texts that contribute tokens to a corpus vocabulary.
pub fn vocabulary_texts(corpus: &[Biography]) -> Vec<String> {
    let mut texts = Vec::new();
    for b in corpus {
        texts.push(b.name.clone());
        texts.extend(b.occupations.iter().cloned());
        for s in &b.sections {
            texts.push(s.heading.clone());
            texts.push(s.text.clone());
        }
        texts.extend(b.web_hits.iter().map(|d| d.text.clone()));
    }
    texts
}

#[derive(Clone, Debug, PartialEq)]
pub struct BioModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
}

impl BioModel {
    pub fn init(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        encoder::init_encoder(&config.encoder, vocab.len(), &mut params, &mut rng);
        generator::init_generator(&config.generator, vocab.len(), &mut params, &mut rng);
        Ok(Self { config, vocab, params })
    }

    /// Embedding tables must match the vocabulary.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let mut tables = vec![format!("{}.tok", encoder::SENTENCE_PREFIX), format!("{}.tok", generator::PREFIX)];
        if !self.config.encoder.tied_encoders {
            tables.push(format!("{}.tok", encoder::QUERY_PREFIX_UNTIED));
        }
        for t in tables {
            let rows =
                self.params.get(&t).ok_or_else(|| Error::VocabMismatch(format!("missing parameter {t}")))?.rows();
            if rows != self.vocab.len() {
                return Err(Error::VocabMismatch(format!(
                    "{t} has {rows} rows, vocabulary has {} tokens",
                    self.vocab.len()
                )));
            }
        }
        Ok(())
    }

    pub fn retriever(&self) -> Retriever<'_> {
        Retriever {
            encoder: &self.config.encoder,
            params: &self.params,
            vocab: &self.vocab,
            config: &self.config.retrieval,
        }
    }

    /// Retrieve for `query`; an empty candidate pool yields empty evidence.
    pub fn retrieve(&self, query: &crate::retriever::Query, docs: &[EvidenceDocument]) -> Result<RetrievedEvidence> {
        match self.retriever().retrieve(query, docs) {
            Err(Error::EmptyEvidence) => Ok(RetrievedEvidence::default()),
            other => other,
        }
    }

    pub fn source(&self, query: &crate::retriever::Query, evidence: &RetrievedEvidence) -> Source {
        Source::build(&self.vocab, &query.full_ids(&self.vocab), evidence, self.config.generator.max_source)
    }
}
