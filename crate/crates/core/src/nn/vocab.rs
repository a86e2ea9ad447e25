//! Token and tag vocabulary shared by all models of a run.

use crate::data::{Corpus, Ontology};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

pub const UNK: &str = "<unk>";
pub const MASK: &str = "<mask>";
pub const E1_OPEN: &str = "<e1>";
pub const E1_CLOSE: &str = "</e1>";
pub const E2_OPEN: &str = "<e2>";
pub const E2_CLOSE: &str = "</e2>";
pub const SOS: &str = "<sos>";
pub const EOS: &str = "<eos>";
pub const NULL_TAG: &str = "<null>";

const RESERVED: &[&str] = &[UNK, MASK, E1_OPEN, E1_CLOSE, E2_OPEN, E2_CLOSE, SOS, EOS];

/// Token encoding is the sum of a token embedding and an entity-type tag
/// embedding; unknown tokens map to a reserved unknown id and non-entity
/// tokens use the null tag.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    tags: Vec<String>,
    #[serde(skip)]
    token_ids: BTreeMap<String, usize>,
    #[serde(skip)]
    tag_ids: BTreeMap<String, usize>,
}

impl Vocab {
    /// Builds the vocabulary from the ontology (all entity values, so every
    /// KB entity is in-vocabulary by construction) plus corpus tokens.
    pub fn build(ontology: &Ontology, corpora: &[&Corpus]) -> Vocab {
        let mut words: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
        for e in &ontology.entities {
            words.insert(e.value.clone());
        }
        for corpus in corpora {
            for record in &corpus.records {
                for utt in &record.dialog.utterances {
                    for tok in &utt.tokens {
                        words.insert(tok.clone());
                    }
                }
            }
        }
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.into_iter().filter(|w| !RESERVED.contains(&w.as_str())));

        let mut tags: Vec<String> = vec![NULL_TAG.to_string()];
        let mut etypes = ontology.entity_types.clone();
        etypes.sort();
        tags.extend(etypes);

        Vocab::from_lists(tokens, tags)
    }

    pub fn from_lists(tokens: Vec<String>, tags: Vec<String>) -> Vocab {
        let token_ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        let tag_ids = tags
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab {
            tokens,
            tags,
            token_ids,
            tag_ids,
        }
    }

    /// Rebuilds the lookup maps after deserialization.
    pub fn reindex(&mut self) {
        self.token_ids = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        self.tag_ids = self
            .tags
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn token_id(&self, token: &str) -> usize {
        self.token_ids
            .get(token)
            .copied()
            .unwrap_or_else(|| self.token_ids[UNK])
    }

    pub fn known_token_id(&self, token: &str) -> Option<usize> {
        self.token_ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tag_id(&self, etype: Option<&str>) -> usize {
        match etype {
            Some(t) => self.tag_ids.get(t).copied().unwrap_or(0),
            None => 0,
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn n_tags(&self) -> usize {
        self.tags.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for t in &self.tokens {
            hasher.update(t.as_bytes());
            hasher.update([0u8]);
        }
        hasher.update([1u8]);
        for t in &self.tags {
            hasher.update(t.as_bytes());
            hasher.update([0u8]);
        }
        hex(&hasher.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
