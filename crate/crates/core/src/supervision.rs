//! Distant supervision for the row-insertion stage: label type-consistent
//! candidate triples from each dialog against the training KB into
//! positive / negative / infer sets.

use crate::data::{kb_to_triples, Corpus, Dialog, KnowledgeBase, Ontology, Triple};
use crate::{CoreError, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    /// The triple exists in the training KB.
    Positive,
    /// The head exists in the training KB but the triple does not.
    Negative,
    /// The head itself is missing; scored by the trained model.
    Infer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledCandidate {
    pub dialog_id: String,
    pub triple: Triple,
    pub label: Label,
}

/// All type-consistent `(e1, r, e2)` over distinct mentioned entities, in
/// deterministic order: first-mention order of the endpoints, then relation
/// name. Duplicate mentions collapse to one endpoint.
pub fn candidate_triples(dialog: &Dialog, ontology: &Ontology) -> Vec<Triple> {
    let entities = dialog.mentioned_entities();
    let mut relations: Vec<_> = ontology.relation_types.iter().collect();
    relations.sort_by(|a, b| a.name.cmp(&b.name));
    let mut out = Vec::new();
    for e1 in &entities {
        for e2 in &entities {
            if e1 == e2 {
                continue;
            }
            for rel in &relations {
                if rel.head_type == e1.etype && rel.tail_type == e2.etype {
                    out.push(Triple::new((*e1).clone(), rel.name.clone(), (*e2).clone()));
                }
            }
        }
    }
    out
}

/// Labels candidates against the training KB. The negative annotation is
/// conservative: it requires the head to exist in the KB so that missing
/// rows never produce false negatives.
pub fn label_candidates(
    dialog_id: &str,
    candidates: &[Triple],
    train_kb: &KnowledgeBase,
) -> Vec<LabeledCandidate> {
    let triples = kb_to_triples(train_kb);
    let heads: BTreeSet<&str> = train_kb.rows.iter().map(|r| r.head.value.as_str()).collect();
    candidates
        .iter()
        .map(|t| {
            let label = if triples.contains(t) {
                Label::Positive
            } else if heads.contains(t.head.value.as_str()) {
                Label::Negative
            } else {
                Label::Infer
            };
            LabeledCandidate {
                dialog_id: dialog_id.to_string(),
                triple: t.clone(),
                label,
            }
        })
        .collect()
}

/// The labeled corpus: positives and negatives form the training set; infer
/// candidates are retained per dialog for inference.
#[derive(Debug, Clone, Default)]
pub struct RiDataset {
    pub labeled: Vec<LabeledCandidate>,
}

impl RiDataset {
    pub fn train_set(&self) -> impl Iterator<Item = &LabeledCandidate> {
        self.labeled.iter().filter(|c| c.label != Label::Infer)
    }

    pub fn infer_set(&self) -> impl Iterator<Item = &LabeledCandidate> {
        self.labeled.iter().filter(|c| c.label == Label::Infer)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)
            .map_err(|e| CoreError::io(format!("creating {}", path.display()), e))?;
        for c in &self.labeled {
            let line = serde_json::to_string(&WireCandidate::from(c))
                .map_err(|e| CoreError::json("serializing candidate", e))?;
            writeln!(file, "{line}").map_err(|e| CoreError::io("writing candidate", e))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| CoreError::io(format!("opening {}", path.display()), e))?;
        let mut labeled = Vec::new();
        for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| CoreError::io(format!("reading line {n}"), e))?;
            if line.trim().is_empty() {
                continue;
            }
            let wire: WireCandidate = serde_json::from_str(&line)
                .map_err(|e| CoreError::json(format!("parsing candidate line {n}"), e))?;
            labeled.push(wire.into());
        }
        Ok(RiDataset { labeled })
    }
}

#[derive(Serialize, Deserialize)]
struct WireCandidate {
    dialog_id: String,
    head: crate::data::Entity,
    relation: String,
    tail: crate::data::Entity,
    label: Label,
}

impl From<&LabeledCandidate> for WireCandidate {
    fn from(c: &LabeledCandidate) -> Self {
        WireCandidate {
            dialog_id: c.dialog_id.clone(),
            head: c.triple.head.clone(),
            relation: c.triple.relation.clone(),
            tail: c.triple.tail.clone(),
            label: c.label,
        }
    }
}

impl From<WireCandidate> for LabeledCandidate {
    fn from(w: WireCandidate) -> Self {
        LabeledCandidate {
            dialog_id: w.dialog_id,
            triple: Triple::new(w.head, w.relation, w.tail),
            label: w.label,
        }
    }
}

/// Labels every record of a corpus against the shared training KB.
pub fn build_ri_dataset(corpus: &Corpus, train_kb: &KnowledgeBase, ontology: &Ontology) -> RiDataset {
    let mut labeled = Vec::new();
    for record in &corpus.records {
        let candidates = candidate_triples(&record.dialog, ontology);
        labeled.extend(label_candidates(&record.dialog.id, &candidates, train_kb));
    }
    RiDataset { labeled }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Entity, Mention, RelationType, Row, Speaker, Utterance};

    fn ontology() -> Ontology {
        Ontology {
            entity_types: vec!["restaurant".into(), "cuisine".into(), "area".into()],
            relation_types: vec![
                RelationType {
                    name: "cuisine".into(),
                    head_type: "restaurant".into(),
                    tail_type: "cuisine".into(),
                    latent: false,
                },
                RelationType {
                    name: "area".into(),
                    head_type: "restaurant".into(),
                    tail_type: "area".into(),
                    latent: false,
                },
            ],
            entities: vec![],
        }
    }

    fn mention_dialog(mentions: Vec<(&str, &str)>) -> Dialog {
        // One user utterance carrying all mentions as consecutive tokens.
        let tokens: Vec<String> = mentions.iter().map(|(v, _)| v.to_string()).collect();
        let ms = mentions
            .iter()
            .enumerate()
            .map(|(i, (v, t))| Mention {
                start: i,
                end: i + 1,
                entity: Entity::new(*v, *t),
            })
            .collect();
        Dialog {
            id: "d".into(),
            timestamp: 0,
            utterances: vec![Utterance::new(Speaker::User, tokens, ms)],
        }
    }

    #[test]
    fn figure_style_candidates() {
        let d = mention_dialog(vec![
            ("bangkok_city", "restaurant"),
            ("thai", "cuisine"),
            ("west", "area"),
        ]);
        let cands = candidate_triples(&d, &ontology());
        assert_eq!(cands.len(), 2);
        // Endpoints pair up in first-mention order: thai before west.
        assert_eq!(cands[0].relation, "cuisine");
        assert_eq!(cands[0].tail.value, "thai");
        assert_eq!(cands[1].relation, "area");
        assert_eq!(cands[1].tail.value, "west");
        assert!(cands.iter().all(|t| t.head.value == "bangkok_city"));
    }

    #[test]
    fn single_mention_yields_no_candidates() {
        let d = mention_dialog(vec![("bangkok_city", "restaurant")]);
        assert!(candidate_triples(&d, &ontology()).is_empty());
    }

    #[test]
    fn label_partition() {
        let ont = ontology();
        let kb = KnowledgeBase::new(
            "t",
            vec![
                Row::new(Entity::new("in_kb", "restaurant"))
                    .with_field("cuisine", Entity::new("thai", "cuisine")),
            ],
        )
        .unwrap();
        let d = mention_dialog(vec![
            ("in_kb", "restaurant"),
            ("la_margherita", "restaurant"),
            ("thai", "cuisine"),
            ("italian", "cuisine"),
        ]);
        let labeled = label_candidates("d", &candidate_triples(&d, &ont), &kb);
        for c in &labeled {
            match (c.triple.head.value.as_str(), c.triple.tail.value.as_str()) {
                ("in_kb", "thai") => assert_eq!(c.label, Label::Positive),
                ("in_kb", _) => assert_eq!(c.label, Label::Negative),
                ("la_margherita", _) => assert_eq!(c.label, Label::Infer),
                other => panic!("unexpected candidate {other:?}"),
            }
        }
        // Exactly one label each, by construction of the match above.
        assert_eq!(labeled.len(), 4);
    }
}
