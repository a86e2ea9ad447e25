use super::dialog::Dialog;
use super::kb::{KnowledgeBase, Row};
use super::ontology::Ontology;
use crate::{CoreError, Result};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::BTreeSet;

/// The relation that orders recommendations within a domain. Suggestion
/// sequences follow this key (rating, descending, by default).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderingKey {
    pub relation: String,
    pub descending: bool,
}

impl Default for OrderingKey {
    fn default() -> Self {
        OrderingKey {
            relation: "rating".into(),
            descending: true,
        }
    }
}

impl OrderingKey {
    /// Compares two key values, numerically when both parse as integers and
    /// lexicographically otherwise. `Greater` means `a` outranks `b`.
    pub fn outranks(&self, a: &str, b: &str) -> bool {
        let ord = match (a.parse::<i64>(), b.parse::<i64>()) {
            (Ok(x), Ok(y)) => x.cmp(&y),
            _ => a.cmp(b),
        };
        if self.descending {
            ord == Ordering::Greater
        } else {
            ord == Ordering::Less
        }
    }
}

/// Final user constraints of a dialog, as `(relation, value)` pairs.
///
/// Derived from the last agent `api_call` utterance: its typed mentions are
/// mapped onto relations through the ontology's tail types. Dialogs without
/// an `api_call` yield no constraints.
pub fn user_constraints(dialog: &Dialog, ontology: &Ontology) -> Vec<(String, String)> {
    let by_tail = ontology.relations_by_tail_type();
    let Some((_, utt)) = last_api_call(dialog) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for m in &utt.mentions {
        if let Some(rels) = by_tail.get(m.entity.etype.as_str()) {
            if let Some(rel) = rels.first() {
                out.push((rel.name.clone(), m.entity.value.clone()));
            }
        }
    }
    out
}

/// Heads the agent suggested, in suggestion order: head-typed mentions in
/// agent utterances after the last `api_call` (whole dialog when absent).
pub fn recommended_heads(dialog: &Dialog, ontology: &Ontology) -> Vec<String> {
    let head_types = ontology.head_types();
    let start = last_api_call(dialog).map(|(i, _)| i + 1).unwrap_or(0);
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, utt) in dialog.agent_utterances() {
        if i < start {
            continue;
        }
        for m in &utt.mentions {
            if head_types.contains(m.entity.etype.as_str()) && seen.insert(m.entity.value.clone())
            {
                out.push(m.entity.value.clone());
            }
        }
    }
    out
}

fn last_api_call(dialog: &Dialog) -> Option<(usize, &super::dialog::Utterance)> {
    dialog
        .agent_utterances()
        .filter(|(_, u)| u.tokens.first().map(String::as_str) == Some("api_call"))
        .last()
}

/// Decides whether a dialog is consistent with a KB snapshot, using the
/// contemporary gold snapshot as the reference.
///
/// The check restricts both KBs to the rows the dialog participates in:
///
/// * every gold row whose head is mentioned must exist in `kb`, agree with
///   the gold row on every non-latent field both define, and define every
///   non-latent field whose gold value is itself uttered in the dialog
///   (latent fields such as the ordering key are judged through the
///   recommendation order below, never by equality — arbitration may pick
///   any order-preserving value);
/// * `kb` must not contain an extra row (one absent from the gold snapshot)
///   that matches the final user constraints and strictly outranks the first
///   recommended entity under the ordering key.
///
/// `kb == gold` is therefore consistent for every dialog.
pub fn consistency_judge(
    dialog: &Dialog,
    kb: &KnowledgeBase,
    gold: &KnowledgeBase,
    ontology: &Ontology,
    key: &OrderingKey,
) -> bool {
    let mentions = dialog.mention_values();
    let latent: BTreeSet<&str> = ontology.latent_relations().map(|r| r.name.as_str()).collect();

    // (a) mentioned gold rows survive into kb without contradiction.
    for gold_row in &gold.rows {
        if !mentions.contains(gold_row.head.value.as_str()) {
            continue;
        }
        let Some(kb_row) = kb.row(&gold_row.head) else {
            return false;
        };
        for (rel, tail) in &kb_row.fields {
            if latent.contains(rel.as_str()) {
                continue;
            }
            match gold_row.fields.get(rel) {
                Some(gold_tail) if gold_tail == tail => {}
                _ => return false,
            }
        }
        for (rel, tail) in &gold_row.fields {
            if latent.contains(rel.as_str()) {
                continue;
            }
            if mentions.contains(tail.value.as_str()) && !kb_row.fields.contains_key(rel) {
                return false;
            }
        }
    }

    // (b) no extra row outranks the first recommendation.
    let constraints = user_constraints(dialog, ontology);
    let recs = recommended_heads(dialog, ontology);
    if let (Some(first), false) = (recs.first(), constraints.is_empty()) {
        let first_key = kb
            .row_by_head_value(first)
            .and_then(|r| r.fields.get(&key.relation))
            .map(|e| e.value.clone());
        let gold_heads: BTreeSet<&str> =
            gold.rows.iter().map(|r| r.head.value.as_str()).collect();
        for row in &kb.rows {
            if gold_heads.contains(row.head.value.as_str()) {
                continue;
            }
            if !matches_constraints(row, &constraints) {
                continue;
            }
            let Some(row_key) = row.fields.get(&key.relation) else {
                continue;
            };
            match &first_key {
                Some(fk) => {
                    if key.outranks(&row_key.value, fk) {
                        return false;
                    }
                }
                // The recommended row has no ordering key to defend itself
                // with; any matching extra row upsets the order.
                None => return false,
            }
        }
    }

    true
}

fn matches_constraints(row: &Row, constraints: &[(String, String)]) -> bool {
    constraints.iter().all(|(rel, value)| {
        row.fields
            .get(rel)
            .map(|e| e.value == *value)
            .unwrap_or(false)
    })
}

/// Fraction of records judged inconsistent. Every record must resolve to a
/// gold snapshot; simulated corpora always do.
pub fn inconsistency_rate<'a, I>(
    items: I,
    kb: &KnowledgeBase,
    ontology: &Ontology,
    key: &OrderingKey,
) -> Result<f64>
where
    I: IntoIterator<Item = (&'a Dialog, Option<&'a KnowledgeBase>)>,
{
    let mut total = 0usize;
    let mut inconsistent = 0usize;
    for (dialog, gold) in items {
        let gold = gold.ok_or_else(|| CoreError::JudgeUnavailable(dialog.id.clone()))?;
        total += 1;
        if !consistency_judge(dialog, kb, gold, ontology, key) {
            inconsistent += 1;
        }
    }
    if total == 0 {
        return Ok(0.0);
    }
    Ok(inconsistent as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Entity, Mention, RelationType, Speaker, Utterance};

    fn ontology() -> Ontology {
        Ontology {
            entity_types: vec![
                "restaurant".into(),
                "cuisine".into(),
                "location".into(),
                "rating".into(),
            ],
            relation_types: vec![
                RelationType {
                    name: "cuisine".into(),
                    head_type: "restaurant".into(),
                    tail_type: "cuisine".into(),
                    latent: false,
                },
                RelationType {
                    name: "location".into(),
                    head_type: "restaurant".into(),
                    tail_type: "location".into(),
                    latent: false,
                },
                RelationType {
                    name: "rating".into(),
                    head_type: "restaurant".into(),
                    tail_type: "rating".into(),
                    latent: true,
                },
            ],
            entities: (1..=8)
                .map(|i| Entity::new(i.to_string(), "rating"))
                .collect(),
        }
    }

    fn resto(name: &str, cuisine: &str, loc: &str, rating: &str) -> Row {
        Row::new(Entity::new(name, "restaurant"))
            .with_field("cuisine", Entity::new(cuisine, "cuisine"))
            .with_field("location", Entity::new(loc, "location"))
            .with_field("rating", Entity::new(rating, "rating"))
    }

    fn utt(speaker: Speaker, text: &str, mentions: Vec<(usize, &str, &str)>) -> Utterance {
        let tokens: Vec<String> = text.split_whitespace().map(str::to_owned).collect();
        let mentions = mentions
            .into_iter()
            .map(|(start, value, etype)| Mention {
                start,
                end: start + 1,
                entity: Entity::new(value, etype),
            })
            .collect();
        Utterance::new(speaker, tokens, mentions)
    }

    /// A dialog that asks for thai/west and gets `first` recommended.
    fn dialog(first: &str) -> Dialog {
        Dialog {
            id: "d0".into(),
            timestamp: 0,
            utterances: vec![
                utt(Speaker::User, "hi", vec![]),
                utt(
                    Speaker::Agent,
                    "api_call thai west",
                    vec![(1, "thai", "cuisine"), (2, "west", "location")],
                ),
                utt(Speaker::User, "<silence>", vec![]),
                utt(
                    Speaker::Agent,
                    &format!("what do you think of this option: {first}"),
                    vec![(7, first, "restaurant")],
                ),
            ],
        }
    }

    #[test]
    fn identity_is_consistent() {
        let ont = ontology();
        let gold = KnowledgeBase::new(
            "g",
            vec![resto("bangkok_city", "thai", "west", "7")],
        )
        .unwrap();
        let d = dialog("bangkok_city");
        assert!(consistency_judge(&d, &gold, &gold, &ont, &OrderingKey::default()));
    }

    #[test]
    fn dominating_extra_row_is_inconsistent() {
        let ont = ontology();
        let gold = KnowledgeBase::new("g", vec![resto("seven_star", "thai", "west", "7")]).unwrap();
        let kb = KnowledgeBase::new(
            "t",
            vec![
                resto("seven_star", "thai", "west", "7"),
                resto("eight_star", "thai", "west", "8"),
            ],
        )
        .unwrap();
        let d = dialog("seven_star");
        assert!(!consistency_judge(&d, &kb, &gold, &ont, &OrderingKey::default()));
    }

    #[test]
    fn missing_mentioned_row_is_inconsistent() {
        let ont = ontology();
        let gold = KnowledgeBase::new("g", vec![resto("bangkok_city", "thai", "west", "7")]).unwrap();
        let kb = KnowledgeBase::empty("t");
        let d = dialog("bangkok_city");
        assert!(!consistency_judge(&d, &kb, &gold, &ont, &OrderingKey::default()));
    }

    #[test]
    fn lower_rated_extra_is_fine() {
        let ont = ontology();
        let gold = KnowledgeBase::new("g", vec![resto("seven_star", "thai", "west", "7")]).unwrap();
        let kb = KnowledgeBase::new(
            "t",
            vec![
                resto("seven_star", "thai", "west", "7"),
                resto("three_star", "thai", "west", "3"),
            ],
        )
        .unwrap();
        let d = dialog("seven_star");
        assert!(consistency_judge(&d, &kb, &gold, &ont, &OrderingKey::default()));
    }

    #[test]
    fn rate_arithmetic() {
        let ont = ontology();
        let gold = KnowledgeBase::new("g", vec![resto("a", "thai", "west", "7")]).unwrap();
        let d = dialog("a");
        let items: Vec<(&Dialog, Option<&KnowledgeBase>)> = vec![(&d, Some(&gold)); 5];
        // All five judged against gold itself: rate 0.
        let rate =
            inconsistency_rate(items.clone(), &gold, &ont, &OrderingKey::default()).unwrap();
        assert_eq!(rate, 0.0);
        // 2 of 5 inconsistent -> 0.4, checked against an empty kb on a
        // two-record prefix compared with a hand recount.
        let kb_bad = KnowledgeBase::empty("t");
        let n_bad = items
            .iter()
            .take(2)
            .filter(|(d, g)| {
                !consistency_judge(d, &kb_bad, g.unwrap(), &ont, &OrderingKey::default())
            })
            .count();
        assert_eq!(n_bad, 2);
        assert_eq!(n_bad as f64 / items.len() as f64, 0.4);
    }

    #[test]
    fn missing_gold_errors() {
        let ont = ontology();
        let gold = KnowledgeBase::new("g", vec![resto("a", "thai", "west", "7")]).unwrap();
        let d = dialog("a");
        let items: Vec<(&Dialog, Option<&KnowledgeBase>)> = vec![(&d, None)];
        assert!(inconsistency_rate(items, &gold, &ont, &OrderingKey::default()).is_err());
    }
}
