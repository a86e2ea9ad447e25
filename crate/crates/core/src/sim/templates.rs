//! Surface templates and skeleton generation for the synthetic restaurant
//! booking flow: slot gathering, an api_call, optional constraint updates,
//! rating-ordered suggestions with rejections, and attribute requests.

use crate::data::{Entity, KnowledgeBase, Ontology, Speaker};
use crate::nn::params::seeded_rng;
use crate::{CoreError, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Surface realizations for each flow step. `{v}` marks the slot value,
/// `{r}` the suggested restaurant, `{p}`/`{a}` the phone/address.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemplateSet {
    pub user_greeting: Vec<String>,
    pub agent_greeting: Vec<String>,
    pub user_request: Vec<String>,
    pub slot_phrases: BTreeMap<String, Vec<String>>,
    pub agent_slot_question: BTreeMap<String, Vec<String>>,
    pub user_slot_answer: BTreeMap<String, Vec<String>>,
    pub agent_on_it: Vec<String>,
    pub agent_search: Vec<String>,
    pub user_update: Vec<String>,
    pub agent_update_ack: Vec<String>,
    pub user_no_update: Vec<String>,
    pub user_silence: Vec<String>,
    pub agent_suggest: Vec<String>,
    pub user_reject: Vec<String>,
    pub agent_next_option: Vec<String>,
    pub user_accept: Vec<String>,
    pub agent_reserve: Vec<String>,
    pub user_ask_phone: Vec<String>,
    pub agent_give_phone: Vec<String>,
    pub user_ask_address: Vec<String>,
    pub agent_give_address: Vec<String>,
    pub user_thanks: Vec<String>,
    pub agent_anything_else: Vec<String>,
    pub user_bye: Vec<String>,
    pub agent_bye: Vec<String>,
    pub probs: FlowProbs,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowProbs {
    /// Probability that the opener carries each slot (vs. agent asking).
    pub slot_in_opener: f64,
    /// Probability of a constraint update after the first api_call.
    pub update: f64,
    /// Weights over 1, 2 or 3 suggestions.
    pub suggestion_weights: Vec<f64>,
    pub ask_phone: f64,
    pub ask_address: f64,
}

impl TemplateSet {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::io(format!("reading templates {}", path.display()), e))?;
        serde_json::from_str(&text)
            .map_err(|e| CoreError::json(format!("parsing templates {}", path.display()), e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| CoreError::json("serializing templates", e))?;
        std::fs::write(path, text)
            .map_err(|e| CoreError::io(format!("writing templates {}", path.display()), e))
    }
}

/// A token of a skeleton turn: fixed text, a resolved entity, or a slot to
/// be filled by grounding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SkelToken {
    Word(String),
    Entity(Entity),
    Slot(SlotRef),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotRef {
    /// The i-th suggested head entity.
    Suggestion(usize),
    /// The accepted suggestion's value for the named field (phone/address),
    /// identified by relation index into the ontology.
    ChoiceField(usize),
}

#[derive(Debug, Clone)]
pub struct SkelTurn {
    pub speaker: Speaker,
    pub tokens: Vec<SkelToken>,
}

/// A consistent source dialog with its annotated constraints, ready to be
/// re-grounded against a KB snapshot.
#[derive(Debug, Clone)]
pub struct DialogSkeleton {
    pub turns: Vec<SkelTurn>,
    /// Final user constraints: `(relation, value)`.
    pub constraints: Vec<(String, String)>,
    pub n_suggestions: usize,
}

/// Relations whose values the user constrains, in flow order: every
/// non-latent relation whose tail values are shared across rows (phone-like
/// relations, whose values are unique to one row, are response attributes,
/// not constraints).
pub fn constraint_relations(ontology: &Ontology, base_kb: &KnowledgeBase) -> Vec<String> {
    ontology
        .relation_types
        .iter()
        .filter(|r| !r.latent)
        .filter(|r| {
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for row in &base_kb.rows {
                if let Some(v) = row.fields.get(&r.name) {
                    *counts.entry(v.value.as_str()).or_default() += 1;
                }
            }
            counts.values().any(|&c| c > 1)
        })
        .map(|r| r.name.clone())
        .collect()
}

/// Constraint groups of the base KB: distinct constraint-value combinations
/// with the number of rows carrying them.
pub fn constraint_groups(
    base_kb: &KnowledgeBase,
    relations: &[String],
) -> Vec<(Vec<(String, String)>, usize)> {
    let mut groups: BTreeMap<Vec<(String, String)>, usize> = BTreeMap::new();
    for row in &base_kb.rows {
        let mut key = Vec::with_capacity(relations.len());
        let mut complete = true;
        for rel in relations {
            match row.fields.get(rel) {
                Some(v) => key.push((rel.clone(), v.value.clone())),
                None => {
                    complete = false;
                    break;
                }
            }
        }
        if complete {
            *groups.entry(key).or_default() += 1;
        }
    }
    groups.into_iter().collect()
}

pub struct SkeletonGenerator<'a> {
    templates: &'a TemplateSet,
    ontology: &'a Ontology,
    groups: Vec<(Vec<(String, String)>, usize)>,
    relations: Vec<String>,
    /// Relation name -> relation index in the ontology (for ChoiceField).
    relation_index: BTreeMap<String, usize>,
    /// Tail type by relation, to type slot values.
    tail_type: BTreeMap<String, String>,
    /// Alternative values per relation for stale constraints.
    values_by_relation: BTreeMap<String, Vec<String>>,
    /// Non-constraint, non-latent relations the user may ask about
    /// (phone/address-like).
    request_relations: Vec<String>,
}

impl<'a> SkeletonGenerator<'a> {
    pub fn new(
        templates: &'a TemplateSet,
        ontology: &'a Ontology,
        base_kb: &'a KnowledgeBase,
    ) -> Result<Self> {
        let relations = constraint_relations(ontology, base_kb);
        if relations.is_empty() {
            return Err(CoreError::Simulation(
                "base KB yields no constraint relations".into(),
            ));
        }
        let groups = constraint_groups(base_kb, &relations);
        if groups.is_empty() {
            return Err(CoreError::Simulation("base KB yields no groups".into()));
        }
        let relation_index = ontology
            .relation_types
            .iter()
            .enumerate()
            .map(|(i, r)| (r.name.clone(), i))
            .collect();
        let tail_type = ontology
            .relation_types
            .iter()
            .map(|r| (r.name.clone(), r.tail_type.clone()))
            .collect();
        let mut values_by_relation: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for rel in &relations {
            let rel_ty = ontology.relation(rel).unwrap();
            let mut vals: Vec<String> = ontology
                .entities
                .iter()
                .filter(|e| e.etype == rel_ty.tail_type)
                .map(|e| e.value.clone())
                .collect();
            vals.sort();
            vals.dedup();
            values_by_relation.insert(rel.clone(), vals);
        }
        let request_relations = ontology
            .relation_types
            .iter()
            .filter(|r| !r.latent && !relations.contains(&r.name))
            .map(|r| r.name.clone())
            .collect();
        Ok(SkeletonGenerator {
            templates,
            ontology,
            groups,
            relations,
            relation_index,
            tail_type,
            values_by_relation,
            request_relations,
        })
    }

    fn pick<'t>(&self, rng: &mut ChaCha8Rng, options: &'t [String]) -> &'t str {
        options.choose(rng).map(String::as_str).unwrap_or("")
    }

    fn words(&self, turns: &mut Vec<SkelTurn>, speaker: Speaker, text: &str) {
        turns.push(SkelTurn {
            speaker,
            tokens: text
                .split_whitespace()
                .map(|w| SkelToken::Word(w.into()))
                .collect(),
        });
    }

    /// Realizes a template containing a `{v}` placeholder with an entity.
    fn with_value(
        &self,
        turns: &mut Vec<SkelTurn>,
        speaker: Speaker,
        template: &str,
        value: &Entity,
    ) {
        let tokens = template
            .split_whitespace()
            .map(|w| {
                if w == "{v}" {
                    SkelToken::Entity(value.clone())
                } else {
                    SkelToken::Word(w.into())
                }
            })
            .collect();
        turns.push(SkelTurn { speaker, tokens });
    }

    fn entity(&self, relation: &str, value: &str) -> Entity {
        Entity::new(value, self.tail_type[relation].clone())
    }

    /// Generates one skeleton. Dialogs come out alternating user/agent and
    /// ending on an agent turn.
    pub fn generate(&self, seed: u64) -> DialogSkeleton {
        let rng = &mut seeded_rng(seed);
        let t = self.templates;
        let p = &t.probs;

        let group_idx = rng.gen_range(0..self.groups.len());
        let (final_constraints, _) = self.groups[group_idx].clone();

        // Optional stale value on one relation, corrected after the first
        // api_call.
        let update_rel = if rng.gen::<f64>() < p.update {
            Some(self.relations[rng.gen_range(0..self.relations.len())].clone())
        } else {
            None
        };
        let mut initial_constraints = final_constraints.clone();
        if let Some(rel) = &update_rel {
            let finals: BTreeMap<&str, &str> = final_constraints
                .iter()
                .map(|(r, v)| (r.as_str(), v.as_str()))
                .collect();
            let alternatives: Vec<&String> = self.values_by_relation[rel]
                .iter()
                .filter(|v| v.as_str() != finals[rel.as_str()])
                .collect();
            if let Some(stale) = alternatives.choose(rng) {
                for c in initial_constraints.iter_mut() {
                    if &c.0 == rel {
                        c.1 = (*stale).clone();
                    }
                }
            }
        }

        let n_suggestions = {
            let w = &p.suggestion_weights;
            let total: f64 = w.iter().sum();
            let mut x = rng.gen::<f64>() * total;
            let mut n = 1;
            for (i, wi) in w.iter().enumerate() {
                if x < *wi {
                    n = i + 1;
                    break;
                }
                x -= wi;
            }
            n
        };

        let mut turns = Vec::new();
        self.words(&mut turns, Speaker::User, self.pick(rng, &t.user_greeting));
        self.words(&mut turns, Speaker::Agent, self.pick(rng, &t.agent_greeting));

        // Opener with a random subset of slots; the agent asks for the rest.
        let mut opener_tokens: Vec<SkelToken> = self
            .pick(rng, &t.user_request)
            .split_whitespace()
            .map(|w| SkelToken::Word(w.into()))
            .collect();
        let mut missing = Vec::new();
        for (rel, value) in &initial_constraints {
            if rng.gen::<f64>() < p.slot_in_opener {
                let phrase = self.pick(rng, &t.slot_phrases[rel]).to_string();
                for w in phrase.split_whitespace() {
                    if w == "{v}" {
                        opener_tokens.push(SkelToken::Entity(self.entity(rel, value)));
                    } else {
                        opener_tokens.push(SkelToken::Word(w.into()));
                    }
                }
            } else {
                missing.push((rel.clone(), value.clone()));
            }
        }
        turns.push(SkelTurn {
            speaker: Speaker::User,
            tokens: opener_tokens,
        });
        self.words(&mut turns, Speaker::Agent, self.pick(rng, &t.agent_on_it));
        self.words(&mut turns, Speaker::User, self.pick(rng, &t.user_silence));

        for (rel, value) in &missing {
            self.words(
                &mut turns,
                Speaker::Agent,
                self.pick(rng, &t.agent_slot_question[rel]),
            );
            let answer = self.pick(rng, &t.user_slot_answer[rel]).to_string();
            self.with_value(&mut turns, Speaker::User, &answer, &self.entity(rel, value));
        }

        self.words(&mut turns, Speaker::Agent, self.pick(rng, &t.agent_search));
        self.words(&mut turns, Speaker::User, self.pick(rng, &t.user_silence));
        self.api_call(&mut turns, &initial_constraints);

        if update_rel.is_some() {
            let rel = update_rel.as_ref().unwrap();
            let value = final_constraints
                .iter()
                .find(|(r, _)| r == rel)
                .map(|(_, v)| v.clone())
                .unwrap();
            let update = self.pick(rng, &t.user_update).to_string();
            let phrase = self.pick(rng, &t.slot_phrases[rel]).to_string();
            let realized = update.replace("{phrase}", &phrase);
            self.with_value(&mut turns, Speaker::User, &realized, &self.entity(rel, &value));
            self.words(&mut turns, Speaker::Agent, self.pick(rng, &t.agent_update_ack));
            self.words(&mut turns, Speaker::User, self.pick(rng, &t.user_no_update));
            self.words(&mut turns, Speaker::Agent, self.pick(rng, &t.agent_search));
            self.words(&mut turns, Speaker::User, self.pick(rng, &t.user_silence));
            self.api_call(&mut turns, &final_constraints);
        }

        for i in 0..n_suggestions {
            self.words(&mut turns, Speaker::User, self.pick(rng, &t.user_silence));
            let suggest = self.pick(rng, &t.agent_suggest).to_string();
            let tokens = suggest
                .split_whitespace()
                .map(|w| {
                    if w == "{r}" {
                        SkelToken::Slot(SlotRef::Suggestion(i))
                    } else {
                        SkelToken::Word(w.into())
                    }
                })
                .collect();
            turns.push(SkelTurn {
                speaker: Speaker::Agent,
                tokens,
            });
            if i + 1 < n_suggestions {
                self.words(&mut turns, Speaker::User, self.pick(rng, &t.user_reject));
                self.words(&mut turns, Speaker::Agent, self.pick(rng, &t.agent_next_option));
            }
        }
        self.words(&mut turns, Speaker::User, self.pick(rng, &t.user_accept));
        self.words(&mut turns, Speaker::Agent, self.pick(rng, &t.agent_reserve));

        for rel in &self.request_relations {
            let (ask, give) = match rel.as_str() {
                "phone" => (&t.user_ask_phone, &t.agent_give_phone),
                "address" => (&t.user_ask_address, &t.agent_give_address),
                _ => continue,
            };
            let wanted = if rel == "phone" {
                rng.gen::<f64>() < p.ask_phone
            } else {
                rng.gen::<f64>() < p.ask_address
            };
            if !wanted {
                continue;
            }
            self.words(&mut turns, Speaker::User, self.pick(rng, ask));
            let give = self.pick(rng, give).to_string();
            let tokens = give
                .split_whitespace()
                .map(|w| {
                    if w == "{v}" {
                        SkelToken::Slot(SlotRef::ChoiceField(self.relation_index[rel]))
                    } else {
                        SkelToken::Word(w.into())
                    }
                })
                .collect();
            turns.push(SkelTurn {
                speaker: Speaker::Agent,
                tokens,
            });
        }

        self.words(&mut turns, Speaker::User, self.pick(rng, &t.user_thanks));
        self.words(&mut turns, Speaker::Agent, self.pick(rng, &t.agent_anything_else));
        self.words(&mut turns, Speaker::User, self.pick(rng, &t.user_bye));
        self.words(&mut turns, Speaker::Agent, self.pick(rng, &t.agent_bye));

        DialogSkeleton {
            turns,
            constraints: final_constraints,
            n_suggestions,
        }
    }

    fn api_call(&self, turns: &mut Vec<SkelTurn>, constraints: &[(String, String)]) {
        let mut tokens = vec![SkelToken::Word("api_call".into())];
        for (rel, value) in constraints {
            tokens.push(SkelToken::Entity(self.entity(rel, value)));
        }
        turns.push(SkelTurn {
            speaker: Speaker::Agent,
            tokens,
        });
    }

    pub fn ontology(&self) -> &Ontology {
        self.ontology
    }
}
