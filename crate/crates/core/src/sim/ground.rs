//! Timestamp assignment and re-grounding of dialog skeletons against the
//! contemporary KB snapshot.

use super::templates::{DialogSkeleton, SkelToken, SlotRef};
use super::timeline::KbTimeline;
use crate::data::{
    CorpusRecord, Dialog, Entity, Mention, OrderingKey, Ontology, Row, Utterance,
};
use crate::nn::params::{seeded_rng, sub_seed};
use rand::seq::SliceRandom;
use rand::Rng;

/// Rows matching the constraints at a tick, ordered by the ordering key
/// (best first, ties by head value for determinism).
fn matching_rows<'a>(
    timeline: &'a KbTimeline,
    tick: u64,
    constraints: &[(String, String)],
    key: &OrderingKey,
) -> Vec<&'a Row> {
    let mut rows: Vec<&Row> = timeline
        .base_kb
        .rows
        .iter()
        .enumerate()
        .filter(|(i, _)| timeline.row_present(*i, tick))
        .map(|(_, r)| r)
        .filter(|r| {
            constraints.iter().all(|(rel, v)| {
                r.fields.get(rel).map(|e| e.value == *v).unwrap_or(false)
            })
        })
        .collect();
    rows.sort_by(|a, b| {
        let ka = a.fields.get(&key.relation).map(|e| e.value.as_str()).unwrap_or("");
        let kb = b.fields.get(&key.relation).map(|e| e.value.as_str()).unwrap_or("");
        if key.outranks(ka, kb) {
            std::cmp::Ordering::Less
        } else if key.outranks(kb, ka) {
            std::cmp::Ordering::Greater
        } else {
            a.head.value.cmp(&b.head.value)
        }
    });
    rows
}

fn satisfiable(skeleton: &DialogSkeleton, rows: &[&Row], ontology: &Ontology) -> bool {
    if rows.len() < skeleton.n_suggestions {
        return false;
    }
    // The accepted suggestion must define every field the dialog asks for.
    let chosen = rows[skeleton.n_suggestions - 1];
    skeleton.turns.iter().all(|turn| {
        turn.tokens.iter().all(|tok| match tok {
            SkelToken::Slot(SlotRef::ChoiceField(rel_idx)) => {
                let rel = &ontology.relation_types[*rel_idx].name;
                chosen.fields.contains_key(rel)
            }
            _ => true,
        })
    })
}

/// Realizes a skeleton against the chosen snapshot rows.
fn realize(skeleton: &DialogSkeleton, rows: &[&Row], ontology: &Ontology, id: String, tick: u64) -> Dialog {
    let chosen = rows[skeleton.n_suggestions - 1];
    let utterances = skeleton
        .turns
        .iter()
        .map(|turn| {
            let mut tokens = Vec::with_capacity(turn.tokens.len());
            let mut mentions = Vec::new();
            for tok in &turn.tokens {
                match tok {
                    SkelToken::Word(w) => tokens.push(w.clone()),
                    SkelToken::Entity(e) => {
                        mentions.push(Mention {
                            start: tokens.len(),
                            end: tokens.len() + 1,
                            entity: e.clone(),
                        });
                        tokens.push(e.value.clone());
                    }
                    SkelToken::Slot(slot) => {
                        let entity: Entity = match slot {
                            SlotRef::Suggestion(i) => rows[*i].head.clone(),
                            SlotRef::ChoiceField(rel_idx) => {
                                let rel = &ontology.relation_types[*rel_idx].name;
                                chosen.fields[rel].clone()
                            }
                        };
                        mentions.push(Mention {
                            start: tokens.len(),
                            end: tokens.len() + 1,
                            entity: entity.clone(),
                        });
                        tokens.push(entity.value.clone());
                    }
                }
            }
            Utterance::new(turn.speaker, tokens, mentions)
        })
        .collect();
    Dialog {
        id,
        timestamp: tick,
        utterances,
    }
}

pub struct GroundingOutcome {
    pub records: Vec<CorpusRecord>,
    /// Snapshot ticks referenced by the records (sorted, deduplicated).
    pub gold_ticks: Vec<u64>,
    pub skipped: usize,
}

/// Grounds each skeleton at a tick drawn uniformly among the snapshots where
/// its constraints are satisfiable; unsatisfiable skeletons are skipped and
/// counted. With `final_only` the only candidate snapshot is the training
/// KB's, which is how the test split stays consistent.
pub fn assign_and_ground(
    skeletons: &[DialogSkeleton],
    timeline: &KbTimeline,
    ontology: &Ontology,
    key: &OrderingKey,
    seed: u64,
    id_prefix: &str,
    final_only: bool,
) -> GroundingOutcome {
    let mut records = Vec::new();
    let mut gold_ticks = Vec::new();
    let mut skipped = 0usize;
    for (i, skeleton) in skeletons.iter().enumerate() {
        let rng = &mut seeded_rng(sub_seed(seed, &format!("ground:{id_prefix}:{i}")));
        let candidates: Vec<u64> = if final_only {
            vec![timeline.final_tick()]
        } else {
            (0..timeline.horizon).collect()
        };
        let satisfiable_ticks: Vec<u64> = candidates
            .into_iter()
            .filter(|&t| {
                let rows = matching_rows(timeline, t, &skeleton.constraints, key);
                satisfiable(skeleton, &rows, ontology)
            })
            .collect();
        let Some(&tick) = satisfiable_ticks.choose(rng) else {
            skipped += 1;
            continue;
        };
        // Consume one draw so dialogs vary even when the tick was forced.
        let _ = rng.gen::<u64>();
        let rows = matching_rows(timeline, tick, &skeleton.constraints, key);
        let dialog = realize(
            skeleton,
            &rows,
            ontology,
            format!("{id_prefix}_{i:04}"),
            tick,
        );
        records.push(CorpusRecord {
            dialog,
            gold_kb_id: Some(KbTimeline::snapshot_id(tick)),
        });
        gold_ticks.push(tick);
    }
    gold_ticks.sort_unstable();
    gold_ticks.dedup();
    GroundingOutcome {
        records,
        gold_ticks,
        skipped,
    }
}
