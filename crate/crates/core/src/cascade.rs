//! Arbitration cascade: applies the repair stages in a configurable order
//! to produce a per-dialog repaired KB from the shared training KB, plus
//! the deterministic rule baseline.

use crate::data::{
    recommended_heads, CorpusRecord, Dialog, Entity, KnowledgeBase, Ontology, OrderingKey, Row,
    Triple,
};
use crate::models::{apply_insertions, apply_rc, apply_rd, score_infer_candidates};
use crate::models::{RcModel, RdModel, RiModel};
use crate::scalar::Scalar;
use crate::supervision::{candidate_triples, Label, LabeledCandidate};
use crate::{CoreError, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ri,
    Rd,
    Rc,
}

/// Parses an order like `ri,rd,rc`. Stages may not repeat and completion
/// must follow insertion (it acts on inserted rows).
pub fn parse_order(s: &str) -> Result<Vec<Stage>> {
    let mut order = Vec::new();
    for part in s.split(',') {
        let stage = match part.trim() {
            "ri" => Stage::Ri,
            "rd" => Stage::Rd,
            "rc" => Stage::Rc,
            other => {
                return Err(CoreError::InvalidStageOrder(format!(
                    "unknown stage `{other}` in `{s}`"
                )))
            }
        };
        if order.contains(&stage) {
            return Err(CoreError::InvalidStageOrder(s.into()));
        }
        order.push(stage);
    }
    if order.contains(&Stage::Rc) {
        let ri = order.iter().position(|&st| st == Stage::Ri);
        let rc = order.iter().position(|&st| st == Stage::Rc).unwrap();
        if ri.map(|i| i > rc).unwrap_or(true) {
            return Err(CoreError::InvalidStageOrder(s.into()));
        }
    }
    Ok(order)
}

pub fn order_label(order: &[Stage]) -> String {
    order
        .iter()
        .map(|s| match s {
            Stage::Ri => "ri",
            Stage::Rd => "rd",
            Stage::Rc => "rc",
        })
        .collect::<Vec<_>>()
        .join(",")
}

/// Per-dialog record of what each stage changed. Replaying the edits in
/// stage order against the training KB reproduces `result_kb` exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArbitrationTrace {
    pub dialog_id: String,
    pub order: Vec<Stage>,
    pub inserted: Vec<Triple>,
    pub deleted: Vec<Row>,
    pub completed: Vec<(Entity, String, Entity)>,
    pub result_kb: KnowledgeBase,
}

impl ArbitrationTrace {
    /// Re-applies the recorded edits to the training KB in stage order.
    pub fn replay(&self, train_kb: &KnowledgeBase) -> Result<KnowledgeBase> {
        let mut rows: Vec<Row> = train_kb.rows.clone();
        for stage in &self.order {
            match stage {
                Stage::Ri => {
                    let mut new_rows: BTreeMap<Entity, Row> = BTreeMap::new();
                    for t in &self.inserted {
                        new_rows
                            .entry(t.head.clone())
                            .or_insert_with(|| Row::new(t.head.clone()))
                            .fields
                            .insert(t.relation.clone(), t.tail.clone());
                    }
                    rows.extend(new_rows.into_values());
                }
                Stage::Rd => {
                    rows.retain(|r| !self.deleted.iter().any(|d| d.head == r.head));
                }
                Stage::Rc => {
                    for (head, rel, tail) in &self.completed {
                        for row in rows.iter_mut() {
                            if &row.head == head {
                                row.fields.insert(rel.clone(), tail.clone());
                            }
                        }
                    }
                }
            }
        }
        KnowledgeBase::new(self.result_kb.id.clone(), rows)
    }

    pub fn inserted_heads(&self) -> Vec<&Entity> {
        let mut heads: Vec<&Entity> = self.inserted.iter().map(|t| &t.head).collect();
        heads.sort();
        heads.dedup();
        heads
    }
}

pub struct StageModels<'a, S: Scalar> {
    pub ri: Option<(&'a RiModel<S>, f64)>,
    pub rd: Option<&'a RdModel<S>>,
    pub rc: Option<&'a RcModel<S>>,
}

/// Runs the learned cascade over the corpus. Infer candidates are the
/// distant-supervision leftovers, grouped per dialog by the caller.
pub fn arbitrate<S: Scalar>(
    records: &[CorpusRecord],
    train_kb: &KnowledgeBase,
    infer_by_dialog: &BTreeMap<String, Vec<LabeledCandidate>>,
    models: &StageModels<'_, S>,
    order: &[Stage],
    ontology: &Ontology,
) -> Result<Vec<ArbitrationTrace>> {
    for stage in order {
        let available = match stage {
            Stage::Ri => models.ri.is_some(),
            Stage::Rd => models.rd.is_some(),
            Stage::Rc => models.rc.is_some(),
        };
        if !available {
            return Err(CoreError::InvalidStageOrder(format!(
                "stage {stage:?} requested but no model supplied"
            )));
        }
    }
    records
        .iter()
        .map(|record| {
            let dialog = &record.dialog;
            let mut kb = train_kb.clone();
            kb.id = format!("kb_hat_{}", dialog.id);
            let mut trace = ArbitrationTrace {
                dialog_id: dialog.id.clone(),
                order: order.to_vec(),
                inserted: Vec::new(),
                deleted: Vec::new(),
                completed: Vec::new(),
                result_kb: kb.clone(),
            };
            for stage in order {
                match stage {
                    Stage::Ri => {
                        let (model, threshold) = models.ri.as_ref().unwrap();
                        let empty = Vec::new();
                        let infer = infer_by_dialog.get(&dialog.id).unwrap_or(&empty);
                        let refs: Vec<&LabeledCandidate> = infer.iter().collect();
                        let accepted = score_infer_candidates(model, dialog, &refs, *threshold);
                        let with_rows = apply_insertions(&kb, &accepted, &dialog.id)?;
                        // Record what actually got attached.
                        for row in &with_rows.rows {
                            if !kb.contains_head(&row.head) {
                                for (rel, tail) in &row.fields {
                                    trace.inserted.push(Triple::new(
                                        row.head.clone(),
                                        rel.clone(),
                                        tail.clone(),
                                    ));
                                }
                            }
                        }
                        let id = kb.id.clone();
                        kb = with_rows;
                        kb.id = id;
                    }
                    Stage::Rd => {
                        let model = models.rd.unwrap();
                        let doomed = apply_rd(model, dialog, &kb, ontology)?;
                        for head in &doomed {
                            if let Some(row) = kb.row(head) {
                                trace.deleted.push(row.clone());
                            }
                        }
                        kb.rows.retain(|r| !doomed.contains(&r.head));
                    }
                    Stage::Rc => {
                        let model = models.rc.unwrap();
                        let completions = apply_rc(model, dialog, &kb, ontology)?;
                        for (head, rel, tail) in &completions {
                            for row in kb.rows.iter_mut() {
                                if &row.head == head {
                                    row.fields.insert(rel.clone(), tail.clone());
                                }
                            }
                        }
                        trace.completed.extend(completions);
                    }
                }
            }
            trace.result_kb = kb;
            Ok(trace)
        })
        .collect()
}

/// Deterministic rule baseline.
///
/// Insertion: a new row for every dialog head entity missing from the KB;
/// a candidate `(e1, r, e2)` attaches when `e2` is the closest
/// type-consistent mentioned entity to `e1` by token distance (ties to the
/// earlier mention) and `e2`'s value is not bound to exactly one existing
/// row. Deletion: drop every row none of whose row-unique values occur in
/// the dialog. Completion: assign ordering-key values to inserted rows so
/// the dialog's suggestion order is respected.
pub fn rule_arbitrate(
    records: &[CorpusRecord],
    train_kb: &KnowledgeBase,
    ontology: &Ontology,
    key: &OrderingKey,
) -> Result<Vec<ArbitrationTrace>> {
    records
        .iter()
        .map(|record| rule_arbitrate_one(&record.dialog, train_kb, ontology, key))
        .collect()
}

fn rule_arbitrate_one(
    dialog: &Dialog,
    train_kb: &KnowledgeBase,
    ontology: &Ontology,
    key: &OrderingKey,
) -> Result<ArbitrationTrace> {
    let mut kb = train_kb.clone();
    kb.id = format!("kb_hat_{}", dialog.id);
    let mut trace = ArbitrationTrace {
        dialog_id: dialog.id.clone(),
        order: vec![Stage::Ri, Stage::Rd, Stage::Rc],
        inserted: Vec::new(),
        deleted: Vec::new(),
        completed: Vec::new(),
        result_kb: kb.clone(),
    };

    // Global token positions per entity value.
    let mut positions: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let mut offset = 0usize;
    for utt in &dialog.utterances {
        for m in &utt.mentions {
            positions
                .entry(m.entity.value.as_str())
                .or_default()
                .push(offset + m.start);
        }
        offset += utt.tokens.len();
    }
    let distance = |a: &str, b: &str| -> Option<(usize, usize)> {
        let pa = positions.get(a)?;
        let pb = positions.get(b)?;
        let mut best: Option<(usize, usize)> = None;
        for &x in pa {
            for &y in pb {
                let d = x.abs_diff(y);
                let c = (d, y);
                if best.map(|b| c < b).unwrap_or(true) {
                    best = Some(c);
                }
            }
        }
        best
    };

    // Relations whose tail values are bound to at most one row each
    // (phone-like). Their values may only attach to their nearest head
    // mention, which keeps one restaurant's phone off another's new row.
    let inverse_functional: BTreeSet<&str> = ontology
        .relation_types
        .iter()
        .filter(|r| {
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            let mut seen = false;
            for row in &train_kb.rows {
                if let Some(v) = row.fields.get(&r.name) {
                    seen = true;
                    *counts.entry(v.value.as_str()).or_default() += 1;
                }
            }
            seen && counts.values().all(|&c| c == 1)
        })
        .map(|r| r.name.as_str())
        .collect();
    let head_types = ontology.head_types();
    let nearest_head = |tail: &str| -> Option<&str> {
        dialog
            .mentioned_entities()
            .into_iter()
            .filter(|e| head_types.contains(e.etype.as_str()))
            .filter_map(|e| distance(&e.value, tail).map(|d| (d, e.value.as_str())))
            .min_by_key(|(d, _)| *d)
            .map(|(_, v)| v)
    };

    // Insertion.
    let candidates = candidate_triples(dialog, ontology);
    let mut new_rows: BTreeMap<Entity, Row> = BTreeMap::new();
    let mut missing_heads: Vec<Entity> = candidates
        .iter()
        .map(|t| t.head.clone())
        .filter(|h| !kb.contains_head(h))
        .collect();
    missing_heads.sort();
    missing_heads.dedup();
    for head in &missing_heads {
        let mut row = Row::new(head.clone());
        let mut by_rel: BTreeMap<&str, Vec<&Triple>> = BTreeMap::new();
        for t in candidates.iter().filter(|t| &t.head == head) {
            by_rel.entry(t.relation.as_str()).or_default().push(t);
        }
        for (rel, cands) in by_rel {
            // The closest type-consistent mention wins, ties to the earlier
            // mention.
            let closest = cands
                .iter()
                .filter_map(|t| distance(&head.value, &t.tail.value).map(|d| (d, *t)))
                .min_by_key(|(d, _)| *d);
            if let Some((_, t)) = closest {
                if kb.value_occurrence_count(&t.tail.value) == 1 {
                    continue;
                }
                if inverse_functional.contains(rel)
                    && nearest_head(&t.tail.value) != Some(head.value.as_str())
                {
                    continue;
                }
                row.fields.insert(rel.to_string(), t.tail.clone());
            }
        }
        if !row.fields.is_empty() {
            for (rel, tail) in &row.fields {
                trace
                    .inserted
                    .push(Triple::new(head.clone(), rel.clone(), tail.clone()));
            }
            new_rows.insert(head.clone(), row);
        }
    }
    kb.rows.extend(new_rows.into_values());

    // Deletion: row-unique values computed on the post-insertion KB.
    let mentions = dialog.mention_values();
    let unique_values: BTreeMap<&str, usize> = {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for row in &kb.rows {
            for e in row.entities() {
                *counts.entry(e.value.as_str()).or_default() += 1;
            }
        }
        counts
    };
    let doomed: Vec<Row> = kb
        .rows
        .iter()
        .filter(|row| {
            !row.entities()
                .any(|e| unique_values[e.value.as_str()] == 1 && mentions.contains(e.value.as_str()))
        })
        .cloned()
        .collect();
    kb.rows.retain(|r| !doomed.iter().any(|d| d.head == r.head));
    trace.deleted = doomed;

    // Completion: ratings for inserted rows, respecting suggestion order.
    let scale: Vec<i64> = ontology
        .target_set(&key.relation)
        .iter()
        .filter_map(|e| e.value.parse::<i64>().ok())
        .collect();
    let (scale_min, scale_max) = (
        scale.iter().min().copied().unwrap_or(1),
        scale.iter().max().copied().unwrap_or(8),
    );
    let recs = recommended_heads(dialog, ontology);
    for (i, rec) in recs.iter().enumerate() {
        let missing = kb
            .row_by_head_value(rec)
            .map(|r| !r.fields.contains_key(&key.relation))
            .unwrap_or(false);
        if !missing {
            continue;
        }
        let rating_of = |kb: &KnowledgeBase, head: &str| -> Option<i64> {
            kb.row_by_head_value(head)
                .and_then(|r| r.fields.get(&key.relation))
                .and_then(|e| e.value.parse::<i64>().ok())
        };
        let upper = i.checked_sub(1).and_then(|j| rating_of(&kb, &recs[j]));
        let lower = recs.get(i + 1).and_then(|h| rating_of(&kb, h));
        let hi = upper.unwrap_or(scale_max + 1);
        let lo = lower.unwrap_or(scale_min - 1);
        let value = if hi - lo >= 2 {
            hi - 1
        } else {
            // No integer strictly between: sit on the boundary.
            lo.max(scale_min)
        };
        let value = value.clamp(scale_min, scale_max);
        let tail_type = ontology
            .relation(&key.relation)
            .map(|r| r.tail_type.clone())
            .unwrap_or_else(|| key.relation.clone());
        let tail = Entity::new(value.to_string(), tail_type);
        let head = kb.row_by_head_value(rec).unwrap().head.clone();
        for row in kb.rows.iter_mut() {
            if row.head == head {
                row.fields.insert(key.relation.clone(), tail.clone());
            }
        }
        trace.completed.push((head, key.relation.clone(), tail));
    }

    trace.result_kb = kb;
    Ok(trace)
}

/// Serialization of traces: one JSON object per line; repaired KBs go to a
/// sibling directory keyed by dialog id.
pub fn save_traces(traces: &[ArbitrationTrace], path: &Path, kb_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(kb_dir)
        .map_err(|e| CoreError::io(format!("creating {}", kb_dir.display()), e))?;
    let mut file = std::fs::File::create(path)
        .map_err(|e| CoreError::io(format!("creating {}", path.display()), e))?;
    for trace in traces {
        let line = serde_json::to_string(trace)
            .map_err(|e| CoreError::json("serializing trace", e))?;
        writeln!(file, "{line}").map_err(|e| CoreError::io("writing trace", e))?;
        trace
            .result_kb
            .save(&kb_dir.join(format!("{}.json", trace.dialog_id)))?;
    }
    Ok(())
}

pub fn load_traces(path: &Path) -> Result<Vec<ArbitrationTrace>> {
    let file = std::fs::File::open(path)
        .map_err(|e| CoreError::io(format!("opening {}", path.display()), e))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CoreError::io(format!("reading trace line {n}"), e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| CoreError::json(format!("parsing trace line {n}"), e))?,
        );
    }
    Ok(out)
}

/// Groups a dataset's infer candidates by dialog.
pub fn infer_by_dialog(dataset: &crate::supervision::RiDataset) -> BTreeMap<String, Vec<LabeledCandidate>> {
    let mut out: BTreeMap<String, Vec<LabeledCandidate>> = BTreeMap::new();
    for c in &dataset.labeled {
        if c.label == Label::Infer {
            out.entry(c.dialog_id.clone()).or_default().push(c.clone());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_validation() {
        assert!(parse_order("ri,rd,rc").is_ok());
        assert!(parse_order("rd,ri,rc").is_ok());
        assert!(parse_order("ri,rc,rd").is_ok());
        // Completion before insertion is rejected.
        assert!(parse_order("rc,ri,rd").is_err());
        assert!(parse_order("rd,rc,ri").is_err());
        // Repeats and unknown stages are rejected.
        assert!(parse_order("ri,ri,rd").is_err());
        assert!(parse_order("ri,xx").is_err());
        // Subsets are fine as long as rc follows ri.
        assert!(parse_order("ri").is_ok());
        assert!(parse_order("rd").is_ok());
        assert!(parse_order("rc").is_err());
    }
}
