//! Evaluation: exact-match response metrics, BLEU, entity F1 variants,
//! arbitration F1 against simulator ground truth, completion order
//! accuracy, and the serializable report that ties a run together.

use crate::cascade::ArbitrationTrace;
use crate::data::{recommended_heads, Corpus, KnowledgeBase, Ontology, OrderingKey, Speaker};
use crate::sim::SimStats;
use crate::{CoreError, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictedResponse {
    pub dialog_id: String,
    /// Utterance index of the agent turn within its dialog.
    pub turn: usize,
    pub text: String,
}

pub fn save_predictions(preds: &[PredictedResponse], path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path)
        .map_err(|e| CoreError::io(format!("creating {}", path.display()), e))?;
    for p in preds {
        let line =
            serde_json::to_string(p).map_err(|e| CoreError::json("serializing prediction", e))?;
        writeln!(file, "{line}").map_err(|e| CoreError::io("writing prediction", e))?;
    }
    Ok(())
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictedResponse>> {
    let file = std::fs::File::open(path)
        .map_err(|e| CoreError::io(format!("opening {}", path.display()), e))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CoreError::io(format!("reading prediction {n}"), e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| CoreError::json(format!("parsing prediction {n}"), e))?,
        );
    }
    Ok(out)
}

/// Aligned (prediction, gold) pairs for every agent turn of the corpus.
/// Errors if a prediction is missing or duplicated.
fn align<'a>(
    preds: &'a [PredictedResponse],
    gold: &'a Corpus,
) -> Result<Vec<(&'a str, Vec<(&'a PredictedResponse, String)>)>> {
    let mut by_key: BTreeMap<(&str, usize), &PredictedResponse> = BTreeMap::new();
    for p in preds {
        if by_key.insert((p.dialog_id.as_str(), p.turn), p).is_some() {
            return Err(CoreError::Evaluation(format!(
                "duplicate prediction for {} turn {}",
                p.dialog_id, p.turn
            )));
        }
    }
    let mut out = Vec::new();
    for record in &gold.records {
        let mut turns = Vec::new();
        for (i, utt) in record.dialog.agent_utterances() {
            let p = by_key
                .get(&(record.dialog.id.as_str(), i))
                .ok_or_else(|| {
                    CoreError::Evaluation(format!(
                        "missing prediction for {} turn {i}",
                        record.dialog.id
                    ))
                })?;
            turns.push((*p, utt.text()));
        }
        out.push((record.dialog.id.as_str(), turns));
    }
    Ok(out)
}

/// Exact-string response accuracy and all-responses-correct dialog accuracy.
pub fn response_dialog_accuracy(
    preds: &[PredictedResponse],
    gold: &Corpus,
) -> Result<(f64, f64)> {
    let aligned = align(preds, gold)?;
    let mut resp_ok = 0usize;
    let mut resp_total = 0usize;
    let mut dlg_ok = 0usize;
    for (_, turns) in &aligned {
        let mut all = true;
        for (p, gold_text) in turns {
            resp_total += 1;
            if p.text == *gold_text {
                resp_ok += 1;
            } else {
                all = false;
            }
        }
        if all {
            dlg_ok += 1;
        }
    }
    if resp_total == 0 {
        return Err(CoreError::Evaluation("no responses to score".into()));
    }
    Ok((
        resp_ok as f64 / resp_total as f64,
        dlg_ok as f64 / aligned.len() as f64,
    ))
}

/// Micro-averaged entity F1 plus the KB-restricted variant (gold entities
/// that exist in the supplied KB and were not seen in the prior dialog
/// context).
pub fn entity_f1(
    preds: &[PredictedResponse],
    gold: &Corpus,
    kb: &KnowledgeBase,
    ontology: &Ontology,
) -> Result<(f64, f64)> {
    let entity_values: BTreeSet<&str> =
        ontology.entities.iter().map(|e| e.value.as_str()).collect();
    let kb_values: BTreeSet<String> = kb
        .entities()
        .iter()
        .map(|e| e.value.clone())
        .collect();
    let mut by_key: BTreeMap<(&str, usize), &PredictedResponse> = BTreeMap::new();
    for p in preds {
        by_key.insert((p.dialog_id.as_str(), p.turn), p);
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    let mut kb_tp = 0usize;
    let mut kb_fp = 0usize;
    let mut kb_fn = 0usize;
    for record in &gold.records {
        let mut context: BTreeSet<&str> = BTreeSet::new();
        for (i, utt) in record.dialog.utterances.iter().enumerate() {
            if utt.speaker == Speaker::Agent {
                if let Some(p) = by_key.get(&(record.dialog.id.as_str(), i)) {
                    let gold_set: BTreeSet<&str> = utt
                        .mentions
                        .iter()
                        .map(|m| m.entity.value.as_str())
                        .collect();
                    let pred_set: BTreeSet<&str> = p
                        .text
                        .split_whitespace()
                        .filter(|t| entity_values.contains(t))
                        .collect();
                    tp += gold_set.intersection(&pred_set).count();
                    fp += pred_set.difference(&gold_set).count();
                    fn_ += gold_set.difference(&pred_set).count();

                    // The KB-restricted gold support: inferable only from
                    // the KB, not from prior context.
                    let kb_gold: BTreeSet<&str> = gold_set
                        .iter()
                        .filter(|v| kb_values.contains(**v) && !context.contains(**v))
                        .copied()
                        .collect();
                    let kb_pred: BTreeSet<&str> = pred_set
                        .iter()
                        .filter(|v| kb_values.contains(**v) && !context.contains(**v))
                        .copied()
                        .collect();
                    kb_tp += kb_gold.intersection(&kb_pred).count();
                    kb_fp += kb_pred.difference(&kb_gold).count();
                    kb_fn += kb_gold.difference(&kb_pred).count();
                }
            }
            for tok in &utt.tokens {
                if let Some(v) = entity_values.get(tok.as_str()) {
                    context.insert(v);
                }
            }
        }
    }
    Ok((micro_f1(tp, fp, fn_), micro_f1(kb_tp, kb_fp, kb_fn)))
}

fn micro_f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp + fp + fn_ == 0 {
        return 1.0;
    }
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Corpus-level BLEU-4 with uniform weights and brevity penalty, scaled to
/// 0–100. Add-one smoothing applies to the 2–4-gram precisions; the unigram
/// precision stays exact, so fully disjoint outputs score 0.
pub fn bleu(pairs: &[(Vec<String>, Vec<String>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(CoreError::Evaluation("empty corpus for BLEU".into()));
    }
    let mut pred_len = 0usize;
    let mut gold_len = 0usize;
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    for (pred, gold) in pairs {
        pred_len += pred.len();
        gold_len += gold.len();
        for n in 1..=4 {
            let pred_ngrams = ngram_counts(pred, n);
            let gold_ngrams = ngram_counts(gold, n);
            for (gram, count) in &pred_ngrams {
                let clip = gold_ngrams.get(gram).copied().unwrap_or(0);
                matches[n - 1] += (*count).min(clip);
                totals[n - 1] += count;
            }
        }
    }
    if matches[0] == 0 || totals[0] == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.25 * (matches[0] as f64 / totals[0] as f64).ln();
    for n in 1..4 {
        let p = (matches[n] + 1) as f64 / (totals[n] + 1) as f64;
        log_sum += 0.25 * p.ln();
    }
    let bp = if pred_len >= gold_len || pred_len == 0 {
        1.0
    } else {
        (1.0 - gold_len as f64 / pred_len as f64).exp()
    };
    Ok(100.0 * bp * log_sum.exp())
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<Vec<&str>, usize> {
    let mut out: BTreeMap<Vec<&str>, usize> = BTreeMap::new();
    if tokens.len() < n {
        return out;
    }
    for w in tokens.windows(n) {
        *out.entry(w.iter().map(String::as_str).collect()).or_default() += 1;
    }
    out
}

/// Macro-averaged F1 of predicted vs. ground-truth row sets. Dialogs where
/// both sets are empty count as F1 = 1; an empty side against a non-empty
/// one counts 0.
fn macro_set_f1(per_dialog: &[(BTreeSet<String>, BTreeSet<String>)]) -> f64 {
    if per_dialog.is_empty() {
        return 1.0;
    }
    let mut total = 0.0;
    for (predicted, truth) in per_dialog {
        let f1 = if predicted.is_empty() && truth.is_empty() {
            1.0
        } else if predicted.is_empty() || truth.is_empty() {
            0.0
        } else {
            let inter = predicted.intersection(truth).count() as f64;
            let pr = inter / predicted.len() as f64;
            let re = inter / truth.len() as f64;
            if pr + re == 0.0 {
                0.0
            } else {
                2.0 * pr * re / (pr + re)
            }
        };
        total += f1;
    }
    total / per_dialog.len() as f64
}

/// Insertion F1: predicted inserted rows (by head) against the simulator's
/// per-dialog ground truth of participating rows missing from the training
/// KB.
pub fn ri_f1(traces: &[ArbitrationTrace], stats: &SimStats) -> Result<f64> {
    let sets = collect_sets(
        traces,
        stats,
        |t| t.inserted_heads().iter().map(|h| h.value.clone()).collect(),
        |truth| truth.insert_rows.iter().cloned().collect(),
    )?;
    Ok(macro_set_f1(&sets))
}

/// Deletion F1 against `D_g` (training-KB rows absent from the dialog's
/// contemporary snapshot). The truth side includes task-neutral rows, so
/// recall underestimates; raw set sizes are surfaced in the report.
pub fn rd_f1(traces: &[ArbitrationTrace], stats: &SimStats) -> Result<f64> {
    let sets = collect_sets(
        traces,
        stats,
        |t| t.deleted.iter().map(|r| r.head.value.clone()).collect(),
        |truth| truth.delete_rows.iter().cloned().collect(),
    )?;
    Ok(macro_set_f1(&sets))
}

/// Total (predicted, truth) set sizes behind the macro F1s.
pub fn set_sizes(
    traces: &[ArbitrationTrace],
    stats: &SimStats,
    deletions: bool,
) -> Result<(usize, usize)> {
    let sets = if deletions {
        collect_sets(
            traces,
            stats,
            |t| t.deleted.iter().map(|r| r.head.value.clone()).collect(),
            |truth| truth.delete_rows.iter().cloned().collect(),
        )?
    } else {
        collect_sets(
            traces,
            stats,
            |t| t.inserted_heads().iter().map(|h| h.value.clone()).collect(),
            |truth| truth.insert_rows.iter().cloned().collect(),
        )?
    };
    Ok((
        sets.iter().map(|(p, _)| p.len()).sum(),
        sets.iter().map(|(_, t)| t.len()).sum(),
    ))
}

fn collect_sets(
    traces: &[ArbitrationTrace],
    stats: &SimStats,
    predicted: impl Fn(&ArbitrationTrace) -> BTreeSet<String>,
    truth_of: impl Fn(&crate::sim::DialogTruth) -> BTreeSet<String>,
) -> Result<Vec<(BTreeSet<String>, BTreeSet<String>)>> {
    traces
        .iter()
        .map(|t| {
            let truth = stats.truth_for(&t.dialog_id).ok_or_else(|| {
                CoreError::Evaluation(format!("no ground truth for dialog {}", t.dialog_id))
            })?;
            Ok((predicted(t), truth_of(truth)))
        })
        .collect()
}

/// Completion accuracy: a prediction is correct when the assigned key value
/// keeps the dialog's suggestion sequence strictly descending against the
/// final KB (only adjacent suggestions constrain it).
pub fn rc_accuracy(
    traces: &[ArbitrationTrace],
    corpus: &Corpus,
    ontology: &Ontology,
    key: &OrderingKey,
) -> Result<Option<f64>> {
    let by_id: BTreeMap<&str, &crate::data::Dialog> = corpus
        .records
        .iter()
        .map(|r| (r.dialog.id.as_str(), &r.dialog))
        .collect();
    let mut total = 0usize;
    let mut correct = 0usize;
    for trace in traces {
        let Some(dialog) = by_id.get(trace.dialog_id.as_str()) else {
            continue;
        };
        let recs = recommended_heads(dialog, ontology);
        for (head, rel, tail) in &trace.completed {
            if rel != &key.relation {
                continue;
            }
            total += 1;
            let Some(pos) = recs.iter().position(|r| r == &head.value) else {
                // No order constraint on non-suggested rows.
                correct += 1;
                continue;
            };
            let rating_of = |head_value: &str| -> Option<String> {
                trace
                    .result_kb
                    .row_by_head_value(head_value)
                    .and_then(|r| r.fields.get(&key.relation))
                    .map(|e| e.value.clone())
            };
            let prev_ok = pos
                .checked_sub(1)
                .and_then(|j| rating_of(&recs[j]))
                .map(|prev| key.outranks(&prev, &tail.value))
                .unwrap_or(true);
            let next_ok = recs
                .get(pos + 1)
                .and_then(|h| rating_of(h))
                .map(|next| key.outranks(&tail.value, &next))
                .unwrap_or(true);
            if prev_ok && next_ok {
                correct += 1;
            }
        }
    }
    if total == 0 {
        return Ok(None);
    }
    Ok(Some(correct as f64 / total as f64))
}

/// The full metric bundle for one run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub config_hash: String,
    pub split: String,
    pub bleu_smoothing: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub response_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dialog_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bleu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entity_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kb_entity_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ri_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rd_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rc_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inconsistency_rate_pre: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inconsistency_rate_post: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub insertion_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deletion_count: Option<usize>,
    /// Raw set sizes behind the macro F1s (predictions, truths).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub insert_set_sizes: Option<(usize, usize)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delete_set_sizes: Option<(usize, usize)>,
}

impl MetricReport {
    pub fn new(config_hash: &str, split: &str) -> Self {
        MetricReport {
            config_hash: config_hash.into(),
            split: split.into(),
            bleu_smoothing: "add-one".into(),
            ..Default::default()
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| CoreError::json("serializing report", e))?;
        std::fs::write(path, text)
            .map_err(|e| CoreError::io(format!("writing report {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::io(format!("reading report {}", path.display()), e))?;
        serde_json::from_str(&text).map_err(|e| CoreError::json("parsing report", e))
    }
}
