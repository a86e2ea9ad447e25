//! Inconsistent-corpus simulator: evolve a base KB through timestamped
//! snapshots, ground template-generated dialogs against their contemporary
//! snapshot, and pair everything with the final snapshot for training.
//! Test dialogs are grounded against the final snapshot itself, so the test
//! split carries no inconsistencies.

pub mod assets;
pub mod availability;
pub mod ground;
pub mod templates;
pub mod timeline;

pub use availability::{AvailabilityProcess, CheckinProfile, ProcessKind};
pub use ground::{assign_and_ground, GroundingOutcome};
pub use templates::{DialogSkeleton, SkeletonGenerator, TemplateSet};
pub use timeline::{simulate_timeline, KbTimeline};

use crate::data::{
    consistency_judge, Corpus, KnowledgeBase, Ontology, OrderingKey,
};
use crate::nn::params::sub_seed;
use crate::{CoreError, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct SimInputs {
    pub ontology: Ontology,
    pub base_kb: KnowledgeBase,
    pub templates: TemplateSet,
    /// Availability process per domain (row head entity type).
    pub processes: BTreeMap<String, AvailabilityProcess>,
    pub train_n: usize,
    pub test_n: usize,
    pub horizon: u64,
    pub seed: u64,
    pub ordering_key: OrderingKey,
    pub config_hash: String,
}

/// Per-dialog arbitration ground truth, derived from the simulation:
/// `insert_rows` are gold rows the dialog participates in that are missing
/// from the training KB; `delete_rows` are training-KB rows absent from the
/// contemporary snapshot.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DialogTruth {
    pub dialog_id: String,
    pub tick: u64,
    pub gold_kb_id: String,
    pub insert_rows: Vec<String>,
    pub delete_rows: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimStats {
    pub config_hash: String,
    pub inconsistency_rate: f64,
    pub train_dialogs: usize,
    pub test_dialogs: usize,
    pub skipped_train: usize,
    pub skipped_test: usize,
    pub per_dialog: Vec<DialogTruth>,
}

impl SimStats {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::io(format!("reading stats {}", path.display()), e))?;
        serde_json::from_str(&text).map_err(|e| CoreError::json("parsing stats", e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| CoreError::json("serializing stats", e))?;
        std::fs::write(path, text)
            .map_err(|e| CoreError::io(format!("writing stats {}", path.display()), e))
    }

    pub fn truth_for(&self, dialog_id: &str) -> Option<&DialogTruth> {
        self.per_dialog.iter().find(|t| t.dialog_id == dialog_id)
    }
}

pub struct SimOutput {
    pub train: Corpus,
    pub test: Corpus,
    pub train_kb: KnowledgeBase,
    pub gold: BTreeMap<String, KnowledgeBase>,
    pub stats: SimStats,
}

pub fn simulate(inputs: &SimInputs) -> Result<SimOutput> {
    inputs.ontology.validate()?;
    inputs.base_kb.validate(&inputs.ontology)?;
    let timeline = simulate_timeline(
        &inputs.base_kb,
        &inputs.processes,
        inputs.horizon,
        sub_seed(inputs.seed, "timeline"),
    )?;
    let generator = SkeletonGenerator::new(&inputs.templates, &inputs.ontology, &inputs.base_kb)?;

    let train_skeletons: Vec<_> = (0..inputs.train_n)
        .map(|i| generator.generate(sub_seed(inputs.seed, &format!("skel:train:{i}"))))
        .collect();
    let test_skeletons: Vec<_> = (0..inputs.test_n)
        .map(|i| generator.generate(sub_seed(inputs.seed, &format!("skel:test:{i}"))))
        .collect();

    let train_out = assign_and_ground(
        &train_skeletons,
        &timeline,
        &inputs.ontology,
        &inputs.ordering_key,
        inputs.seed,
        "train",
        false,
    );
    let test_out = assign_and_ground(
        &test_skeletons,
        &timeline,
        &inputs.ontology,
        &inputs.ordering_key,
        inputs.seed,
        "test",
        true,
    );

    let train_kb = timeline.train_kb();
    let mut gold = BTreeMap::new();
    for &tick in train_out.gold_ticks.iter().chain(test_out.gold_ticks.iter()) {
        gold.insert(KbTimeline::snapshot_id(tick), timeline.snapshot(tick));
    }
    gold.insert(
        KbTimeline::snapshot_id(timeline.final_tick()),
        train_kb.clone(),
    );

    let train_heads: std::collections::BTreeSet<&str> = train_kb
        .rows
        .iter()
        .map(|r| r.head.value.as_str())
        .collect();
    let mut inconsistent = 0usize;
    let mut per_dialog = Vec::with_capacity(train_out.records.len());
    for record in &train_out.records {
        let gold_id = record.gold_kb_id.as_ref().expect("simulated record has gold");
        let gold_kb = &gold[gold_id];
        if !consistency_judge(
            &record.dialog,
            &train_kb,
            gold_kb,
            &inputs.ontology,
            &inputs.ordering_key,
        ) {
            inconsistent += 1;
        }
        let mentions = record.dialog.mention_values();
        let insert_rows = gold_kb
            .rows
            .iter()
            .filter(|r| mentions.contains(r.head.value.as_str()))
            .filter(|r| !train_heads.contains(r.head.value.as_str()))
            .map(|r| r.head.value.clone())
            .collect();
        let gold_heads: std::collections::BTreeSet<&str> =
            gold_kb.rows.iter().map(|r| r.head.value.as_str()).collect();
        let delete_rows = train_kb
            .rows
            .iter()
            .filter(|r| !gold_heads.contains(r.head.value.as_str()))
            .map(|r| r.head.value.clone())
            .collect();
        per_dialog.push(DialogTruth {
            dialog_id: record.dialog.id.clone(),
            tick: record.dialog.timestamp,
            gold_kb_id: gold_id.clone(),
            insert_rows,
            delete_rows,
        });
    }

    let n_train = train_out.records.len();
    let stats = SimStats {
        config_hash: inputs.config_hash.clone(),
        inconsistency_rate: if n_train == 0 {
            0.0
        } else {
            inconsistent as f64 / n_train as f64
        },
        train_dialogs: n_train,
        test_dialogs: test_out.records.len(),
        skipped_train: train_out.skipped,
        skipped_test: test_out.skipped,
        per_dialog,
    };

    Ok(SimOutput {
        train: Corpus {
            records: train_out.records,
        },
        test: Corpus {
            records: test_out.records,
        },
        train_kb,
        gold,
        stats,
    })
}

/// Writes `train.jsonl`, `test.jsonl`, `kb_train.json`, `kb_gold/` and
/// `stats.json` under the output directory.
pub fn write_output(dir: &Path, out: &SimOutput) -> Result<()> {
    std::fs::create_dir_all(dir.join("kb_gold"))
        .map_err(|e| CoreError::io(format!("creating {}", dir.display()), e))?;
    out.train.save(&dir.join("train.jsonl"))?;
    out.test.save(&dir.join("test.jsonl"))?;
    out.train_kb.save(&dir.join("kb_train.json"))?;
    for (id, kb) in &out.gold {
        kb.save(&dir.join("kb_gold").join(format!("{id}.json")))?;
    }
    out.stats.save(&dir.join("stats.json"))?;
    Ok(())
}

/// Loads the gold snapshots referenced by a corpus from a `kb_gold/` dir.
pub fn load_gold_dir(dir: &Path) -> Result<BTreeMap<String, KnowledgeBase>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir)
        .map_err(|e| CoreError::io(format!("reading gold dir {}", dir.display()), e))?;
    let mut paths: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|x| x == "json").unwrap_or(false))
        .collect();
    paths.sort();
    for path in paths {
        let kb = KnowledgeBase::load(&path)?;
        out.insert(kb.id.clone(), kb);
    }
    Ok(out)
}
