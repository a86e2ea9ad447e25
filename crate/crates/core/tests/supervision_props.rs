//! Distant-supervision oracles: type safety of candidates against exhaustive
//! enumeration, label correctness against raw set membership, the partition
//! property, and purity under corpus reordering.

use kbarb_core::data::*;
use kbarb_core::sim::{assets, simulate, AvailabilityProcess, ProcessKind, SimInputs};
use kbarb_core::supervision::*;
use std::collections::BTreeMap;

fn world(n: usize, seed: u64) -> (Ontology, KnowledgeBase, Corpus) {
    let (ontology, base_kb) = assets::default_domain(8, 3, 0xCAFE);
    let templates = assets::default_templates();
    let mut processes = BTreeMap::new();
    processes.insert(
        "restaurant".into(),
        AvailabilityProcess {
            kind: ProcessKind::Bernoulli { p: 0.8 },
            maintenance_prob: 0.02,
            closure_prob: 0.0,
        },
    );
    let inputs = SimInputs {
        ontology: ontology.clone(),
        base_kb: base_kb.clone(),
        templates,
        processes,
        train_n: n,
        test_n: 0,
        horizon: 48,
        seed,
        ordering_key: OrderingKey::default(),
        config_hash: "t".into(),
    };
    let out = simulate(&inputs).unwrap();
    (ontology, out.train_kb, out.train)
}

#[test]
fn candidates_match_exhaustive_enumeration_on_100_dialogs() {
    let (ontology, _, corpus) = world(100, 3);
    for record in &corpus.records {
        let got: std::collections::BTreeSet<Triple> =
            candidate_triples(&record.dialog, &ontology).into_iter().collect();
        // Oracle: every ordered pair of distinct mentioned entities crossed
        // with every relation, filtered by type consistency.
        let mentioned = record.dialog.mentioned_entities();
        let mut want = std::collections::BTreeSet::new();
        for e1 in &mentioned {
            for e2 in &mentioned {
                if e1 == e2 {
                    continue;
                }
                for rel in &ontology.relation_types {
                    let t = Triple::new((*e1).clone(), rel.name.clone(), (*e2).clone());
                    if t.type_consistent(&ontology) {
                        want.insert(t);
                    }
                }
            }
        }
        assert_eq!(got, want, "dialog {}", record.dialog.id);
        // No type-violating candidate ever appears.
        assert!(got.iter().all(|t| t.type_consistent(&ontology)));
    }
}

#[test]
fn labels_match_set_membership_oracle() {
    let (ontology, kb, corpus) = world(60, 11);
    let triples = kb_to_triples(&kb);
    let heads: std::collections::BTreeSet<&str> =
        kb.rows.iter().map(|r| r.head.value.as_str()).collect();
    let ds = build_ri_dataset(&corpus, &kb, &ontology);
    assert!(!ds.labeled.is_empty());
    for c in &ds.labeled {
        let want = if triples.contains(&c.triple) {
            Label::Positive
        } else if heads.contains(c.triple.head.value.as_str()) {
            Label::Negative
        } else {
            Label::Infer
        };
        assert_eq!(c.label, want, "candidate {:?}", c.triple);
    }
    // Sanity on the conservative annotation: no positive outside the KB, no
    // negative with a missing head.
    for c in &ds.labeled {
        match c.label {
            Label::Positive => assert!(triples.contains(&c.triple)),
            Label::Negative => assert!(heads.contains(c.triple.head.value.as_str())),
            Label::Infer => assert!(!heads.contains(c.triple.head.value.as_str())),
        }
    }
}

#[test]
fn every_candidate_gets_exactly_one_label() {
    let (ontology, kb, corpus) = world(30, 17);
    for record in &corpus.records {
        let candidates = candidate_triples(&record.dialog, &ontology);
        let labeled = label_candidates(&record.dialog.id, &candidates, &kb);
        assert_eq!(labeled.len(), candidates.len());
    }
}

#[test]
fn labels_pure_under_corpus_permutation() {
    let (ontology, kb, corpus) = world(20, 23);
    let forward = build_ri_dataset(&corpus, &kb, &ontology);
    let mut reversed_corpus = corpus.clone();
    reversed_corpus.records.reverse();
    let backward = build_ri_dataset(&reversed_corpus, &kb, &ontology);
    let key = |c: &LabeledCandidate| (c.dialog_id.clone(), c.triple.clone());
    let mut a: Vec<_> = forward.labeled.iter().map(|c| (key(c), c.label)).collect();
    let mut b: Vec<_> = backward.labeled.iter().map(|c| (key(c), c.label)).collect();
    a.sort();
    b.sort();
    assert_eq!(a, b);
}

#[test]
fn dataset_roundtrips_through_jsonl() {
    let (ontology, kb, corpus) = world(5, 29);
    let ds = build_ri_dataset(&corpus, &kb, &ontology);
    let dir = std::env::temp_dir().join("kbarb_ri_data_test");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("ri_data.jsonl");
    ds.save(&path).unwrap();
    let back = RiDataset::load(&path).unwrap();
    assert_eq!(ds.labeled, back.labeled);
}
