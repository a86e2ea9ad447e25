//! Contract tests for the masked-entity model: pointer normalization, gate
//! identities, likelihood conventions, the KB-independence of the context
//! head, and parity between the tape forward and the frozen evaluator.

use kbarb_core::data::*;
use kbarb_core::models::*;
use kbarb_core::nn::params::seeded_rng;
use kbarb_core::nn::{KbGraph, Tape, Vocab};
use kbarb_core::sim::{assets, simulate, AvailabilityProcess, ProcessKind, SimInputs};
use rand::Rng;
use std::collections::BTreeMap;

fn toy_world(n: usize, seed: u64) -> (Ontology, KnowledgeBase, Corpus) {
    let (ontology, base_kb) = assets::default_domain(5, 3, 0xCAFE);
    let templates = assets::default_templates();
    let mut processes = BTreeMap::new();
    processes.insert(
        "restaurant".into(),
        AvailabilityProcess {
            kind: ProcessKind::AlwaysOn,
            maintenance_prob: 0.0,
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
        horizon: 4,
        seed,
        ordering_key: OrderingKey::default(),
        config_hash: "t".into(),
    };
    let out = simulate(&inputs).unwrap();
    (ontology, out.train_kb, out.train)
}

fn small_dims() -> ModelDims {
    ModelDims {
        emb: 8,
        pos_dim: 4,
        pos_clip: 10,
        rgcn_layers: 1,
        rgcn_init_scale: 0.5,
        hops: 2,
        mlp_hidden: 6,
    }
}

fn model_for(ontology: &Ontology, corpus: &Corpus, seed: u64) -> MemModel<f64> {
    let vocab = Vocab::build(ontology, &[corpus]);
    MemModel::new(small_dims(), vocab, ontology.relation_types.len(), seed)
}

#[test]
fn pointer_distributions_normalize() {
    let (ontology, kb, corpus) = toy_world(3, 5);
    let model = model_for(&ontology, &corpus, 1);
    let graph = KbGraph::build(&kb, &ontology);
    for record in &corpus.records {
        for inst in mask_instances(&record.dialog) {
            let prepared = model.prepare_instance(&inst);
            let mut tape = Tape::new();
            let z = model.encode_kb_graph(&mut tape, &graph).unwrap();
            let fwd = model.instance_forward(&mut tape, &graph, z, &prepared);
            let kb_sum: f64 = tape.value_v(fwd.p_kb).sum();
            let ctx_sum: f64 = tape.value_v(fwd.p_ctx).sum();
            assert!((kb_sum - 1.0).abs() < 1e-6, "P_kb sums to {kb_sum}");
            assert!((ctx_sum - 1.0).abs() < 1e-6, "P_ctx sums to {ctx_sum}");
            let lambda = tape.scalar(fwd.lambda);
            assert!((0.0..=1.0).contains(&lambda));
            let p = tape.scalar(fwd.prob);
            assert!((0.0..=1.0 + 1e-12).contains(&p));
        }
    }
}

#[test]
fn gate_forced_to_one_reduces_to_kb_pointer() {
    let (ontology, kb, corpus) = toy_world(2, 7);
    let mut model = model_for(&ontology, &corpus, 2);
    // Zero the gate scorer and push its bias high: λ = σ(large) = 1.
    for name in ["gate.w1", "gate.w2"] {
        let id = model.params.id_by_name(name).unwrap();
        match model.params.tensor_mut(id) {
            kbarb_core::nn::Tensor::M(m) => m.fill(0.0),
            kbarb_core::nn::Tensor::V(v) => v.fill(0.0),
        }
    }
    let b2 = model.params.id_by_name("gate.b2").unwrap();
    if let kbarb_core::nn::Tensor::V(v) = model.params.tensor_mut(b2) {
        v.fill(1e9);
    }
    let graph = KbGraph::build(&kb, &ontology);
    let inst = mask_instances(&corpus.records[0].dialog).remove(0);
    let prepared = model.prepare_instance(&inst);
    let mut tape = Tape::new();
    let z = model.encode_kb_graph(&mut tape, &graph).unwrap();
    let fwd = model.instance_forward(&mut tape, &graph, z, &prepared);
    assert_eq!(tape.scalar(fwd.lambda), 1.0);
    let gold_idx = graph.entity_index(&prepared.gold).expect("gold in KB");
    let want = tape.value_v(fwd.p_kb)[gold_idx];
    let got = tape.scalar(fwd.prob);
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn single_entity_kb_with_gate_one_gives_probability_one() {
    let (ontology, _, corpus) = toy_world(2, 7);
    let mut model = model_for(&ontology, &corpus, 3);
    for name in ["gate.w1", "gate.w2"] {
        let id = model.params.id_by_name(name).unwrap();
        match model.params.tensor_mut(id) {
            kbarb_core::nn::Tensor::M(m) => m.fill(0.0),
            kbarb_core::nn::Tensor::V(v) => v.fill(0.0),
        }
    }
    let b2 = model.params.id_by_name("gate.b2").unwrap();
    if let kbarb_core::nn::Tensor::V(v) = model.params.tensor_mut(b2) {
        v.fill(1e9);
    }
    // The KB holds exactly one entity: the masked instance's gold.
    let inst = mask_instances(&corpus.records[0].dialog).remove(0);
    let kb = KnowledgeBase::new("one", vec![Row::new(inst.gold.clone())]).unwrap();
    let graph = KbGraph::build(&kb, &ontology);
    let prepared = model.prepare_instance(&inst);
    let mut tape = Tape::new();
    let z = model.encode_kb_graph(&mut tape, &graph).unwrap();
    let fwd = model.instance_forward(&mut tape, &graph, z, &prepared);
    assert_eq!(tape.scalar(fwd.prob), 1.0);
}

#[test]
fn hand_computed_mixture_on_fixed_weights() {
    // Width-4 toy with every weight pinned; the expected probability is the
    // gated mixture recomputed with plain matrix arithmetic.
    let ontology = Ontology {
        entity_types: vec!["r".into(), "c".into()],
        relation_types: vec![RelationType {
            name: "has".into(),
            head_type: "r".into(),
            tail_type: "c".into(),
            latent: false,
        }],
        entities: vec![Entity::new("x", "r"), Entity::new("y", "c")],
    };
    let dialog = Dialog {
        id: "d".into(),
        timestamp: 0,
        utterances: vec![
            Utterance::new(Speaker::User, vec!["want".into(), "y".into()], vec![Mention {
                start: 1,
                end: 2,
                entity: Entity::new("y", "c"),
            }]),
            Utterance::new(Speaker::Agent, vec!["take".into(), "x".into()], vec![Mention {
                start: 1,
                end: 2,
                entity: Entity::new("x", "r"),
            }]),
        ],
    };
    let kb = KnowledgeBase::new(
        "k",
        vec![Row::new(Entity::new("x", "r")).with_field("has", Entity::new("y", "c"))],
    )
    .unwrap();
    let corpus = Corpus {
        records: vec![CorpusRecord { dialog: dialog.clone(), gold_kb_id: None }],
    };
    let dims = ModelDims {
        emb: 4,
        pos_dim: 2,
        pos_clip: 10,
        rgcn_layers: 1,
        rgcn_init_scale: 0.5,
        hops: 1,
        mlp_hidden: 3,
    };
    let vocab = Vocab::build(&ontology, &[&corpus]);
    let mut model: MemModel<f64> = MemModel::new(dims, vocab, 1, 99);
    // Deterministic pseudo-random fill so every path carries signal.
    let mut rng = seeded_rng(1234);
    let flat_len = model.params.flatten_f64().len();
    let flat: Vec<f64> = (0..flat_len).map(|_| rng.gen_range(-0.2..0.2)).collect();
    model.params.load_flat_f64(&flat);

    let inst = mask_instances(&dialog).remove(0);
    let prepared = model.prepare_instance(&inst);
    let graph = KbGraph::build(&kb, &ontology);
    let mut tape = Tape::new();
    let z = model.encode_kb_graph(&mut tape, &graph).unwrap();
    let fwd = model.instance_forward(&mut tape, &graph, z, &prepared);
    let got = tape.scalar(fwd.prob);

    // Independent recomputation of the head mixture from the tape's own
    // intermediate distributions (the mixture itself is the contract here).
    let lambda = tape.scalar(fwd.lambda);
    let gold_idx = graph.entity_index(&inst.gold).unwrap();
    let p_kb = tape.value_v(fwd.p_kb)[gold_idx];
    let gold_tok = model.vocab.known_token_id(&inst.gold.value).unwrap();
    let ctx_mass: f64 = prepared
        .prepared
        .flat_index
        .iter()
        .enumerate()
        .filter(|(_, (_, _, t))| *t == gold_tok)
        .map(|(row, _)| tape.value_v(fwd.p_ctx)[row])
        .sum();
    let want = lambda * p_kb + (1.0 - lambda) * ctx_mass;
    assert!((got - want).abs() < 1e-12, "got {got}, want {want}");

    // And the frozen evaluator reproduces the same likelihood.
    let frozen = model.freeze(&[prepared]);
    let frozen_ll = model.frozen_log_likelihood(&frozen, &kb, &ontology).unwrap();
    assert!(
        (frozen_ll - got.max(LIKELIHOOD_FLOOR).ln()).abs() < 1e-9,
        "frozen {frozen_ll} vs tape {}",
        got.ln()
    );
}

#[test]
fn likelihood_conventions() {
    let (ontology, kb, corpus) = toy_world(3, 11);
    let model = model_for(&ontology, &corpus, 4);
    // Dialog with no agent mentions: empty product = 1.
    let empty = Dialog {
        id: "e".into(),
        timestamp: 0,
        utterances: vec![
            Utterance::new(Speaker::User, vec!["hi".into()], vec![]),
            Utterance::new(Speaker::Agent, vec!["hello".into()], vec![]),
        ],
    };
    let instances: Vec<PreparedInstance> = mask_instances(&empty)
        .iter()
        .map(|i| model.prepare_instance(i))
        .collect();
    assert!(instances.is_empty());
    assert_eq!(
        model.dialog_likelihood(&instances, &kb, &ontology).unwrap(),
        1.0
    );

    // ℒ ≤ 1 always; log-space likelihood is order-invariant in E_a.
    let record = &corpus.records[0];
    let mut prepared: Vec<PreparedInstance> = mask_instances(&record.dialog)
        .iter()
        .map(|i| model.prepare_instance(i))
        .collect();
    let ll = model.dialog_log_likelihood(&prepared, &kb, &ontology).unwrap();
    assert!(ll <= 1e-12, "log likelihood {ll} above 0");
    prepared.reverse();
    let ll_rev = model.dialog_log_likelihood(&prepared, &kb, &ontology).unwrap();
    assert!((ll - ll_rev).abs() < 1e-12);
}

#[test]
fn deleting_a_kb_row_never_changes_the_context_head() {
    let (ontology, kb, corpus) = toy_world(3, 13);
    let model = model_for(&ontology, &corpus, 5);
    let record = &corpus.records[0];
    let inst = mask_instances(&record.dialog).remove(0);
    let prepared = model.prepare_instance(&inst);

    let p_ctx_of = |kb: &KnowledgeBase| -> Vec<f64> {
        let graph = KbGraph::build(kb, &ontology);
        let mut tape = Tape::new();
        let z = model.encode_kb_graph(&mut tape, &graph).unwrap();
        let fwd = model.instance_forward(&mut tape, &graph, z, &prepared);
        tape.value_v(fwd.p_ctx).to_vec()
    };
    let base = p_ctx_of(&kb);
    for row in &kb.rows {
        let smaller = kb.without_row(&row.head);
        assert_eq!(p_ctx_of(&smaller), base, "P_ctx changed when deleting {}", row.head.value);
    }
}

#[test]
fn frozen_evaluator_matches_tape_path() {
    let (ontology, kb, corpus) = toy_world(4, 17);
    let model = model_for(&ontology, &corpus, 6);
    for record in &corpus.records {
        let instances: Vec<PreparedInstance> = mask_instances(&record.dialog)
            .iter()
            .map(|i| model.prepare_instance(i))
            .collect();
        if instances.is_empty() {
            continue;
        }
        let frozen = model.freeze(&instances);
        for variant in [kb.clone(), kb.without_row(&kb.rows[0].head)] {
            let tape_ll = model
                .dialog_log_likelihood(&instances, &variant, &ontology)
                .unwrap();
            let frozen_ll = model
                .frozen_log_likelihood(&frozen, &variant, &ontology)
                .unwrap();
            assert!(
                (tape_ll - frozen_ll).abs() < 1e-9,
                "tape {tape_ll} vs frozen {frozen_ll}"
            );
        }
    }
}

#[test]
fn mask_instance_count_matches_recount_oracle() {
    // Brute-force recount over 100 generated dialogs.
    let (_, _, corpus) = toy_world(100, 23);
    for record in &corpus.records {
        let want: usize = record
            .dialog
            .utterances
            .iter()
            .filter(|u| u.speaker == Speaker::Agent)
            .map(|u| u.mentions.len())
            .sum();
        assert_eq!(mask_instances(&record.dialog).len(), want);
    }
}

#[test]
fn out_of_support_gold_floors_and_rewards_zero() {
    // A dialog whose agent-mentioned entity is in neither the KB nor the
    // history: its probability is 0 on every KB variant, so deleting any
    // row leaves the likelihood bitwise unchanged and the deletion reward
    // is exactly 0.
    let (ontology, kb, corpus) = toy_world(2, 29);
    let model = model_for(&ontology, &corpus, 7);
    let ghost = Entity::new("resto_nowhere_cheap_thai_g9n9", "restaurant");
    let dialog = Dialog {
        id: "ghost".into(),
        timestamp: 0,
        utterances: vec![
            Utterance::new(Speaker::User, vec!["hi".into()], vec![]),
            Utterance::new(
                Speaker::Agent,
                vec!["try".into(), ghost.value.clone()],
                vec![Mention { start: 1, end: 2, entity: ghost.clone() }],
            ),
        ],
    };
    let instances: Vec<PreparedInstance> = mask_instances(&dialog)
        .iter()
        .map(|i| model.prepare_instance(i))
        .collect();
    let frozen = model.freeze(&instances);
    let base = model.frozen_log_likelihood(&frozen, &kb, &ontology).unwrap();
    assert!((base - LIKELIHOOD_FLOOR.ln()).abs() < 1e-12);
    for row in &kb.rows {
        let reward = rd_reward(&model, &frozen, &kb, &row.head, &ontology).unwrap();
        assert_eq!(reward, [0.0, 0.0]);
    }
}
