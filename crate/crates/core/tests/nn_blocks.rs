//! Oracle tests for the shared neural blocks: naive message-passing
//! reimplementation of the graph encoder, hand-unrolled memory hops,
//! pooling identities, gradient checks and determinism.

use kbarb_core::data::{Entity, KnowledgeBase, Mention, Ontology, RelationType, Row, Speaker, Utterance};
use kbarb_core::nn::*;
use kbarb_core::scalar::Scalar;
use ndarray::{Array1, Array2};
use rand::Rng;

fn tiny_ontology(n_rel: usize) -> Ontology {
    Ontology {
        entity_types: vec!["node".into(), "val".into()],
        relation_types: (0..n_rel)
            .map(|i| RelationType {
                name: format!("r{i}"),
                head_type: "node".into(),
                tail_type: "val".into(),
                latent: false,
            })
            .collect(),
        entities: vec![],
    }
}

/// Random KB shaped as a 5-node graph over 2 relation types.
fn random_graph_kb(rng: &mut rand_chacha::ChaCha8Rng) -> (Ontology, KnowledgeBase) {
    let ontology = tiny_ontology(2);
    let values: Vec<Entity> = (0..3).map(|i| Entity::new(format!("v{i}"), "val")).collect();
    let rows = (0..2)
        .map(|i| {
            let mut row = Row::new(Entity::new(format!("n{i}"), "node"));
            for r in 0..2 {
                if rng.gen::<f64>() < 0.8 {
                    let v = &values[rng.gen_range(0..values.len())];
                    row.fields.insert(format!("r{r}"), v.clone());
                }
            }
            row
        })
        .collect();
    (ontology, KnowledgeBase::new("g", rows).unwrap())
}

fn vocab_for(kb: &KnowledgeBase, ontology: &Ontology) -> Vocab {
    let mut tokens: Vec<String> = vec![
        "<unk>", "<mask>", "<e1>", "</e1>", "<e2>", "</e2>", "<sos>", "<eos>",
    ]
    .into_iter()
    .map(String::from)
    .collect();
    let mut extra: Vec<String> = kb.entities().iter().map(|e| e.value.clone()).collect();
    extra.sort();
    extra.dedup();
    tokens.extend(extra);
    let mut tags = vec!["<null>".to_string()];
    tags.extend(ontology.entity_types.iter().cloned());
    Vocab::from_lists(tokens, tags)
}

/// Independent naive r-GCN layer: per-node loops over all edges, exactly
/// `z' = relu(Σ_r Σ_{e'∈N^r_e} W_r z_{e'} + W_0 z_e)`.
fn naive_rgcn_layer(
    z: &Array2<f64>,
    edges: &[(Vec<usize>, Vec<usize>)],
    w_rel: &[Array2<f64>],
    w_self: &Array2<f64>,
) -> Array2<f64> {
    let (n, d) = z.dim();
    let mut out = Array2::<f64>::zeros((n, d));
    for e in 0..n {
        let mut acc = w_self.dot(&z.row(e).to_owned());
        for (r, (dst, src)) in edges.iter().enumerate() {
            for (k, &dd) in dst.iter().enumerate() {
                if dd == e {
                    acc = acc + w_rel[r].dot(&z.row(src[k]).to_owned());
                }
            }
        }
        out.row_mut(e).assign(&acc.mapv(|x| x.max(0.0)));
    }
    out
}

#[test]
fn rgcn_matches_naive_message_passing() {
    // 20 random 5-node graphs, one layer, fixed weights: max abs err <= 1e-6.
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let mut rng = seeded_rng(100 + trial);
        let (ontology, kb) = random_graph_kb(&mut rng);
        let vocab = vocab_for(&kb, &ontology);
        let graph = KbGraph::build(&kb, &ontology);
        let mut params: ParamSet<f64> = ParamSet::new();
        let w = KbEncoderWeights::new(
            &mut params,
            6,
            1,
            ontology.relation_types.len(),
            0.5,
            "kb",
            &mut rng,
        );
        let tok_emb = params.add_matrix("tok", vocab.n_tokens(), 6, Init::Uniform(0.1), &mut rng);
        let tag_emb = params.add_matrix("tag", vocab.n_tags(), 6, Init::Uniform(0.1), &mut rng);

        let mut tape = Tape::new();
        let z0 = entity_embeddings(&mut tape, &params, tok_emb, tag_emb, &graph, &vocab).unwrap();
        let z1 = encode_kb(&mut tape, &params, &w, &graph, z0);
        let got = tape.value_m(z1).clone();

        let z0_plain = tape.value_m(z0).clone();
        let w_rel: Vec<Array2<f64>> = w.layers[0]
            .w_rel
            .iter()
            .map(|&id| params.matrix(id).clone())
            .collect();
        let w_self = params.matrix(w.layers[0].w_self).clone();
        let want = naive_rgcn_layer(&z0_plain, &graph.edges, &w_rel, &w_self);
        let err = (&got - &want).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        worst = worst.max(err);
        assert!(err <= 1e-6, "trial {trial}: max abs err {err}");
    }
    println!("rgcn naive-oracle max abs err over 20 graphs: {worst:.3e}");
}

#[test]
fn rgcn_without_edges_reduces_to_self_term() {
    let mut rng = seeded_rng(5);
    let ontology = tiny_ontology(1);
    // One row with no fields: a single isolated node.
    let kb = KnowledgeBase::new("g", vec![Row::new(Entity::new("n0", "node"))]).unwrap();
    let vocab = vocab_for(&kb, &ontology);
    let graph = KbGraph::build(&kb, &ontology);
    let mut params: ParamSet<f64> = ParamSet::new();
    let w = KbEncoderWeights::new(&mut params, 4, 1, 1, 1.0, "kb", &mut rng);
    let tok_emb = params.add_matrix("tok", vocab.n_tokens(), 4, Init::Uniform(0.1), &mut rng);
    let tag_emb = params.add_matrix("tag", vocab.n_tags(), 4, Init::Uniform(0.1), &mut rng);
    let mut tape = Tape::new();
    let z0 = entity_embeddings(&mut tape, &params, tok_emb, tag_emb, &graph, &vocab).unwrap();
    let z1 = encode_kb(&mut tape, &params, &w, &graph, z0);
    let want = params
        .matrix(w.layers[0].w_self)
        .dot(&tape.value_m(z0).row(0).to_owned())
        .mapv(|x: f64| x.max(0.0));
    let got = tape.value_m(z1).row(0).to_owned();
    assert!((&got - &want).iter().all(|x| x.abs() < 1e-12));
}

#[test]
fn memnet_matches_hand_unrolled_recurrence() {
    // k=2 hops over a 3-slot memory with fixed weights.
    let mut rng = seeded_rng(9);
    let mut params: ParamSet<f64> = ParamSet::new();
    let w = MemNetWeights::new(&mut params, 4, 2, 3, "mem", &mut rng);
    let memory = ndarray::array![
        [0.2, -0.1, 0.4, 0.0],
        [-0.3, 0.5, 0.1, 0.2],
        [0.0, 0.1, -0.2, 0.6]
    ];
    let q0v = ndarray::array![0.1, 0.2, -0.3, 0.4];

    let mut tape = Tape::new();
    let mem_node = tape.leaf_m(memory.clone());
    let q0 = tape.leaf_v(q0v.clone());
    let read = memory_read(&mut tape, &params, &w, mem_node, q0);
    let got = tape.value_v(read.q).clone();

    // Hand unroll.
    let mut q = q0v.clone();
    for hop in &w.hops {
        let w1z = params.matrix(hop.w1z);
        let w1q = params.matrix(hop.w1q);
        let b1 = params.vector(hop.b1);
        let w2 = params.vector(hop.w2);
        let b2 = params.vector(hop.b2)[0];
        let mut scores = Array1::<f64>::zeros(3);
        for k in 0..3 {
            let hidden = (w1z.dot(&memory.row(k).to_owned()) + w1q.dot(&q) + b1)
                .mapv(|x: f64| x.max(0.0));
            scores[k] = hidden.dot(w2) + b2;
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps = scores.mapv(|x| (x - max).exp());
        let gamma = &exps / exps.sum();
        let o = memory.t().dot(&gamma);
        q = q + o;
    }
    let err = (&got - &q).iter().fold(0.0f64, |m, x| m.max(x.abs()));
    assert!(err <= 1e-6, "hand unroll err {err}");

    // Attention normalization per hop.
    for att in &read.attentions {
        let sum: f64 = tape.value_v(*att).sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }
}

#[test]
fn memnet_single_slot_accumulates_the_slot() {
    let mut rng = seeded_rng(11);
    let mut params: ParamSet<f64> = ParamSet::new();
    let k = 3;
    let w = MemNetWeights::new(&mut params, 4, k, 3, "mem", &mut rng);
    let slot = ndarray::array![[0.5, -0.2, 0.1, 0.3]];
    let q0v = ndarray::array![0.0, 0.1, 0.2, 0.3];
    let mut tape = Tape::new();
    let mem_node = tape.leaf_m(slot.clone());
    let q0 = tape.leaf_v(q0v.clone());
    let read = memory_read(&mut tape, &params, &w, mem_node, q0);
    let want = &q0v + &(slot.row(0).to_owned() * k as f64);
    let got = tape.value_v(read.q).clone();
    assert!((&got - &want).iter().all(|x| x.abs() < 1e-12));
}

fn one_utterance(tokens: &[&str]) -> Utterance {
    Utterance::new(
        Speaker::User,
        tokens.iter().map(|t| t.to_string()).collect(),
        vec![],
    )
}

#[test]
fn single_utterance_dialog_pooling_is_identity() {
    let mut rng = seeded_rng(3);
    let ontology = tiny_ontology(1);
    let kb = KnowledgeBase::new("g", vec![Row::new(Entity::new("n0", "node"))]).unwrap();
    let vocab = vocab_for(&kb, &ontology);
    let mut params: ParamSet<f64> = ParamSet::new();
    let w = DialogEncoderWeights::new(
        &mut params,
        EncoderConfig { emb: 8, pos_dim: 4, markers: 0, pos_clip: 10 },
        &vocab,
        "enc",
        &mut rng,
    );
    let prepared = prepare_dialog(&[one_utterance(&["n0", "v0"])], &[], &vocab);
    let mut tape = Tape::new();
    let enc = encode_dialog(&mut tape, &params, &w, &prepared);
    // One utterance: the dialog-level attention weight is softmax over one
    // element, so c equals the single dialog state.
    let beta = tape.value_v(enc.dlg_attention);
    assert_eq!(beta.len(), 1);
    assert!((beta[0] - 1.0).abs() < 1e-12);
    let c = tape.value_v(enc.c);
    let h1 = tape.value_v(enc.dlg_states[0]);
    assert!((c - h1).iter().all(|x| x.abs() < 1e-12));
}

#[test]
fn attention_sums_to_one_on_random_inputs() {
    let mut rng = seeded_rng(17);
    let ontology = tiny_ontology(1);
    let kb = KnowledgeBase::new("g", vec![Row::new(Entity::new("n0", "node"))]).unwrap();
    let vocab = vocab_for(&kb, &ontology);
    let mut params: ParamSet<f64> = ParamSet::new();
    let w = DialogEncoderWeights::new(
        &mut params,
        EncoderConfig { emb: 8, pos_dim: 4, markers: 0, pos_clip: 10 },
        &vocab,
        "enc",
        &mut rng,
    );
    let utts = vec![
        one_utterance(&["n0", "v0", "v1"]),
        one_utterance(&["v2", "n0"]),
        one_utterance(&["v0"]),
    ];
    let prepared = prepare_dialog(&utts, &[], &vocab);
    let mut tape = Tape::new();
    let enc = encode_dialog(&mut tape, &params, &w, &prepared);
    for alpha in &enc.utt_attention {
        let sum: f64 = tape.value_v(*alpha).sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }
    let sum: f64 = tape.value_v(enc.dlg_attention).sum();
    assert!((sum - 1.0).abs() < 1e-6);
}

#[test]
fn frozen_scorer_pools_to_arithmetic_mean() {
    // With all attention-scorer outputs equal (zeroed scorers), the pooled
    // vector is the mean of its inputs.
    let mut rng = seeded_rng(23);
    let ontology = tiny_ontology(1);
    let kb = KnowledgeBase::new("g", vec![Row::new(Entity::new("n0", "node"))]).unwrap();
    let vocab = vocab_for(&kb, &ontology);
    let mut params: ParamSet<f64> = ParamSet::new();
    let w = DialogEncoderWeights::new(
        &mut params,
        EncoderConfig { emb: 4, pos_dim: 2, markers: 0, pos_clip: 10 },
        &vocab,
        "enc",
        &mut rng,
    );
    for name in ["enc.utt_pool.w1", "enc.utt_pool.w2", "enc.dlg_pool.w1", "enc.dlg_pool.w2"] {
        let id = params.id_by_name(name).unwrap();
        match params.tensor_mut(id) {
            Tensor::M(m) => m.fill(0.0),
            Tensor::V(v) => v.fill(0.0),
        }
    }
    let prepared = prepare_dialog(&[one_utterance(&["n0", "v0", "v1", "v2"])], &[], &vocab);
    let mut tape = Tape::new();
    let enc = encode_dialog(&mut tape, &params, &w, &prepared);
    let mat = tape.value_m(enc.token_mats[0]).clone();
    let mean = mat.mean_axis(ndarray::Axis(0)).unwrap();
    let pooled = tape.value_v(enc.utt_feats[0]);
    let err = (pooled - &mean).iter().fold(0.0f64, |m, x| m.max(x.abs()));
    assert!(err < 1e-9, "err {err}");
}

#[test]
fn deterministic_init_and_forward() {
    let ontology = tiny_ontology(1);
    let kb = KnowledgeBase::new("g", vec![Row::new(Entity::new("n0", "node"))]).unwrap();
    let vocab = vocab_for(&kb, &ontology);
    let build = || {
        let mut rng = seeded_rng(77);
        let mut params: ParamSet<f64> = ParamSet::new();
        let w = DialogEncoderWeights::new(
            &mut params,
            EncoderConfig { emb: 8, pos_dim: 4, markers: 0, pos_clip: 10 },
            &vocab,
            "enc",
            &mut rng,
        );
        let prepared = prepare_dialog(&[one_utterance(&["n0", "v0"])], &[], &vocab);
        let mut tape = Tape::new();
        let enc = encode_dialog(&mut tape, &params, &w, &prepared);
        (params.flatten_f64(), tape.value_v(enc.c).to_vec())
    };
    let (p1, c1) = build();
    let (p2, c2) = build();
    assert_eq!(p1, p2);
    assert_eq!(c1, c2);
}

#[test]
fn output_widths_independent_of_input_lengths() {
    let mut rng = seeded_rng(31);
    let ontology = tiny_ontology(1);
    let kb = KnowledgeBase::new("g", vec![Row::new(Entity::new("n0", "node"))]).unwrap();
    let vocab = vocab_for(&kb, &ontology);
    let mut params: ParamSet<f64> = ParamSet::new();
    let w = DialogEncoderWeights::new(
        &mut params,
        EncoderConfig { emb: 8, pos_dim: 4, markers: 0, pos_clip: 10 },
        &vocab,
        "enc",
        &mut rng,
    );
    for utts in [
        vec![one_utterance(&["n0"])],
        vec![one_utterance(&["n0", "v0", "v1"]), one_utterance(&["v2"])],
    ] {
        let prepared = prepare_dialog(&utts, &[], &vocab);
        let mut tape = Tape::new();
        let enc = encode_dialog(&mut tape, &params, &w, &prepared);
        assert_eq!(tape.value_v(enc.c).len(), 8);
        for f in &enc.utt_feats {
            assert_eq!(tape.value_v(*f).len(), 8);
        }
    }
}

/// Gradient checks per block: a scalar loss over each block's output, all
/// parameter components vs. central differences at step 1e-4, relative
/// error within 1e-3.
#[test]
fn gradient_checks_per_block() {
    struct Harness {
        params: ParamSet<f64>,
        enc: DialogEncoderWeights,
        kb_w: KbEncoderWeights,
        mem_w: MemNetWeights,
        vocab: Vocab,
        ontology: Ontology,
        kb: KnowledgeBase,
    }
    let mut rng = seeded_rng(41);
    let ontology = tiny_ontology(2);
    let (_, kb) = random_graph_kb(&mut seeded_rng(4242));
    let vocab = vocab_for(&kb, &ontology);
    let mut params: ParamSet<f64> = ParamSet::new();
    let enc = DialogEncoderWeights::new(
        &mut params,
        EncoderConfig { emb: 8, pos_dim: 4, markers: 1, pos_clip: 10 },
        &vocab,
        "enc",
        &mut rng,
    );
    let kb_w = KbEncoderWeights::new(&mut params, 8, 1, 2, 0.5, "kb", &mut rng);
    let mem_w = MemNetWeights::new(&mut params, 8, 2, 6, "mem", &mut rng);
    let mut h = Harness {
        params,
        enc,
        kb_w,
        mem_w,
        vocab,
        ontology,
        kb,
    };

    // Loss: encode a dialog with one marked entity, encode the KB, read the
    // memory with c, and take a smooth pooling of everything.
    let target = Entity::new("v0", "val");
    let utt = Utterance::new(
        Speaker::User,
        vec!["n0".into(), "v0".into(), "v1".into()],
        vec![
            Mention { start: 0, end: 1, entity: Entity::new("n0", "node") },
            Mention { start: 1, end: 2, entity: target.clone() },
        ],
    );
    let utt2 = Utterance::new(Speaker::Agent, vec!["v2".into(), "v0".into()], vec![]);
    let utterances = vec![utt, utt2];

    let loss_of = |h: &Harness| -> f64 {
        let prepared = prepare_dialog(&utterances, &[&target], &h.vocab);
        let graph = KbGraph::build(&h.kb, &h.ontology);
        let mut tape = Tape::new();
        let encd = encode_dialog(&mut tape, &h.params, &h.enc, &prepared);
        let z0 = entity_embeddings(
            &mut tape,
            &h.params,
            h.enc.tok_emb,
            h.enc.tag_emb,
            &graph,
            &h.vocab,
        )
        .unwrap();
        let z = encode_kb(&mut tape, &h.params, &h.kb_w, &graph, z0);
        let read = memory_read(&mut tape, &h.params, &h.mem_w, z, encd.c);
        // tanh keeps the loss smooth and bounded.
        let t = tape.tanh(read.q);
        let weights: Vec<usize> = (0..8).collect();
        let s = tape.pick_sum(t, weights);
        tape.scalar(s)
    };

    // Analytic gradients.
    let mut grads = Grads::new(&h.params);
    {
        let prepared = prepare_dialog(&utterances, &[&target], &h.vocab);
        let graph = KbGraph::build(&h.kb, &h.ontology);
        let mut tape = Tape::new();
        let encd = encode_dialog(&mut tape, &h.params, &h.enc, &prepared);
        let z0 = entity_embeddings(
            &mut tape,
            &h.params,
            h.enc.tok_emb,
            h.enc.tag_emb,
            &graph,
            &h.vocab,
        )
        .unwrap();
        let z = encode_kb(&mut tape, &h.params, &h.kb_w, &graph, z0);
        let read = memory_read(&mut tape, &h.params, &h.mem_w, z, encd.c);
        let t = tape.tanh(read.q);
        let s = tape.pick_sum(t, (0..8).collect());
        tape.backward(s, &h.params, &mut grads, 1.0);
    }
    let report = gradient_check(&mut h, |h| &mut h.params, &grads, loss_of, 1e-4);
    println!(
        "blocks gradient check: {} components, max rel err {:.3e}",
        report.checked, report.max_rel_err
    );
    assert!(report.max_rel_err < 1e-3, "max rel err {}", report.max_rel_err);
}

#[test]
fn blocks_run_under_f32_too() {
    // The numeric core is generic over the scalar; exercise the f32 path.
    let mut rng = seeded_rng(53);
    let ontology = tiny_ontology(1);
    let kb = KnowledgeBase::new("g", vec![Row::new(Entity::new("n0", "node"))]).unwrap();
    let vocab = vocab_for(&kb, &ontology);
    let mut params: ParamSet<f32> = ParamSet::new();
    let w = DialogEncoderWeights::new(
        &mut params,
        EncoderConfig { emb: 8, pos_dim: 4, markers: 0, pos_clip: 10 },
        &vocab,
        "enc",
        &mut rng,
    );
    let prepared = prepare_dialog(&[one_utterance(&["n0", "v0"])], &[], &vocab);
    let mut tape: Tape<f32> = Tape::new();
    let enc = encode_dialog(&mut tape, &params, &w, &prepared);
    let sum: f32 = tape.value_v(enc.dlg_attention).sum();
    assert!((sum - 1.0).abs() < 1e-5);
    assert!(tape.value_v(enc.c).iter().all(|x| x.is_finite()));
}
