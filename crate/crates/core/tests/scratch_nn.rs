use kbarb_core::data::*;
use kbarb_core::models::*;
use kbarb_core::nn::*;
use kbarb_core::sim::assets;
use kbarb_core::sim::*;
use std::collections::BTreeMap;

fn toy_corpus(n: usize) -> (Ontology, KnowledgeBase, Corpus) {
    let (ontology, base_kb) = assets::default_domain(4, 3, 0xCAFE);
    let templates = assets::default_templates();
    let mut processes = BTreeMap::new();
    processes.insert("restaurant".into(), AvailabilityProcess {
        kind: ProcessKind::AlwaysOn, maintenance_prob: 0.0, closure_prob: 0.0,
    });
    let inputs = SimInputs {
        ontology: ontology.clone(), base_kb: base_kb.clone(), templates,
        processes, train_n: n, test_n: 0, horizon: 4, seed: 3,
        ordering_key: OrderingKey::default(), config_hash: "t".into(),
    };
    let out = simulate(&inputs).unwrap();
    (ontology, out.train_kb, out.train)
}

#[test]
fn mem_gradient_check_width8() {
    let (ontology, kb, corpus) = toy_corpus(2);
    let vocab = Vocab::build(&ontology, &[&corpus]);
    let dims = ModelDims { emb: 8, pos_dim: 4, pos_clip: 10, rgcn_layers: 1, rgcn_init_scale: 0.5, hops: 2, mlp_hidden: 6 };
    let mut model: MemModel<f64> = MemModel::new(dims, vocab, ontology.relation_types.len(), 42);
    let small = KnowledgeBase::new("s", kb.rows[..3].to_vec()).unwrap();
    let rec = &corpus.records[0];
    let inst = mask_instances(&rec.dialog).into_iter().next().unwrap();
    let prepared = model.prepare_instance(&inst);
    let graph = KbGraph::build(&small, &ontology);

    let mut grads = Grads::new(&model.params);
    {
        let mut tape = Tape::new();
        let z = model.encode_kb_graph(&mut tape, &graph).unwrap();
        let fwd = model.instance_forward(&mut tape, &graph, z, &prepared);
        let logp = tape.ln(fwd.floored);
        let loss = tape.scale_const(logp, -1.0);
        tape.backward(loss, &model.params, &mut grads, 1.0);
    }
    let t0 = std::time::Instant::now();
    let report = gradient_check(&mut model, |m| &mut m.params, &grads, |m| {
        let mut tape = Tape::new();
        let z = m.encode_kb_graph(&mut tape, &graph).unwrap();
        let fwd = m.instance_forward(&mut tape, &graph, z, &prepared);
        -tape.scalar(fwd.floored).ln()
    }, 1e-4);
    println!("checked={} max_rel_err={:.3e} in {:?}", report.checked, report.max_rel_err, t0.elapsed());
    assert!(report.max_rel_err < 1e-3, "max rel err {}", report.max_rel_err);
}

#[test]
fn mem_overfit_small_corpus() {
    let (ontology, kb, corpus) = toy_corpus(5);
    let vocab = Vocab::build(&ontology, &[&corpus]);
    let dims = ModelDims { emb: 32, pos_dim: 8, pos_clip: 10, rgcn_layers: 2, rgcn_init_scale: 0.25, hops: 2, mlp_hidden: 16 };
    let mut model: MemModel<f64> = MemModel::new(dims, vocab, ontology.relation_types.len(), 42);
    let pairs: Vec<(&Dialog, &KnowledgeBase)> = corpus.records.iter().map(|r| (&r.dialog, &kb)).collect();
    let records = prepare_mem_training(&model, &pairs, &ontology);
    let n_inst: usize = records.iter().map(|r| r.instances.len()).sum();
    println!("instances: {n_inst}");
    let t0 = std::time::Instant::now();
    let curve = train_mem(&mut model, &records, &TrainCfg { epochs: 200, lr: 2e-3, batch: 8, seed: 1 }).unwrap();
    println!("train time: {:?} - first {:?} last {:?}", t0.elapsed(), curve.first(), curve.last());
    let mean_nll = curve.last().unwrap().1;
    assert!(mean_nll <= 0.9f64.ln().abs(), "mean nll {mean_nll}");
}
