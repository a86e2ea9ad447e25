use kbarb_core::data::*;
use kbarb_core::models::*;
use kbarb_core::nn::*;
use kbarb_core::sim::assets;
use kbarb_core::sim::*;
use std::collections::BTreeMap;

#[test]
fn profile_sections() {
    let (ontology, base_kb) = assets::default_domain(15, 4, 0xCAFE);
    let templates = assets::default_templates();
    let mut processes = BTreeMap::new();
    processes.insert("restaurant".into(), AvailabilityProcess {
        kind: ProcessKind::CheckinWeighted { profile: assets::default_checkin_profile(), scale: 1.0 },
        maintenance_prob: 0.05, closure_prob: 1e-5,
    });
    let inputs = SimInputs {
        ontology: ontology.clone(), base_kb: base_kb.clone(), templates,
        processes, train_n: 10, test_n: 0, horizon: 720, seed: 7,
        ordering_key: OrderingKey::default(), config_hash: "t".into(),
    };
    let out = simulate(&inputs).unwrap();
    let vocab = Vocab::build(&ontology, &[&out.train]);
    let dims = ModelDims { emb: 32, pos_dim: 8, pos_clip: 10, rgcn_layers: 2, rgcn_init_scale: 0.25, hops: 3, mlp_hidden: 16 };
    let model: MemModel<f64> = MemModel::new(dims, vocab, ontology.relation_types.len(), 42);
    let pairs: Vec<(&Dialog, &KnowledgeBase)> = out.train.records.iter().map(|r| (&r.dialog, &out.train_kb)).collect();
    let records = prepare_mem_training(&model, &pairs, &ontology);

    // forward only (shared tape per dialog)
    let t0 = std::time::Instant::now();
    let mut n_nodes = 0usize;
    let mut n_inst = 0usize;
    for rec in &records {
        let mut tape = Tape::new();
        let z = model.encode_kb_graph(&mut tape, &rec.graph).unwrap();
        for inst in &rec.instances {
            let fwd = model.instance_forward(&mut tape, &rec.graph, z, inst);
            let _ = tape.scalar(fwd.floored);
            n_inst += 1;
        }
        n_nodes += tape.len();
    }
    println!("forward: {:?} total for {} instances, avg nodes/dialog {}", t0.elapsed(), n_inst, n_nodes / records.len());

    // forward + per-instance backward (current scheme)
    let t0 = std::time::Instant::now();
    for rec in &records {
        let mut tape = Tape::new();
        let mut grads = Grads::new(&model.params);
        let z = model.encode_kb_graph(&mut tape, &rec.graph).unwrap();
        for inst in &rec.instances {
            let fwd = model.instance_forward(&mut tape, &rec.graph, z, inst);
            let logp = tape.ln(fwd.floored);
            let loss = tape.scale_const(logp, -1.0);
            tape.backward(loss, &model.params, &mut grads, 1.0);
        }
    }
    println!("fwd + per-instance backward: {:?}", t0.elapsed());

    // forward + single summed backward per dialog
    let t0 = std::time::Instant::now();
    for rec in &records {
        let mut tape = Tape::new();
        let mut grads = Grads::new(&model.params);
        let z = model.encode_kb_graph(&mut tape, &rec.graph).unwrap();
        let mut loss: Option<NodeId> = None;
        for inst in &rec.instances {
            let fwd = model.instance_forward(&mut tape, &rec.graph, z, inst);
            let logp = tape.ln(fwd.floored);
            let term = tape.scale_const(logp, -1.0);
            loss = Some(match loss { Some(acc) => tape.add(acc, term), None => term });
        }
        if let Some(l) = loss { tape.backward(l, &model.params, &mut grads, 1.0); }
    }
    println!("fwd + single backward/dialog: {:?}", t0.elapsed());
}
