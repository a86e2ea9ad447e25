use kbarb_core::data::*;
use kbarb_core::models::*;
use kbarb_core::sim::assets;
use kbarb_core::sim::*;
use kbarb_core::supervision::*;
use kbarb_core::nn::Vocab;
use std::collections::BTreeMap;

fn desk(n: usize) -> (Ontology, KnowledgeBase, Corpus) {
    let (ontology, base_kb) = assets::default_domain(15, 4, 0xCAFE);
    let templates = assets::default_templates();
    let mut processes = BTreeMap::new();
    processes.insert("restaurant".into(), AvailabilityProcess {
        kind: ProcessKind::CheckinWeighted { profile: assets::default_checkin_profile(), scale: 1.0 },
        maintenance_prob: 0.05, closure_prob: 1e-5,
    });
    let inputs = SimInputs {
        ontology: ontology.clone(), base_kb: base_kb.clone(), templates,
        processes, train_n: n, test_n: 0, horizon: 720, seed: 7,
        ordering_key: OrderingKey::default(), config_hash: "t".into(),
    };
    let out = simulate(&inputs).unwrap();
    (ontology, out.train_kb, out.train)
}

#[test]
fn probe_ri_cost() {
    let (ontology, kb, corpus) = desk(40);
    let vocab = Vocab::build(&ontology, &[&corpus]);
    let ds = build_ri_dataset(&corpus, &kb, &ontology);
    let n_train = ds.train_set().count();
    let n_infer = ds.infer_set().count();
    println!("40 dialogs: {} train examples, {} infer", n_train, n_infer);
    let dims = ModelDims { emb: 32, pos_dim: 8, pos_clip: 10, rgcn_layers: 2, rgcn_init_scale: 0.25, hops: 2, mlp_hidden: 16 };
    let relations: Vec<String> = ontology.relation_types.iter().map(|r| r.name.clone()).collect();
    let mut model: RiModel<f64> = RiModel::new(dims, vocab, relations, 42);
    let labeled: Vec<_> = ds.labeled.clone();
    let examples = prepare_ri_examples(&model, &corpus, &labeled).unwrap();
    let t0 = std::time::Instant::now();
    let stats = train_ri(&mut model, &examples, &TrainCfg { epochs: 2, lr: 1e-3, batch: 32, seed: 1 }, 0.1).unwrap();
    let dt = t0.elapsed();
    println!("2 epochs on {} examples: {:?} => per-example fwd+bwd {:?}", examples.len(), dt, dt / (2 * examples.len() as u32));
    for s in &stats { println!("  epoch {} loss {:.4} train_acc {:.3} val_acc {:.3}", s.epoch, s.loss, s.train_acc, s.val_acc); }
}
