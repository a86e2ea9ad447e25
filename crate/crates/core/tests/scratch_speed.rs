use kbarb_core::data::*;
use kbarb_core::models::*;
use kbarb_core::sim::assets;
use kbarb_core::sim::*;
use kbarb_core::nn::Vocab;
use std::collections::BTreeMap;

#[test]
fn probe_mem_speed_fused() {
    let (ontology, base_kb) = assets::default_domain(15, 4, 0xCAFE);
    let templates = assets::default_templates();
    let mut processes = BTreeMap::new();
    processes.insert("restaurant".into(), AvailabilityProcess {
        kind: ProcessKind::CheckinWeighted { profile: assets::default_checkin_profile(), scale: 1.0 },
        maintenance_prob: 0.05, closure_prob: 1e-5,
    });
    let inputs = SimInputs {
        ontology: ontology.clone(), base_kb: base_kb.clone(), templates,
        processes, train_n: 40, test_n: 0, horizon: 720, seed: 7,
        ordering_key: OrderingKey::default(), config_hash: "t".into(),
    };
    let out = simulate(&inputs).unwrap();
    let vocab = Vocab::build(&ontology, &[&out.train]);
    let dims = ModelDims { emb: 32, pos_dim: 8, pos_clip: 10, rgcn_layers: 2, rgcn_init_scale: 0.25, hops: 3, mlp_hidden: 16 };
    let mut model: MemModel<f64> = MemModel::new(dims, vocab, ontology.relation_types.len(), 42);
    let pairs: Vec<(&Dialog, &KnowledgeBase)> = out.train.records.iter().map(|r| (&r.dialog, &out.train_kb)).collect();
    let records = prepare_mem_training(&model, &pairs, &ontology);
    let n_inst: usize = records.iter().map(|r| r.instances.len()).sum();
    let t0 = std::time::Instant::now();
    let curve = train_mem(&mut model, &records, &TrainCfg { epochs: 10, lr: 2e-3, batch: 32, seed: 1 }).unwrap();
    let dt = t0.elapsed();
    println!("40 dialogs ({} inst): 10 epochs in {:?} => {:?}/epoch; losses {:.3} -> {:.3}",
        n_inst, dt, dt / 10, curve.first().unwrap().1, curve.last().unwrap().1);
}
