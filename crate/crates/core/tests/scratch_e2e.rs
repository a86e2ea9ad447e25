use kbarb_core::cascade::*;
use kbarb_core::data::*;
use kbarb_core::models::*;
use kbarb_core::nn::Vocab;
use kbarb_core::sim::assets;
use kbarb_core::sim::*;
use kbarb_core::supervision::*;
use std::collections::BTreeMap;

#[test]
fn mini_pipeline() {
    let t_all = std::time::Instant::now();
    let (ontology, base_kb) = assets::default_domain(15, 4, 0xCAFE);
    let templates = assets::default_templates();
    let mut processes = BTreeMap::new();
    processes.insert("restaurant".into(), AvailabilityProcess {
        kind: ProcessKind::CheckinWeighted { profile: assets::default_checkin_profile(), scale: 1.0 },
        maintenance_prob: 0.05, closure_prob: 1e-5,
    });
    let inputs = SimInputs {
        ontology: ontology.clone(), base_kb: base_kb.clone(), templates,
        processes, train_n: 60, test_n: 0, horizon: 720, seed: 7,
        ordering_key: OrderingKey::default(), config_hash: "t".into(),
    };
    let out = simulate(&inputs).unwrap();
    let key = OrderingKey::default();
    println!("[{:?}] simulated: rate={:.3}", t_all.elapsed(), out.stats.inconsistency_rate);

    let vocab = Vocab::build(&ontology, &[&out.train]);
    let dims = ModelDims { emb: 32, pos_dim: 8, pos_clip: 10, rgcn_layers: 2, rgcn_init_scale: 0.25, hops: 3, mlp_hidden: 16 };

    // --- RI ---
    let ds = build_ri_dataset(&out.train, &out.train_kb, &ontology);
    let relations: Vec<String> = ontology.relation_types.iter().map(|r| r.name.clone()).collect();
    let mut ri: RiModel<f64> = RiModel::new(dims.clone(), vocab.clone(), relations, 42);
    let examples = prepare_ri_examples(&ri, &out.train, &ds.labeled).unwrap();
    let stats = train_ri(&mut ri, &examples, &TrainCfg { epochs: 10, lr: 1e-3, batch: 32, seed: 1 }, 0.1).unwrap();
    println!("[{:?}] RI: {} examples, last epoch train_acc={:.3} val_acc={:.3}",
             t_all.elapsed(), examples.len(), stats.last().unwrap().train_acc, stats.last().unwrap().val_acc);

    // --- apply RI ---
    let infer = infer_by_dialog(&ds);
    let ri_models = StageModels { ri: Some((&ri, 0.5)), rd: None, rc: None };
    let ri_traces = arbitrate(&out.train.records, &out.train_kb, &infer, &ri_models, &[Stage::Ri], &ontology).unwrap();
    let n_ins: usize = ri_traces.iter().map(|t| t.inserted_heads().len()).sum();
    // RI quality vs truth
    let rif1 = kbarb_core::metrics::ri_f1(&ri_traces, &out.stats).unwrap();
    println!("[{:?}] RI applied: {} rows inserted, RI F1 = {:.3}", t_all.elapsed(), n_ins, rif1);

    // --- MEM on {d, K^ri} ---
    let kbs: Vec<KnowledgeBase> = ri_traces.iter().map(|t| t.result_kb.clone()).collect();
    let mut mem: MemModel<f64> = MemModel::new(dims.clone(), vocab.clone(), ontology.relation_types.len(), 43);
    let pairs: Vec<(&Dialog, &KnowledgeBase)> = out.train.records.iter().zip(kbs.iter()).map(|(r, k)| (&r.dialog, k)).collect();
    let mem_records = prepare_mem_training(&mem, &pairs, &ontology);
    let curve = train_mem(&mut mem, &mem_records, &TrainCfg { epochs: 30, lr: 2e-3, batch: 32, seed: 2 }).unwrap();
    println!("[{:?}] MEM: loss {:.3} -> {:.3}", t_all.elapsed(), curve.first().unwrap().1, curve.last().unwrap().1);

    // --- RD rewards: check signs against ground truth ---
    let mut rd: RdModel<f64> = RdModel::new(dims.clone(), vocab.clone(), ontology.relation_types.len(), 44);
    let t0 = std::time::Instant::now();
    let rd_records = prepare_rd_records(&rd, &mem, &pairs, &ontology).unwrap();
    println!("[{:?}] RD rewards in {:?} ({} states)", t_all.elapsed(), t0.elapsed(),
             rd_records.iter().map(|r| r.states.len()).sum::<usize>());
    // Analyze reward quality: for rows in D_g that "dominate", deletion should be +1
    let mut dom_del_pos = 0usize; let mut dom_total = 0usize;
    let mut ment_del_neg = 0usize; let mut ment_total = 0usize;
    let mut neutral_del_pos = 0usize; let mut neutral_total = 0usize;
    for (rec, rdrec) in out.train.records.iter().zip(rd_records.iter()) {
        let truth = out.stats.truth_for(&rec.dialog.id).unwrap();
        let mentions = rec.dialog.mention_values();
        let del_set: std::collections::BTreeSet<&str> = truth.delete_rows.iter().map(|s| s.as_str()).collect();
        for (row, st) in rdrec.kb.rows.iter().zip(rdrec.states.iter()) {
            let r_del = st.rewards[0];
            if mentions.contains(row.head.value.as_str()) {
                ment_total += 1;
                if r_del < 0.0 { ment_del_neg += 1; }
            } else if del_set.contains(row.head.value.as_str()) {
                dom_total += 1;
                if r_del > 0.0 { dom_del_pos += 1; }
            } else {
                neutral_total += 1;
                if r_del > 0.0 { neutral_del_pos += 1; }
            }
        }
    }
    println!("  mentioned rows: delete reward negative {}/{}", ment_del_neg, ment_total);
    println!("  gold-absent rows: delete reward positive {}/{}", dom_del_pos, dom_total);
    println!("  other rows: delete reward positive {}/{}", neutral_del_pos, neutral_total);

    // --- train RD ---
    let t0 = std::time::Instant::now();
    let rd_curve = train_rd(&mut rd, &rd_records, &TrainCfg { epochs: 40, lr: 1e-3, batch: 64, seed: 3 }, 0.1).unwrap();
    println!("[{:?}] RD train {:?}: reward {:.3} -> {:.3}", t_all.elapsed(), t0.elapsed(),
             rd_curve.first().unwrap().1, rd_curve.last().unwrap().1);

    // --- apply RD ---
    let md = StageModels { ri: Some((&ri, 0.5)), rd: Some(&rd), rc: None };
    let rd_traces = arbitrate(&out.train.records, &out.train_kb, &infer, &md, &[Stage::Ri, Stage::Rd], &ontology).unwrap();
    let n_del: usize = rd_traces.iter().map(|t| t.deleted.len()).sum();
    println!("  learned deletions total: {} (avg {:.2}/dialog)", n_del, n_del as f64 / 60.0);

    // --- RC ---
    let kbs_rd: Vec<KnowledgeBase> = rd_traces.iter().map(|t| t.result_kb.clone()).collect();
    let pairs_rd: Vec<(&Dialog, &KnowledgeBase)> = out.train.records.iter().zip(kbs_rd.iter()).map(|(r, k)| (&r.dialog, k)).collect();
    let specs = rc_relation_specs(&ontology);
    let states = build_rc_states(&pairs_rd, &specs, &ontology);
    let dialogs: Vec<&Dialog> = out.train.records.iter().map(|r| &r.dialog).collect();
    let t0 = std::time::Instant::now();
    let mut rc: RcModel<f64> = RcModel::new(dims.clone(), vocab.clone(), specs.clone(), ontology.relation_types.len(), 45);
    let train_states = prepare_rc_states(&mem, &dialogs, states, &specs, &ontology).unwrap();
    println!("[{:?}] RC rewards in {:?} ({} states)", t_all.elapsed(), t0.elapsed(), train_states.len());
    let t0 = std::time::Instant::now();
    let rc_curve = train_rc(&mut rc, &dialogs, &train_states, &ontology, &TrainCfg { epochs: 40, lr: 1e-3, batch: 32, seed: 4 }, 0.1).unwrap();
    println!("[{:?}] RC train {:?}: reward {:.3} -> {:.3}", t_all.elapsed(), t0.elapsed(),
             rc_curve.first().unwrap().1, rc_curve.last().unwrap().1);

    // --- full cascade + judge ---
    let all = StageModels { ri: Some((&ri, 0.5)), rd: Some(&rd), rc: Some(&rc) };
    let traces = arbitrate(&out.train.records, &out.train_kb, &infer, &all, &[Stage::Ri, Stage::Rd, Stage::Rc], &ontology).unwrap();
    let mut bad = 0usize;
    for (rec, tr) in out.train.records.iter().zip(traces.iter()) {
        let gold = &out.gold[rec.gold_kb_id.as_ref().unwrap().as_str()];
        if !consistency_judge(&rec.dialog, &tr.result_kb, gold, &ontology, &key) { bad += 1; }
    }
    println!("[{:?}] post-cascade inconsistency: {}/{} = {:.3} (pre {:.3})",
             t_all.elapsed(), bad, 60, bad as f64 / 60.0, out.stats.inconsistency_rate);
    let rc_acc = kbarb_core::metrics::rc_accuracy(&traces, &out.train, &ontology, &key).unwrap();
    println!("  rc_accuracy: {:?}", rc_acc);

    // --- rules ---
    let rule_traces = rule_arbitrate(&out.train.records, &out.train_kb, &ontology, &key).unwrap();
    let mut rule_bad = 0usize;
    for (rec, tr) in out.train.records.iter().zip(rule_traces.iter()) {
        let gold = &out.gold[rec.gold_kb_id.as_ref().unwrap().as_str()];
        if !consistency_judge(&rec.dialog, &tr.result_kb, gold, &ontology, &key) { rule_bad += 1; }
    }
    let rule_del: usize = rule_traces.iter().map(|t| t.deleted.len()).sum();
    println!("[{:?}] rules: inconsistency {}/60, deletions {} (learned {})", t_all.elapsed(), rule_bad, rule_del, n_del);
}
