use kbarb_core::cascade::*;
use kbarb_core::data::*;
use kbarb_core::sim::assets;
use kbarb_core::sim::*;
use std::collections::BTreeMap;

#[test]
fn debug_rule_failures() {
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
    let rule_traces = rule_arbitrate(&out.train.records, &out.train_kb, &ontology, &key).unwrap();
    for (rec, tr) in out.train.records.iter().zip(rule_traces.iter()) {
        let gold = &out.gold[rec.gold_kb_id.as_ref().unwrap().as_str()];
        if consistency_judge(&rec.dialog, &tr.result_kb, gold, &ontology, &key) { continue; }
        println!("=== FAIL {} ===", rec.dialog.id);
        let mentions = rec.dialog.mention_values();
        for g in &gold.rows {
            if !mentions.contains(g.head.value.as_str()) { continue; }
            match tr.result_kb.row(&g.head) {
                None => println!("  missing mentioned row {}", g.head.value),
                Some(k) => {
                    for (rel, tail) in &k.fields {
                        if ontology.relation(rel).map(|r| r.latent).unwrap_or(false) { continue; }
                        if g.fields.get(rel) != Some(tail) {
                            println!("  row {} field {rel}: kb={} gold={:?}", g.head.value, tail.value, g.fields.get(rel).map(|e| &e.value));
                        }
                    }
                    for (rel, tail) in &g.fields {
                        if ontology.relation(rel).map(|r| r.latent).unwrap_or(false) { continue; }
                        if mentions.contains(tail.value.as_str()) && !k.fields.contains_key(rel) {
                            println!("  row {} missing evidenced field {rel}={}", g.head.value, tail.value);
                        }
                    }
                }
            }
        }
        let constraints = user_constraints(&rec.dialog, &ontology);
        let recs = recommended_heads(&rec.dialog, &ontology);
        println!("  constraints={constraints:?} recs={recs:?}");
        for u in &rec.dialog.utterances { println!("    {:?}: {}", u.speaker, u.text()); }
    }
}
