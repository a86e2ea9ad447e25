use kbarb_core::data::*;
use kbarb_core::sim::*;
use std::collections::BTreeMap;

fn run(train_n: usize, seed: u64) -> (f64, usize, usize) {
    let (ontology, base_kb) = assets::default_domain(15, 4, 0xCAFE);
    let templates = assets::default_templates();
    let mut processes = BTreeMap::new();
    processes.insert(
        "restaurant".to_string(),
        AvailabilityProcess {
            kind: ProcessKind::CheckinWeighted { profile: assets::default_checkin_profile(), scale: 1.0 },
            maintenance_prob: 0.05,
            closure_prob: 1e-5,
        },
    );
    let inputs = SimInputs {
        ontology: ontology.clone(), base_kb: base_kb.clone(), templates: templates.clone(),
        processes, train_n, test_n: 100, horizon: 720, seed,
        ordering_key: OrderingKey::default(), config_hash: "probe".into(),
    };
    let out = simulate(&inputs).unwrap();
    // invariant: grounded dialogs consistent with their own gold snapshot
    let mut self_bad = 0;
    for rec in out.train.records.iter().chain(out.test.records.iter()) {
        let gold = &out.gold[rec.gold_kb_id.as_ref().unwrap().as_str()];
        if !consistency_judge(&rec.dialog, gold, gold, &ontology, &OrderingKey::default()) { self_bad += 1; }
        rec.dialog.validate().unwrap();
    }
    // test split rate vs K_T
    let mut test_bad = 0;
    for rec in &out.test.records {
        let gold = &out.gold[rec.gold_kb_id.as_ref().unwrap().as_str()];
        if !consistency_judge(&rec.dialog, &out.train_kb, gold, &ontology, &OrderingKey::default()) { test_bad += 1; }
    }
    (out.stats.inconsistency_rate, self_bad, test_bad)
}

#[test]
fn probe_rates() {
    for (n, seed) in [(1000usize, 7u64), (200, 7), (200, 13), (1000, 99), (60, 7)] {
        let (rate, self_bad, test_bad) = run(n, seed);
        println!("train={n} seed={seed}: rate={rate:.3} self_inconsistent={self_bad} test_bad={test_bad}");
    }
}
