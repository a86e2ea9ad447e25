//! Property tests for the core data model.

use kbarb_core::data::*;
use proptest::prelude::*;

fn arb_entity(etype: &'static str, pool: &'static [&'static str]) -> impl Strategy<Value = Entity> {
    (0..pool.len()).prop_map(move |i| Entity::new(pool[i], etype))
}

prop_compose! {
    fn arb_row(head_idx: usize)(
        cuisine in proptest::option::of(arb_entity("cuisine", &["thai", "french", "indian"])),
        area in proptest::option::of(arb_entity("area", &["north", "south", "east", "west"])),
        rating in proptest::option::of(arb_entity("rating", &["1", "2", "3"])),
    ) -> Row {
        let mut row = Row::new(Entity::new(format!("head{head_idx}"), "restaurant"));
        if let Some(c) = cuisine { row.fields.insert("cuisine".into(), c); }
        if let Some(a) = area { row.fields.insert("area".into(), a); }
        if let Some(r) = rating { row.fields.insert("rating".into(), r); }
        row
    }
}

fn arb_kb() -> impl Strategy<Value = KnowledgeBase> {
    (1usize..8)
        .prop_flat_map(|n| {
            (0..n)
                .map(arb_row)
                .collect::<Vec<_>>()
        })
        .prop_map(|rows| {
            // Keep rows with at least one field so the triple view is
            // lossless, matching the round-trip contract.
            let rows: Vec<Row> = rows.into_iter().filter(|r| !r.fields.is_empty()).collect();
            KnowledgeBase::new("prop", rows).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    /// Round-trip identity on 50 random small KBs.
    #[test]
    fn triples_to_rows_inverts_kb_to_triples(kb in arb_kb()) {
        let triples = kb_to_triples(&kb);
        let back = triples_to_rows("prop", &triples).unwrap();
        prop_assert_eq!(kb.rows, back.rows);
    }

    /// Triple count equals the sum of the field maps' sizes.
    #[test]
    fn triple_count_is_total_field_count(kb in arb_kb()) {
        let want: usize = kb.rows.iter().map(|r| r.fields.len()).sum();
        prop_assert_eq!(kb_to_triples(&kb).len(), want);
    }
}

#[test]
fn mention_surface_validation_catches_mismatch() {
    let utt = Utterance::new(
        Speaker::User,
        vec!["want".into(), "thai".into()],
        vec![Mention {
            start: 1,
            end: 2,
            entity: Entity::new("french", "cuisine"),
        }],
    );
    let d = Dialog {
        id: "d".into(),
        timestamp: 0,
        utterances: vec![utt],
    };
    assert!(d.validate().is_err());
}

#[test]
fn alternation_validation() {
    let mk = |speaker| Utterance::new(speaker, vec!["x".into()], vec![]);
    let good = Dialog {
        id: "g".into(),
        timestamp: 0,
        utterances: vec![mk(Speaker::User), mk(Speaker::Agent)],
    };
    assert!(good.validate().is_ok());
    let bad = Dialog {
        id: "b".into(),
        timestamp: 0,
        utterances: vec![mk(Speaker::Agent), mk(Speaker::User)],
    };
    assert!(bad.validate().is_err());
}

#[test]
fn overlapping_mentions_rejected() {
    let utt = Utterance::new(
        Speaker::User,
        vec!["a".into(), "b".into()],
        vec![
            Mention { start: 0, end: 2, entity: Entity::new("a_b", "x") },
            Mention { start: 1, end: 2, entity: Entity::new("b", "x") },
        ],
    );
    let d = Dialog { id: "d".into(), timestamp: 0, utterances: vec![utt] };
    assert!(d.validate().is_err());
}
