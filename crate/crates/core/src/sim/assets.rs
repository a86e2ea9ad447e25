//! Built-in assets: the restaurant ontology, a grouped base KB, the surface
//! templates, and the synthetic check-in profile. The files under `assets/`
//! are generated by these builders; a regression test keeps them in sync.

use super::availability::CheckinProfile;
use super::templates::{FlowProbs, TemplateSet};
use crate::data::{Entity, KnowledgeBase, Ontology, RelationType, Row};
use crate::nn::params::seeded_rng;
use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::BTreeMap;

const CUISINES: &[&str] = &["british", "french", "indian", "italian", "spanish", "thai"];
const LOCATIONS: &[&str] = &["bombay", "london", "madrid", "paris", "rome"];
const PRICES: &[&str] = &["cheap", "moderate", "expensive"];
const NUMBERS: &[&str] = &["two", "four", "six", "eight"];
pub const RATING_SCALE: std::ops::RangeInclusive<i64> = 1..=8;

/// Builds the default ontology together with its base KB so the entity
/// vocabulary is guaranteed to cover every KB value.
pub fn default_domain(groups: usize, rows_per_group: usize, seed: u64) -> (Ontology, KnowledgeBase) {
    let rng = &mut seeded_rng(seed);

    let mut combos: Vec<(&str, &str)> = Vec::new();
    for &c in CUISINES {
        for &l in LOCATIONS {
            combos.push((c, l));
        }
    }
    combos.shuffle(rng);
    combos.truncate(groups);

    let ratings: Vec<String> = RATING_SCALE.map(|i| i.to_string()).collect();
    let mut rows = Vec::new();
    for (g, (cuisine, location)) in combos.iter().enumerate() {
        let price = PRICES[rng.gen_range(0..PRICES.len())];
        let number = NUMBERS[rng.gen_range(0..NUMBERS.len())];
        let mut group_ratings: Vec<&String> = ratings.iter().collect();
        group_ratings.shuffle(rng);
        group_ratings.truncate(rows_per_group);
        for (k, rating) in group_ratings.iter().enumerate() {
            let name = format!("resto_{location}_{price}_{cuisine}_g{g}n{k}");
            let row = Row::new(Entity::new(&name, "restaurant"))
                .with_field("cuisine", Entity::new(*cuisine, "cuisine"))
                .with_field("location", Entity::new(*location, "location"))
                .with_field("price", Entity::new(price, "price"))
                .with_field("number", Entity::new(number, "number"))
                .with_field("rating", Entity::new(rating.as_str(), "rating"))
                .with_field("phone", Entity::new(format!("{name}_phone"), "phone"))
                .with_field("address", Entity::new(format!("{name}_address"), "address"));
            rows.push(row);
        }
    }
    let kb = KnowledgeBase::new("kb_base", rows).expect("generated heads are unique");

    // Entity vocabulary: every value appearing in the KB plus the full
    // rating scale (the completion stage's target set).
    let mut entities: BTreeMap<Entity, ()> = BTreeMap::new();
    for row in &kb.rows {
        for e in row.entities() {
            entities.insert(e.clone(), ());
        }
    }
    for r in &ratings {
        entities.insert(Entity::new(r.as_str(), "rating"), ());
    }

    let ontology = Ontology {
        entity_types: vec![
            "restaurant".into(),
            "cuisine".into(),
            "location".into(),
            "price".into(),
            "number".into(),
            "rating".into(),
            "phone".into(),
            "address".into(),
        ],
        relation_types: vec![
            rel("cuisine", "cuisine", false),
            rel("location", "location", false),
            rel("price", "price", false),
            rel("number", "number", false),
            rel("rating", "rating", true),
            rel("phone", "phone", false),
            rel("address", "address", false),
        ],
        entities: entities.into_keys().collect(),
    };
    (ontology, kb)
}

fn rel(name: &str, tail: &str, latent: bool) -> RelationType {
    RelationType {
        name: name.into(),
        head_type: "restaurant".into(),
        tail_type: tail.into(),
        latent,
    }
}

/// Meal-peaked 7×24 check-in intensities. Weekends run hotter.
pub fn default_checkin_profile() -> CheckinProfile {
    let mut intensity = Vec::with_capacity(7);
    for dow in 0..7 {
        let weekend = dow >= 5;
        let bump = if weekend { 1.15 } else { 1.0 };
        let mut day = Vec::with_capacity(24);
        for hour in 0..24 {
            let base = match hour {
                0..=5 => 2.0,
                6 => 6.0,
                7..=9 => 30.0,
                10..=11 => 9.0,
                12..=14 => 48.0,
                15..=17 => 11.0,
                18..=21 => 62.0,
                _ => 14.0,
            };
            day.push(base * bump);
        }
        intensity.push(day);
    }
    CheckinProfile { intensity }
}

pub fn default_templates() -> TemplateSet {
    let v = |items: &[&str]| items.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let map = |pairs: &[(&str, &[&str])]| {
        pairs
            .iter()
            .map(|(k, items)| (k.to_string(), v(items)))
            .collect::<BTreeMap<_, _>>()
    };
    TemplateSet {
        user_greeting: v(&["hi", "hello", "good morning"]),
        agent_greeting: v(&["hello what can i help you with today"]),
        user_request: v(&["can you book a table", "i would like to book a table", "may i have a table"]),
        slot_phrases: map(&[
            ("cuisine", &["with {v} food", "serving {v} cuisine"]),
            ("location", &["in {v}"]),
            ("number", &["for {v} people", "for {v}"]),
            ("price", &["in a {v} price range", "at a {v} price"]),
        ]),
        agent_slot_question: map(&[
            ("cuisine", &["any preference on a type of cuisine"]),
            ("location", &["where should it be"]),
            ("number", &["how many people would be in your party"]),
            ("price", &["which price range are looking for"]),
        ]),
        user_slot_answer: map(&[
            ("cuisine", &["with {v} food", "i love {v} food"]),
            ("location", &["in {v}"]),
            ("number", &["we will be {v}", "for {v} please"]),
            ("price", &["i am looking for a {v} restaurant", "in a {v} price range"]),
        ]),
        agent_on_it: v(&["i'm on it"]),
        agent_search: v(&["ok let me look into some options for you"]),
        user_update: v(&["instead could it be {phrase}", "actually i would prefer {phrase}"]),
        agent_update_ack: v(&["sure is there anything else to update"]),
        user_no_update: v(&["no"]),
        user_silence: v(&["<silence>"]),
        agent_suggest: v(&["what do you think of this option: {r}"]),
        user_reject: v(&["no this does not work for me", "do you have something else", "no i don't like that"]),
        agent_next_option: v(&["sure let me find an other option for you"]),
        user_accept: v(&["let's do it", "it's perfect"]),
        agent_reserve: v(&["great let me do the reservation"]),
        user_ask_phone: v(&["what is the phone number of the restaurant", "do you have its phone number"]),
        agent_give_phone: v(&["here it is {v}"]),
        user_ask_address: v(&["do you have its address", "what is the address"]),
        agent_give_address: v(&["here it is {v}"]),
        user_thanks: v(&["thank you", "thanks"]),
        agent_anything_else: v(&["is there anything i can help you with"]),
        user_bye: v(&["no thanks", "no thank you"]),
        agent_bye: v(&["you're welcome"]),
        probs: FlowProbs {
            slot_in_opener: 0.55,
            update: 0.3,
            suggestion_weights: vec![0.45, 0.35, 0.2],
            ask_phone: 0.55,
            ask_address: 0.55,
        },
    }
}
