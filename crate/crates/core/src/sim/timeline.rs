//! Evolving-KB timeline: per-tick row presence sampled from availability
//! processes, with day-long maintenance breaks and permanent closures.

use super::availability::AvailabilityProcess;
use crate::data::KnowledgeBase;
use crate::nn::params::seeded_rng;
use crate::{CoreError, Result};
use rand::Rng;
use std::collections::BTreeMap;

/// Presence of every base row at every tick. Snapshots are materialized on
/// demand; the last tick's snapshot is the training KB.
#[derive(Debug, Clone)]
pub struct KbTimeline {
    pub base_kb: KnowledgeBase,
    pub horizon: u64,
    pub rng_seed: u64,
    /// `presence[row][tick]`
    presence: Vec<Vec<bool>>,
}

impl KbTimeline {
    pub fn final_tick(&self) -> u64 {
        self.horizon - 1
    }

    pub fn row_present(&self, row_idx: usize, tick: u64) -> bool {
        self.presence[row_idx][tick as usize]
    }

    pub fn snapshot_id(tick: u64) -> String {
        format!("snap_{tick:06}")
    }

    pub fn snapshot(&self, tick: u64) -> KnowledgeBase {
        let rows = self
            .base_kb
            .rows
            .iter()
            .enumerate()
            .filter(|(i, _)| self.presence[*i][tick as usize])
            .map(|(_, r)| r.clone())
            .collect();
        KnowledgeBase::new(Self::snapshot_id(tick), rows)
            .expect("base KB rows stay unique in snapshots")
    }

    /// The last snapshot, i.e. the KB that gets paired with every training
    /// dialog.
    pub fn train_kb(&self) -> KnowledgeBase {
        self.snapshot(self.final_tick())
    }
}

/// Samples the timeline. Each row follows the process of its domain (the
/// head entity type): per-tick availability, a chance of a full-day
/// maintenance break rolled at each day boundary, and a per-tick chance of
/// permanent closure. Deterministic given the seed.
pub fn simulate_timeline(
    base_kb: &KnowledgeBase,
    processes: &BTreeMap<String, AvailabilityProcess>,
    horizon: u64,
    seed: u64,
) -> Result<KbTimeline> {
    if base_kb.is_empty() {
        return Err(CoreError::Simulation("base KB is empty".into()));
    }
    if horizon < 1 {
        return Err(CoreError::Simulation("horizon must be at least 1".into()));
    }
    for process in processes.values() {
        process.validate()?;
    }
    let mut rng = seeded_rng(seed);
    let mut presence = Vec::with_capacity(base_kb.rows.len());
    for row in &base_kb.rows {
        let process = processes.get(&row.head.etype).ok_or_else(|| {
            CoreError::Simulation(format!(
                "no availability process for domain `{}`",
                row.head.etype
            ))
        })?;
        let mut closed = false;
        let mut maintenance_until: u64 = 0;
        let mut ticks = Vec::with_capacity(horizon as usize);
        for tick in 0..horizon {
            if closed {
                ticks.push(false);
                continue;
            }
            if tick % 24 == 0 && rng.gen::<f64>() < process.maintenance_prob {
                maintenance_until = tick + 24;
            }
            if rng.gen::<f64>() < process.closure_prob {
                closed = true;
                ticks.push(false);
                continue;
            }
            let in_maintenance = tick < maintenance_until;
            let available = rng.gen::<f64>() < process.availability_prob(tick);
            ticks.push(!in_maintenance && available);
        }
        presence.push(ticks);
    }
    Ok(KbTimeline {
        base_kb: base_kb.clone(),
        horizon,
        rng_seed: seed,
        presence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Entity, Row};
    use crate::sim::availability::ProcessKind;

    fn tiny_kb(n: usize) -> KnowledgeBase {
        let rows = (0..n)
            .map(|i| {
                Row::new(Entity::new(format!("r{i}"), "restaurant"))
                    .with_field("cuisine", Entity::new("thai", "cuisine"))
            })
            .collect();
        KnowledgeBase::new("base", rows).unwrap()
    }

    fn procs(kind: ProcessKind, maintenance: f64, closure: f64) -> BTreeMap<String, AvailabilityProcess> {
        let mut m = BTreeMap::new();
        m.insert(
            "restaurant".to_string(),
            AvailabilityProcess {
                kind,
                maintenance_prob: maintenance,
                closure_prob: closure,
            },
        );
        m
    }

    #[test]
    fn always_on_keeps_every_snapshot_full() {
        let kb = tiny_kb(5);
        let tl = simulate_timeline(&kb, &procs(ProcessKind::AlwaysOn, 0.0, 0.0), 48, 7).unwrap();
        for tick in 0..48 {
            assert_eq!(tl.snapshot(tick).rows, kb.rows);
        }
    }

    #[test]
    fn bernoulli_p1_keeps_all_rows() {
        let kb = tiny_kb(4);
        let tl =
            simulate_timeline(&kb, &procs(ProcessKind::Bernoulli { p: 1.0 }, 0.0, 0.0), 100, 3)
                .unwrap();
        for tick in 0..100 {
            assert_eq!(tl.snapshot(tick).len(), 4);
        }
    }

    #[test]
    fn bernoulli_rate_matches_p() {
        // 10 rows x 1000 ticks = 10,000 row-ticks; empirical availability
        // must sit within 0.75 ± 0.02.
        let kb = tiny_kb(10);
        let tl =
            simulate_timeline(&kb, &procs(ProcessKind::Bernoulli { p: 0.75 }, 0.0, 0.0), 1000, 11)
                .unwrap();
        let mut present = 0usize;
        for row in 0..10 {
            for tick in 0..1000 {
                if tl.row_present(row, tick) {
                    present += 1;
                }
            }
        }
        let rate = present as f64 / 10_000.0;
        assert!((rate - 0.75).abs() <= 0.02, "rate {rate}");
    }

    #[test]
    fn closure_is_permanent() {
        let kb = tiny_kb(20);
        let tl = simulate_timeline(
            &kb,
            &procs(ProcessKind::Bernoulli { p: 1.0 }, 0.0, 0.05),
            200,
            5,
        )
        .unwrap();
        for row in 0..20 {
            let mut seen_closed = false;
            for tick in 0..200 {
                if seen_closed {
                    assert!(!tl.row_present(row, tick), "row {row} reappeared at {tick}");
                } else if !tl.row_present(row, tick) {
                    seen_closed = true;
                }
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let kb = tiny_kb(6);
        let p = procs(ProcessKind::Bernoulli { p: 0.6 }, 0.05, 0.001);
        let a = simulate_timeline(&kb, &p, 300, 9).unwrap();
        let b = simulate_timeline(&kb, &p, 300, 9).unwrap();
        for row in 0..6 {
            for tick in 0..300 {
                assert_eq!(a.row_present(row, tick), b.row_present(row, tick));
            }
        }
    }

    #[test]
    fn empty_base_kb_rejected() {
        let kb = KnowledgeBase::empty("base");
        assert!(
            simulate_timeline(&kb, &procs(ProcessKind::AlwaysOn, 0.0, 0.0), 10, 1).is_err()
        );
    }
}
