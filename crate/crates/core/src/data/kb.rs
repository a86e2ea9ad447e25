use super::ontology::{Entity, Ontology};
use crate::{CoreError, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

/// A single `(head, relation, tail)` fact.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: Entity,
    pub relation: String,
    pub tail: Entity,
}

impl Triple {
    pub fn new(head: Entity, relation: impl Into<String>, tail: Entity) -> Self {
        Triple {
            head,
            relation: relation.into(),
            tail,
        }
    }

    /// Checks the endpoints against the relation's declared types.
    pub fn type_consistent(&self, ontology: &Ontology) -> bool {
        ontology
            .relation(&self.relation)
            .map(|r| r.head_type == self.head.etype && r.tail_type == self.tail.etype)
            .unwrap_or(false)
    }
}

/// One KB row: a head entity plus a (possibly partial) field map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Row {
    pub head: Entity,
    pub fields: BTreeMap<String, Entity>,
}

impl Row {
    pub fn new(head: Entity) -> Self {
        Row {
            head,
            fields: BTreeMap::new(),
        }
    }

    pub fn with_field(mut self, relation: impl Into<String>, tail: Entity) -> Self {
        self.fields.insert(relation.into(), tail);
        self
    }

    /// All entities of the row: the head followed by field values in field
    /// order.
    pub fn entities(&self) -> impl Iterator<Item = &Entity> {
        std::iter::once(&self.head).chain(self.fields.values())
    }
}

/// A KB snapshot: a set of rows with unique heads, labeled by snapshot id.
///
/// Rows are kept sorted by head value so that serialization and iteration
/// are canonical regardless of construction order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    pub id: String,
    pub rows: Vec<Row>,
}

impl KnowledgeBase {
    pub fn new(id: impl Into<String>, mut rows: Vec<Row>) -> Result<Self> {
        rows.sort_by(|a, b| a.head.cmp(&b.head));
        let mut seen = BTreeSet::new();
        for row in &rows {
            if !seen.insert(&row.head) {
                return Err(CoreError::InvalidKb(format!(
                    "duplicate row head `{}`",
                    row.head.value
                )));
            }
        }
        Ok(KnowledgeBase {
            id: id.into(),
            rows,
        })
    }

    pub fn empty(id: impl Into<String>) -> Self {
        KnowledgeBase {
            id: id.into(),
            rows: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, head: &Entity) -> Option<&Row> {
        self.rows.iter().find(|r| &r.head == head)
    }

    pub fn row_by_head_value(&self, value: &str) -> Option<&Row> {
        self.rows.iter().find(|r| r.head.value == value)
    }

    pub fn contains_head(&self, head: &Entity) -> bool {
        self.row(head).is_some()
    }

    /// Distinct entities across all rows, sorted.
    pub fn entities(&self) -> Vec<&Entity> {
        let mut set: BTreeSet<&Entity> = BTreeSet::new();
        for row in &self.rows {
            set.extend(row.entities());
        }
        set.into_iter().collect()
    }

    /// Number of rows in which an entity value occurs.
    pub fn value_occurrence_count(&self, value: &str) -> usize {
        self.rows
            .iter()
            .filter(|r| r.entities().any(|e| e.value == value))
            .count()
    }

    /// A copy without the given row, relabeled so caches keyed by id stay
    /// coherent.
    pub fn without_row(&self, head: &Entity) -> KnowledgeBase {
        KnowledgeBase {
            id: format!("{}~minus~{}", self.id, head.value),
            rows: self
                .rows
                .iter()
                .filter(|r| &r.head != head)
                .cloned()
                .collect(),
        }
    }

    /// Validates row typing against the ontology and head uniqueness.
    pub fn validate(&self, ontology: &Ontology) -> Result<()> {
        let mut seen = BTreeSet::new();
        for row in &self.rows {
            if !seen.insert(&row.head) {
                return Err(CoreError::InvalidKb(format!(
                    "duplicate row head `{}`",
                    row.head.value
                )));
            }
            for (rel, tail) in &row.fields {
                let triple = Triple::new(row.head.clone(), rel.clone(), tail.clone());
                if !triple.type_consistent(ontology) {
                    return Err(CoreError::InvalidKb(format!(
                        "row `{}` field `{rel}`=`{}` violates relation typing",
                        row.head.value, tail.value
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::io(format!("reading KB {}", path.display()), e))?;
        let kb: KnowledgeBase = serde_json::from_str(&text)
            .map_err(|e| CoreError::json(format!("parsing KB {}", path.display()), e))?;
        KnowledgeBase::new(kb.id, kb.rows)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text =
            serde_json::to_string_pretty(self).map_err(|e| CoreError::json("serializing KB", e))?;
        std::fs::write(path, text)
            .map_err(|e| CoreError::io(format!("writing KB {}", path.display()), e))
    }
}

/// Expands a KB into its exact triple set; `|result| = Σ_row |fields|`.
pub fn kb_to_triples(kb: &KnowledgeBase) -> BTreeSet<Triple> {
    let mut out = BTreeSet::new();
    for row in &kb.rows {
        for (rel, tail) in &row.fields {
            out.insert(Triple::new(row.head.clone(), rel.clone(), tail.clone()));
        }
    }
    out
}

/// Groups triples back into rows by head. Inverse of [`kb_to_triples`] for
/// KBs whose every row has at least one field.
pub fn triples_to_rows(id: impl Into<String>, triples: &BTreeSet<Triple>) -> Result<KnowledgeBase> {
    let mut rows: BTreeMap<Entity, Row> = BTreeMap::new();
    for t in triples {
        let row = rows
            .entry(t.head.clone())
            .or_insert_with(|| Row::new(t.head.clone()));
        if let Some(prev) = row.fields.get(&t.relation) {
            if prev != &t.tail {
                return Err(CoreError::InvalidKb(format!(
                    "head `{}` has two values for `{}`",
                    t.head.value, t.relation
                )));
            }
        }
        row.fields.insert(t.relation.clone(), t.tail.clone());
    }
    KnowledgeBase::new(id, rows.into_values().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ent(v: &str, t: &str) -> Entity {
        Entity::new(v, t)
    }

    #[test]
    fn empty_kb_expands_to_empty_triple_set() {
        let kb = KnowledgeBase::empty("t");
        assert!(kb_to_triples(&kb).is_empty());
    }

    #[test]
    fn single_row_expands_directly() {
        let row = Row::new(ent("R1", "restaurant"))
            .with_field("cuisine", ent("thai", "cuisine"))
            .with_field("area", ent("west", "area"));
        let kb = KnowledgeBase::new("t", vec![row]).unwrap();
        let triples = kb_to_triples(&kb);
        assert_eq!(triples.len(), 2);
        assert!(triples.contains(&Triple::new(
            ent("R1", "restaurant"),
            "cuisine",
            ent("thai", "cuisine")
        )));
        assert!(triples.contains(&Triple::new(
            ent("R1", "restaurant"),
            "area",
            ent("west", "area")
        )));
    }

    #[test]
    fn duplicate_heads_rejected() {
        let rows = vec![Row::new(ent("R1", "restaurant")), Row::new(ent("R1", "restaurant"))];
        assert!(KnowledgeBase::new("t", rows).is_err());
    }

    #[test]
    fn triple_count_matches_field_count() {
        let rows = vec![
            Row::new(ent("A", "restaurant")).with_field("cuisine", ent("thai", "cuisine")),
            Row::new(ent("B", "restaurant"))
                .with_field("cuisine", ent("french", "cuisine"))
                .with_field("area", ent("east", "area")),
        ];
        let kb = KnowledgeBase::new("t", rows).unwrap();
        let total: usize = kb.rows.iter().map(|r| r.fields.len()).sum();
        assert_eq!(kb_to_triples(&kb).len(), total);
    }
}
