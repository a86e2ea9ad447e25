use crate::{CoreError, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

/// A typed surface value, e.g. `("thai", "cuisine")`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Entity {
    pub value: String,
    pub etype: String,
}

impl Entity {
    pub fn new(value: impl Into<String>, etype: impl Into<String>) -> Self {
        Entity {
            value: value.into(),
            etype: etype.into(),
        }
    }
}

/// A relation between a head entity type and a tail entity type. Latent
/// relations hold values that steer agent behaviour without ever being
/// uttered verbatim (a restaurant's rating, typically).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationType {
    pub name: String,
    pub head_type: String,
    pub tail_type: String,
    #[serde(default)]
    pub latent: bool,
}

/// Entity types, relation types, and the global entity vocabulary.
///
/// The admissible-target sets `E_r` are derived per relation from the tail
/// type over the global entity list, preserving list order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Ontology {
    pub entity_types: Vec<String>,
    pub relation_types: Vec<RelationType>,
    pub entities: Vec<Entity>,
}

impl Ontology {
    /// Validates the structural invariants: relation endpoints are known
    /// entity types, names are unique within their category, and every
    /// latent relation has a non-empty target set.
    pub fn validate(&self) -> Result<()> {
        let types: BTreeSet<&str> = self.entity_types.iter().map(String::as_str).collect();
        if types.len() != self.entity_types.len() {
            return Err(CoreError::InvalidOntology(
                "duplicate entity type names".into(),
            ));
        }
        let mut rel_names = BTreeSet::new();
        for rel in &self.relation_types {
            if !rel_names.insert(rel.name.as_str()) {
                return Err(CoreError::InvalidOntology(format!(
                    "duplicate relation type `{}`",
                    rel.name
                )));
            }
            for side in [&rel.head_type, &rel.tail_type] {
                if !types.contains(side.as_str()) {
                    return Err(CoreError::InvalidOntology(format!(
                        "relation `{}` references unknown entity type `{side}`",
                        rel.name
                    )));
                }
            }
        }
        for ent in &self.entities {
            if ent.value.is_empty() {
                return Err(CoreError::InvalidOntology("empty entity value".into()));
            }
            if !types.contains(ent.etype.as_str()) {
                return Err(CoreError::InvalidOntology(format!(
                    "entity `{}` has unknown type `{}`",
                    ent.value, ent.etype
                )));
            }
        }
        for rel in &self.relation_types {
            if rel.latent && self.target_set(&rel.name).is_empty() {
                return Err(CoreError::InvalidOntology(format!(
                    "latent relation `{}` has an empty target set",
                    rel.name
                )));
            }
        }
        Ok(())
    }

    pub fn relation(&self, name: &str) -> Option<&RelationType> {
        self.relation_types.iter().find(|r| r.name == name)
    }

    /// Admissible tail entities `E_r` for a relation, in vocabulary order.
    pub fn target_set(&self, relation: &str) -> Vec<&Entity> {
        match self.relation(relation) {
            Some(rel) => self
                .entities
                .iter()
                .filter(|e| e.etype == rel.tail_type)
                .collect(),
            None => Vec::new(),
        }
    }

    pub fn latent_relations(&self) -> impl Iterator<Item = &RelationType> {
        self.relation_types.iter().filter(|r| r.latent)
    }

    /// Entity types that appear as the head of at least one relation.
    pub fn head_types(&self) -> BTreeSet<&str> {
        self.relation_types
            .iter()
            .map(|r| r.head_type.as_str())
            .collect()
    }

    /// Maps a tail entity type to the relations accepting it, in declaration
    /// order. Useful when reconstructing constraints from typed mentions.
    pub fn relations_by_tail_type(&self) -> BTreeMap<&str, Vec<&RelationType>> {
        let mut out: BTreeMap<&str, Vec<&RelationType>> = BTreeMap::new();
        for rel in &self.relation_types {
            out.entry(rel.tail_type.as_str()).or_default().push(rel);
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::io(format!("reading ontology {}", path.display()), e))?;
        let ont: Ontology = serde_json::from_str(&text)
            .map_err(|e| CoreError::json(format!("parsing ontology {}", path.display()), e))?;
        ont.validate()?;
        Ok(ont)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| CoreError::json("serializing ontology", e))?;
        std::fs::write(path, text)
            .map_err(|e| CoreError::io(format!("writing ontology {}", path.display()), e))
    }
}
