//! Domain types shared by every stage: ontology, entities, rows, KBs,
//! dialogs, corpus records, and the dialog/KB consistency judge.
//!
//! All types are immutable values after construction; nothing here mutates
//! shared state, so everything is safe to hand out across threads.

mod consistency;
mod dialog;
mod kb;
mod ontology;

pub use consistency::{
    consistency_judge, inconsistency_rate, recommended_heads, user_constraints, OrderingKey,
};
pub use dialog::{Corpus, CorpusRecord, Dialog, Mention, Speaker, Utterance};
pub use kb::{kb_to_triples, triples_to_rows, KnowledgeBase, Row, Triple};
pub use ontology::{Entity, Ontology, RelationType};
