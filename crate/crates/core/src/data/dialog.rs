use super::ontology::Entity;
use crate::{CoreError, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Agent,
}

/// A half-open token span `[start, end)` annotated with the entity it
/// surfaces. Corpus tokenization pre-joins entity values with underscores,
/// so spans are single tokens in practice; the span form is kept general.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub start: usize,
    pub end: usize,
    pub entity: Entity,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    pub speaker: Speaker,
    pub tokens: Vec<String>,
    pub mentions: Vec<Mention>,
}

impl Utterance {
    pub fn new(speaker: Speaker, tokens: Vec<String>, mentions: Vec<Mention>) -> Self {
        Utterance {
            speaker,
            tokens,
            mentions,
        }
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

/// A timestamped alternating user/agent exchange. Timestamps are integer
/// simulation ticks; only their ordering is meaningful.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialog {
    pub id: String,
    pub timestamp: u64,
    pub utterances: Vec<Utterance>,
}

impl Dialog {
    /// Checks alternation (starting with the user), span sanity and the
    /// mention-surface agreement under the corpus tokenization.
    pub fn validate(&self) -> Result<()> {
        let err = |reason: String| CoreError::InvalidDialog {
            id: self.id.clone(),
            reason,
        };
        for (i, utt) in self.utterances.iter().enumerate() {
            let expected = if i % 2 == 0 {
                Speaker::User
            } else {
                Speaker::Agent
            };
            if utt.speaker != expected {
                return Err(err(format!("utterance {i} breaks user/agent alternation")));
            }
            let mut prev_end = 0usize;
            let mut sorted = utt.mentions.clone();
            sorted.sort_by_key(|m| m.start);
            for m in &sorted {
                if m.start >= m.end || m.end > utt.tokens.len() {
                    return Err(err(format!("mention span {}..{} out of range", m.start, m.end)));
                }
                if m.start < prev_end {
                    return Err(err("overlapping mention spans".into()));
                }
                prev_end = m.end;
                let surface = utt.tokens[m.start..m.end].join("_");
                if surface != m.entity.value {
                    return Err(err(format!(
                        "mention surface `{surface}` does not match entity `{}`",
                        m.entity.value
                    )));
                }
            }
        }
        Ok(())
    }

    /// Distinct mentioned entities, in first-mention order.
    pub fn mentioned_entities(&self) -> Vec<&Entity> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for utt in &self.utterances {
            for m in &utt.mentions {
                if seen.insert(&m.entity) {
                    out.push(&m.entity);
                }
            }
        }
        out
    }

    pub fn mention_values(&self) -> BTreeSet<&str> {
        self.utterances
            .iter()
            .flat_map(|u| u.mentions.iter())
            .map(|m| m.entity.value.as_str())
            .collect()
    }

    pub fn agent_utterances(&self) -> impl Iterator<Item = (usize, &Utterance)> {
        self.utterances
            .iter()
            .enumerate()
            .filter(|(_, u)| u.speaker == Speaker::Agent)
    }
}

/// A dialog paired with the shared training KB and, for simulated corpora,
/// the contemporary gold snapshot it was grounded against.
#[derive(Debug, Clone)]
pub struct CorpusRecord {
    pub dialog: Dialog,
    pub gold_kb_id: Option<String>,
}

/// An on-disk corpus split: the records plus the id of the training KB they
/// share. Gold snapshots live in a sibling directory keyed by id.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub records: Vec<CorpusRecord>,
}

#[derive(Serialize, Deserialize)]
struct TurnWire {
    speaker: Speaker,
    text: String,
    mentions: Vec<MentionWire>,
}

#[derive(Serialize, Deserialize)]
struct MentionWire {
    start: usize,
    end: usize,
    value: String,
    etype: String,
}

#[derive(Serialize, Deserialize)]
struct RecordWire {
    id: String,
    timestamp: u64,
    turns: Vec<TurnWire>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gold_kb_id: Option<String>,
}

impl CorpusRecord {
    fn to_wire(&self) -> RecordWire {
        RecordWire {
            id: self.dialog.id.clone(),
            timestamp: self.dialog.timestamp,
            turns: self
                .dialog
                .utterances
                .iter()
                .map(|u| TurnWire {
                    speaker: u.speaker,
                    text: u.text(),
                    mentions: u
                        .mentions
                        .iter()
                        .map(|m| MentionWire {
                            start: m.start,
                            end: m.end,
                            value: m.entity.value.clone(),
                            etype: m.entity.etype.clone(),
                        })
                        .collect(),
                })
                .collect(),
            gold_kb_id: self.gold_kb_id.clone(),
        }
    }

    fn from_wire(wire: RecordWire) -> Self {
        CorpusRecord {
            dialog: Dialog {
                id: wire.id,
                timestamp: wire.timestamp,
                utterances: wire
                    .turns
                    .into_iter()
                    .map(|t| Utterance {
                        speaker: t.speaker,
                        tokens: t.text.split_whitespace().map(str::to_owned).collect(),
                        mentions: t
                            .mentions
                            .into_iter()
                            .map(|m| Mention {
                                start: m.start,
                                end: m.end,
                                entity: Entity::new(m.value, m.etype),
                            })
                            .collect(),
                    })
                    .collect(),
            },
            gold_kb_id: wire.gold_kb_id,
        }
    }
}

impl Corpus {
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| CoreError::io(format!("opening corpus {}", path.display()), e))?;
        let reader = std::io::BufReader::new(file);
        let mut records = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| CoreError::io(format!("reading corpus line {n}"), e))?;
            if line.trim().is_empty() {
                continue;
            }
            let wire: RecordWire = serde_json::from_str(&line)
                .map_err(|e| CoreError::json(format!("parsing corpus line {n}"), e))?;
            let record = CorpusRecord::from_wire(wire);
            record.dialog.validate()?;
            records.push(record);
        }
        Ok(Corpus { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)
            .map_err(|e| CoreError::io(format!("creating corpus {}", path.display()), e))?;
        for record in &self.records {
            let line = serde_json::to_string(&record.to_wire())
                .map_err(|e| CoreError::json("serializing corpus record", e))?;
            writeln!(file, "{line}")
                .map_err(|e| CoreError::io(format!("writing corpus {}", path.display()), e))?;
        }
        Ok(())
    }
}
