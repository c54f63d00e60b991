//! Corpus model: delexicalized dialogue responses, paraphrase sets, splits.
//!
//! A response is a token sequence where slot values have been replaced by
//! typed references ([`Token::Slot`]) into a side table of [`SlotFill`]s.
//! Responses sharing a (dialogue action, slot-type multiset) key form a
//! [`ParaphraseSet`]; any member of a set can serve as a template for
//! paraphrasing any other, which is the weak supervision this whole project
//! rests on.
//!
//! Submodules: [`multiwoz`] ingests raw MultiWOZ-style JSON into records,
//! [`sets`] groups records and carves train/val/test splits, [`io`] reads and
//! writes the JSONL + manifest formats.

pub mod io;
pub mod multiwoz;
pub mod sets;

pub use io::{read_records_jsonl, write_records_jsonl, SplitManifest};
pub use multiwoz::{load_dialogues, split_multi_action, tokenize, IngestStats};
pub use sets::{
    build_paraphrase_sets, build_splits, sample_training_instance, sampling_weight,
    SamplingSchedule, TrainingInstance,
};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

/// End-of-sequence marker; every response's token stream ends with it.
pub const EOS_TOKEN: &str = "</s>";

/// One position in a delexicalized response: either a literal word or a
/// reference into the response's slot table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Token {
    Word(String),
    Slot { slot: usize },
}

impl Token {
    pub fn word(w: impl Into<String>) -> Token {
        Token::Word(w.into())
    }

    pub fn slot(i: usize) -> Token {
        Token::Slot { slot: i }
    }

    pub fn as_word(&self) -> Option<&str> {
        match self {
            Token::Word(w) => Some(w),
            Token::Slot { .. } => None,
        }
    }

    pub fn as_slot(&self) -> Option<usize> {
        match self {
            Token::Word(_) => None,
            Token::Slot { slot } => Some(*slot),
        }
    }
}

/// A slot occurrence: its type, its index among same-type slots in the same
/// response, and the surface value it replaced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotFill {
    #[serde(rename = "type")]
    pub slot_type: String,
    pub type_position: usize,
    pub value_tokens: Vec<String>,
    /// Which dialogue act annotated this slot; ingestion-internal, used by
    /// sentence splitting to attribute acts, never serialized.
    #[serde(skip)]
    pub origin_act: Option<String>,
}

impl SlotFill {
    pub fn new(slot_type: impl Into<String>, type_position: usize, value: &[&str]) -> SlotFill {
        SlotFill {
            slot_type: slot_type.into(),
            type_position,
            value_tokens: value.iter().map(|s| s.to_string()).collect(),
            origin_act: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    System,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextTurn {
    pub speaker: Speaker,
    pub tokens: Vec<String>,
}

/// The preceding turns a response is conditioned on, oldest first.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DialogueContext {
    pub turns: Vec<ContextTurn>,
}

impl DialogueContext {
    pub fn empty() -> Self {
        DialogueContext::default()
    }
}

/// A delexicalized system response plus its annotations.
///
/// `sub_index` distinguishes the records an original multi-sentence turn was
/// split into; (dialogue_id, turn_index, sub_index) is unique corpus-wide.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedResponse {
    pub dialogue_id: String,
    pub turn_index: usize,
    #[serde(default)]
    pub sub_index: usize,
    pub dialogue_action: String,
    pub tokens: Vec<Token>,
    pub slots: Vec<SlotFill>,
}

impl AnnotatedResponse {
    pub fn id(&self) -> String {
        format!("{}:{}:{}", self.dialogue_id, self.turn_index, self.sub_index)
    }

    /// Multiset of slot types as sorted (type, count) pairs.
    pub fn slot_signature(&self) -> Vec<(String, usize)> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for s in &self.slots {
            *counts.entry(&s.slot_type).or_default() += 1;
        }
        counts
            .into_iter()
            .map(|(t, c)| (t.to_string(), c))
            .collect()
    }

    pub fn set_key(&self) -> SetKey {
        SetKey {
            action: self.dialogue_action.clone(),
            signature: self.slot_signature(),
        }
    }

    /// Check the structural invariants every corpus record must satisfy:
    /// each slot referenced exactly once, contiguous type_positions per type,
    /// non-empty values, and a trailing end-of-sequence marker.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::corpus(format!("{}: {msg}", self.id())));

        if self.tokens.is_empty() {
            return fail("empty token sequence".into());
        }
        if self.tokens.last().and_then(Token::as_word) != Some(EOS_TOKEN) {
            return fail(format!("does not end with {EOS_TOKEN}"));
        }

        let mut ref_counts = vec![0usize; self.slots.len()];
        for t in &self.tokens {
            if let Some(i) = t.as_slot() {
                if i >= self.slots.len() {
                    return fail(format!("slot reference {i} out of range"));
                }
                ref_counts[i] += 1;
            }
        }
        for (i, &c) in ref_counts.iter().enumerate() {
            if c != 1 {
                return fail(format!("slot {i} referenced {c} times, expected exactly 1"));
            }
        }

        let mut positions: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for s in &self.slots {
            if s.value_tokens.is_empty() {
                return fail(format!("slot type {:?} has an empty value", s.slot_type));
            }
            positions.entry(&s.slot_type).or_default().push(s.type_position);
        }
        for (ty, mut pos) in positions {
            pos.sort_unstable();
            if pos.iter().enumerate().any(|(want, &got)| want != got) {
                return fail(format!("type_position gap for slot type {ty:?}: {pos:?}"));
            }
        }
        Ok(())
    }
}

/// One corpus line: a response together with its dialogue context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub context: DialogueContext,
    #[serde(flatten)]
    pub response: AnnotatedResponse,
}

impl CorpusRecord {
    pub fn id(&self) -> String {
        self.response.id()
    }

    /// (dialogue_id, turn_index): the unit split disjointness is defined on.
    pub fn turn_key(&self) -> (String, usize) {
        (
            self.response.dialogue_id.clone(),
            self.response.turn_index,
        )
    }
}

/// Grouping key for paraphrase sets: action + slot-type multiset.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SetKey {
    pub action: String,
    pub signature: Vec<(String, usize)>,
}

impl fmt::Display for SetKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}|", self.action)?;
        for (i, (ty, count)) in self.signature.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{ty}:{count}")?;
        }
        Ok(())
    }
}

impl FromStr for SetKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (action, sig) = s
            .split_once('|')
            .ok_or_else(|| Error::corpus(format!("set key {s:?} missing '|'")))?;
        let mut signature = Vec::new();
        if !sig.is_empty() {
            for part in sig.split(',') {
                let (ty, count) = part
                    .split_once(':')
                    .ok_or_else(|| Error::corpus(format!("bad signature part {part:?}")))?;
                let count: usize = count
                    .parse()
                    .map_err(|_| Error::corpus(format!("bad slot count in {part:?}")))?;
                signature.push((ty.to_string(), count));
            }
        }
        Ok(SetKey {
            action: action.to_string(),
            signature,
        })
    }
}

/// All responses sharing one [`SetKey`]; the weak-supervision unit.
#[derive(Debug, Clone, PartialEq)]
pub struct ParaphraseSet {
    pub key: SetKey,
    pub members: Vec<CorpusRecord>,
}

impl ParaphraseSet {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// The five corpus partitions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorpusSplits {
    pub train: Vec<ParaphraseSet>,
    pub val_seen: Vec<ParaphraseSet>,
    pub val_unseen: Vec<ParaphraseSet>,
    pub test_seen: Vec<ParaphraseSet>,
    pub test_unseen: Vec<ParaphraseSet>,
}

pub const SPLIT_NAMES: [&str; 5] = ["train", "val_seen", "val_unseen", "test_seen", "test_unseen"];

impl CorpusSplits {
    pub fn get(&self, name: &str) -> Option<&[ParaphraseSet]> {
        match name {
            "train" => Some(&self.train),
            "val_seen" => Some(&self.val_seen),
            "val_unseen" => Some(&self.val_unseen),
            "test_seen" => Some(&self.test_seen),
            "test_unseen" => Some(&self.test_unseen),
            _ => None,
        }
    }

    pub fn iter_named(&self) -> impl Iterator<Item = (&'static str, &[ParaphraseSet])> {
        [
            ("train", self.train.as_slice()),
            ("val_seen", self.val_seen.as_slice()),
            ("val_unseen", self.val_unseen.as_slice()),
            ("test_seen", self.test_seen.as_slice()),
            ("test_unseen", self.test_unseen.as_slice()),
        ]
        .into_iter()
    }

    /// Both validation/test halves combined, for evaluation passes.
    pub fn eval_sets(&self, which: &str) -> Result<Vec<&ParaphraseSet>> {
        let pair: Vec<&ParaphraseSet> = match which {
            "val" => self.val_seen.iter().chain(&self.val_unseen).collect(),
            "test" => self.test_seen.iter().chain(&self.test_unseen).collect(),
            other => {
                return self
                    .get(other)
                    .map(|s| s.iter().collect())
                    .ok_or_else(|| {
                        Error::invalid(format!(
                            "unknown split {other:?}; expected one of train, val, test, {}",
                            SPLIT_NAMES.join(", ")
                        ))
                    })
            }
        };
        Ok(pair)
    }
}
