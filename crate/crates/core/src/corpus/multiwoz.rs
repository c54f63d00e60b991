//! Ingestion of MultiWOZ-style dialogue data.
//!
//! Input is the standard pair of files: `data.json` mapping dialogue ids to
//! alternating user/system turns, and `dialogue_acts.json` mapping dialogue
//! ids to per-system-turn act annotations. Each annotated system turn becomes
//! one delexicalized [`CorpusRecord`]; turns spanning several sentences or
//! acts are split afterwards by [`split_multi_action`] so each record carries
//! a single (sentence, action) unit.
//!
//! Recoverable per-turn problems (no annotation, a slot value that cannot be
//! found in the text) skip the turn and bump a counter in [`IngestStats`];
//! only structurally unusable files are hard errors.

use super::{
    AnnotatedResponse, ContextTurn, CorpusRecord, DialogueContext, SlotFill, Speaker, Token,
    EOS_TOKEN,
};
use crate::config::CorpusConfig;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::BTreeMap;
use std::path::Path;

/// Counters describing what ingestion kept and what it dropped.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub dialogues: usize,
    pub system_turns: usize,
    /// System turns with no act annotation (or "No Annotation").
    pub skipped_no_annotation: usize,
    /// Turns dropped because an annotated slot value was not locatable in
    /// the response text.
    pub dropped_unlocatable: usize,
    /// Turns whose sentence split was suppressed because a slot value
    /// contains sentence-final punctuation.
    pub kept_unsplit: usize,
    /// Turns that produced more than one record.
    pub split_turns: usize,
    /// Records emitted (after splitting).
    pub records: usize,
}

/// Lowercasing word tokenizer. Punctuation becomes its own token, except
/// that `.`, `:`, `'` and `-` are kept inside a token when both neighbours
/// are alphanumeric, so "17:36", "3.50", "don't" and "guest-house" survive
/// as single tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.to_lowercase().chars().collect();
    let mut tokens = Vec::new();
    let mut current = String::new();
    for (i, &c) in chars.iter().enumerate() {
        if c.is_alphanumeric() {
            current.push(c);
        } else if c.is_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else {
            let joins = matches!(c, '.' | ':' | '\'' | '-')
                && i > 0
                && chars[i - 1].is_alphanumeric()
                && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric());
            if joins {
                current.push(c);
            } else {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                tokens.push(c.to_string());
            }
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// One dialogue act after normalization: its label (request slots folded in)
/// and the slot values it realizes in the text.
#[derive(Debug, Clone)]
struct ActAnnotation {
    label: String,
    /// (slot type, value tokens) pairs that should appear in the response.
    realized: Vec<(String, Vec<String>)>,
}

/// Parse one turn's act annotation value into normalized acts.
///
/// Realized slots keep their values; request slots (value "?") have no
/// surface value, so they are folded into the act label ("hotel-request?area")
/// to keep the action distinction without inventing empty slot fills.
fn parse_acts(turn_acts: &Value) -> Vec<ActAnnotation> {
    let Some(map) = turn_acts.as_object() else {
        return Vec::new(); // "No Annotation" or similar
    };
    let mut acts = Vec::new();
    let mut names: Vec<&String> = map.keys().collect();
    names.sort();
    for name in names {
        let mut realized = Vec::new();
        let mut requested: Vec<String> = Vec::new();
        if let Some(pairs) = map[name].as_array() {
            for pair in pairs {
                let (Some(slot), Some(value)) = (
                    pair.get(0).and_then(Value::as_str),
                    pair.get(1).and_then(Value::as_str),
                ) else {
                    continue;
                };
                let slot = slot.to_lowercase();
                if slot == "none" || value == "none" {
                    continue;
                }
                if value == "?" {
                    requested.push(slot);
                } else {
                    let value_tokens = tokenize(value);
                    if !value_tokens.is_empty() {
                        realized.push((slot, value_tokens));
                    }
                }
            }
        }
        requested.sort();
        requested.dedup();
        let mut label = name.to_lowercase();
        for r in &requested {
            label.push('?');
            label.push_str(r);
        }
        acts.push(ActAnnotation { label, realized });
    }
    acts
}

/// Where each slot value was found in the token stream.
struct Located {
    act: String,
    slot_type: String,
    value_tokens: Vec<String>,
    start: usize,
    len: usize,
}

/// Find every annotated slot value in `tokens`, longest values first so a
/// short value never claims a span inside a longer one. Duplicate
/// (type, value) annotations across acts are collapsed first: several acts
/// often re-annotate the same single mention. Returns None if any remaining
/// value cannot be found in an unclaimed span.
fn locate_slots(tokens: &[String], acts: &[ActAnnotation]) -> Option<Vec<Located>> {
    let mut wanted: Vec<(String, String, Vec<String>)> = Vec::new();
    for act in acts {
        for (slot_type, value_tokens) in &act.realized {
            let dup = wanted
                .iter()
                .any(|(_, t, v)| t == slot_type && v == value_tokens);
            if !dup {
                wanted.push((act.label.clone(), slot_type.clone(), value_tokens.clone()));
            }
        }
    }
    // Longest first; ties keep annotation order (stable sort).
    wanted.sort_by_key(|(_, _, v)| std::cmp::Reverse(v.len()));

    let mut claimed = vec![false; tokens.len()];
    let mut located = Vec::new();
    for (act, slot_type, value_tokens) in wanted {
        let n = value_tokens.len();
        let mut found = None;
        if n <= tokens.len() {
            for start in 0..=tokens.len() - n {
                if claimed[start..start + n].iter().any(|&c| c) {
                    continue;
                }
                if tokens[start..start + n] == value_tokens[..] {
                    found = Some(start);
                    break;
                }
            }
        }
        let start = found?;
        claimed[start..start + n].iter_mut().for_each(|c| *c = true);
        located.push(Located {
            act,
            slot_type,
            value_tokens,
            start,
            len: n,
        });
    }
    located.sort_by_key(|l| l.start);
    Some(located)
}

/// Combined action label for a group of acts: component labels sorted and
/// joined with '+'.
fn combined_action(labels: impl Iterator<Item = String>) -> String {
    let mut v: Vec<String> = labels.collect();
    v.sort();
    v.dedup();
    v.join("+")
}

/// Build the delexicalized token stream + slot table from located spans.
fn delexicalize(tokens: &[String], located: &[Located]) -> (Vec<Token>, Vec<SlotFill>) {
    let mut out = Vec::new();
    let mut slots: Vec<SlotFill> = Vec::new();
    let mut type_counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut i = 0;
    let mut next = located.iter().peekable();
    while i < tokens.len() {
        if let Some(l) = next.peek() {
            if l.start == i {
                let l = next.next().unwrap();
                let pos = type_counts.entry(l.slot_type.clone()).or_default();
                slots.push(SlotFill {
                    slot_type: l.slot_type.clone(),
                    type_position: *pos,
                    value_tokens: l.value_tokens.clone(),
                    origin_act: Some(l.act.clone()),
                });
                *pos += 1;
                out.push(Token::slot(slots.len() - 1));
                i += l.len;
                continue;
            }
        }
        out.push(Token::word(tokens[i].clone()));
        i += 1;
    }
    (out, slots)
}

fn is_sentence_end(tok: &Token) -> bool {
    matches!(tok.as_word(), Some("." | "?" | "!"))
}

/// Split a record into one record per (sentence, action) unit.
///
/// Sentences are segmented at `.`/`?`/`!` tokens. Acts that realized a slot
/// belong to the sentence holding that slot; act labels without any located
/// slot are paired with act-less sentences in order (surplus labels land on
/// the last sentence, and a sentence left without any act inherits from its
/// predecessor). Each output re-indexes slots and type positions and gets
/// `sub_index` set to its sentence position.
///
/// If a slot value itself contains sentence-final punctuation, the sentence
/// boundaries are unreliable, so the record is returned unsplit and the
/// second tuple element reports it.
pub fn split_multi_action(record: &CorpusRecord) -> (Vec<CorpusRecord>, bool) {
    let resp = &record.response;
    let hidden_boundary = resp
        .slots
        .iter()
        .any(|s| s.value_tokens.iter().any(|t| matches!(t.as_str(), "." | "?" | "!")));
    if hidden_boundary {
        return (vec![record.clone()], true);
    }

    // Token ranges per sentence, excluding the trailing end marker.
    let body_len = resp.tokens.len() - 1;
    let mut sentences: Vec<(usize, usize)> = Vec::new();
    let mut start = 0;
    for i in 0..body_len {
        if is_sentence_end(&resp.tokens[i]) {
            sentences.push((start, i + 1));
            start = i + 1;
        }
    }
    if start < body_len {
        sentences.push((start, body_len));
    }
    if sentences.len() <= 1 {
        return (vec![record.clone()], false);
    }

    // Acts present per sentence, from slot attribution.
    let act_of_slot: Vec<Option<&String>> =
        resp.slots.iter().map(|s| s.origin_act.as_ref()).collect();
    let mut sentence_acts: Vec<Vec<String>> = vec![Vec::new(); sentences.len()];
    for (si, &(lo, hi)) in sentences.iter().enumerate() {
        for tok in &resp.tokens[lo..hi] {
            if let Some(slot) = tok.as_slot() {
                if let Some(act) = act_of_slot[slot] {
                    if !sentence_acts[si].contains(act) {
                        sentence_acts[si].push(act.clone());
                    }
                }
            }
        }
    }

    // Labels that realized no slot: the turn-level action components not yet
    // attributed anywhere.
    let attributed: Vec<&String> = sentence_acts.iter().flatten().collect();
    let slotless: Vec<String> = resp
        .dialogue_action
        .split('+')
        .filter(|c| !attributed.iter().any(|a| a == c))
        .map(str::to_string)
        .collect();
    let mut empty_sentences: Vec<usize> = (0..sentences.len())
        .filter(|&i| sentence_acts[i].is_empty())
        .collect();
    for label in slotless {
        let si = if empty_sentences.is_empty() {
            sentences.len() - 1
        } else {
            empty_sentences.remove(0)
        };
        if !sentence_acts[si].contains(&label) {
            sentence_acts[si].push(label);
        }
    }
    for i in 0..sentence_acts.len() {
        if sentence_acts[i].is_empty() {
            // Inherit from the nearest earlier sentence with acts (there is
            // always at least one act in the turn).
            let donor = (0..i)
                .rev()
                .chain(i + 1..sentence_acts.len())
                .find(|&j| !sentence_acts[j].is_empty())
                .expect("turn has at least one act");
            sentence_acts[i] = sentence_acts[donor].clone();
        }
    }

    let mut out = Vec::new();
    for (si, &(lo, hi)) in sentences.iter().enumerate() {
        let mut tokens = Vec::new();
        let mut slots = Vec::new();
        let mut type_counts: BTreeMap<String, usize> = BTreeMap::new();
        for tok in &resp.tokens[lo..hi] {
            match tok {
                Token::Word(w) => tokens.push(Token::word(w.clone())),
                Token::Slot { slot } => {
                    let old = &resp.slots[*slot];
                    let pos = type_counts.entry(old.slot_type.clone()).or_default();
                    slots.push(SlotFill {
                        type_position: *pos,
                        ..old.clone()
                    });
                    *pos += 1;
                    tokens.push(Token::slot(slots.len() - 1));
                }
            }
        }
        tokens.push(Token::word(EOS_TOKEN));
        out.push(CorpusRecord {
            context: record.context.clone(),
            response: AnnotatedResponse {
                dialogue_id: resp.dialogue_id.clone(),
                turn_index: resp.turn_index,
                sub_index: si,
                dialogue_action: combined_action(sentence_acts[si].iter().cloned()),
                tokens,
                slots,
            },
        });
    }
    (out, false)
}

/// Load and delexicalize every annotated system turn from parsed MultiWOZ
/// JSON values. Records come out unsplit (one per system turn); run
/// [`split_multi_action`] afterwards, or use [`load_dialogues`] which does
/// both.
pub fn load_turns_from_values(
    data: &Value,
    acts: &Value,
    cfg: &CorpusConfig,
    stats: &mut IngestStats,
) -> Result<Vec<CorpusRecord>> {
    let data_map = data
        .as_object()
        .ok_or_else(|| Error::corpus("data.json: top level is not an object"))?;
    let acts_map = acts
        .as_object()
        .ok_or_else(|| Error::corpus("dialogue acts: top level is not an object"))?;

    let mut records = Vec::new();
    for (dialogue_id, dialogue) in data_map {
        let log = dialogue
            .get("log")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::corpus(format!("{dialogue_id}: missing log array")))?;
        stats.dialogues += 1;

        let plain_id = dialogue_id.strip_suffix(".json").unwrap_or(dialogue_id);
        let dialogue_acts = acts_map
            .get(plain_id)
            .or_else(|| acts_map.get(dialogue_id.as_str()));

        // Turns alternate user/system; system turns sit at odd log indices
        // and are numbered from 1 in the act file.
        for (i, turn) in log.iter().enumerate() {
            if i % 2 == 0 {
                continue;
            }
            stats.system_turns += 1;
            let system_turn_no = (i + 1) / 2;
            let text = turn
                .get("text")
                .and_then(Value::as_str)
                .ok_or_else(|| Error::corpus(format!("{dialogue_id}: turn {i} has no text")))?;

            let turn_acts =
                dialogue_acts.and_then(|d| d.get(system_turn_no.to_string().as_str()));
            let acts = match turn_acts {
                Some(v) => parse_acts(v),
                None => Vec::new(),
            };
            if acts.is_empty() {
                stats.skipped_no_annotation += 1;
                continue;
            }

            let tokens = tokenize(text);
            let Some(located) = locate_slots(&tokens, &acts) else {
                stats.dropped_unlocatable += 1;
                continue;
            };
            let (mut delexed, slots) = delexicalize(&tokens, &located);
            delexed.push(Token::word(EOS_TOKEN));
            if delexed.len() == 1 {
                stats.skipped_no_annotation += 1; // empty response text
                continue;
            }

            let ctx_start = i.saturating_sub(cfg.context_turns);
            let turns = (ctx_start..i)
                .map(|j| ContextTurn {
                    speaker: if j % 2 == 0 { Speaker::User } else { Speaker::System },
                    tokens: log[j]
                        .get("text")
                        .and_then(Value::as_str)
                        .map(tokenize)
                        .unwrap_or_default(),
                })
                .collect();

            records.push(CorpusRecord {
                context: DialogueContext { turns },
                response: AnnotatedResponse {
                    dialogue_id: plain_id.to_string(),
                    turn_index: i,
                    sub_index: 0,
                    dialogue_action: combined_action(acts.iter().map(|a| a.label.clone())),
                    tokens: delexed,
                    slots,
                },
            });
        }
    }
    Ok(records)
}

/// Apply [`split_multi_action`] over a batch, updating stats, validating
/// every output record.
pub fn split_all(records: Vec<CorpusRecord>, stats: &mut IngestStats) -> Result<Vec<CorpusRecord>> {
    let mut out = Vec::new();
    for record in &records {
        let (pieces, flagged) = split_multi_action(record);
        if flagged {
            stats.kept_unsplit += 1;
        }
        if pieces.len() > 1 {
            stats.split_turns += 1;
        }
        for piece in pieces {
            piece.response.validate()?;
            out.push(piece);
        }
    }
    stats.records = out.len();
    Ok(out)
}

/// Full ingestion: read `data.json` and the act annotation file from `dir`,
/// delexicalize, split, validate.
pub fn load_dialogues(dir: &Path, cfg: &CorpusConfig) -> Result<(Vec<CorpusRecord>, IngestStats)> {
    let data_path = dir.join("data.json");
    let acts_path = ["dialogue_acts.json", "system_acts.json"]
        .iter()
        .map(|n| dir.join(n))
        .find(|p| p.exists())
        .ok_or_else(|| {
            Error::corpus(format!(
                "no dialogue_acts.json or system_acts.json under {}",
                dir.display()
            ))
        })?;
    let data: Value = serde_json::from_reader(std::io::BufReader::new(
        std::fs::File::open(&data_path)
            .map_err(|e| Error::corpus(format!("{}: {e}", data_path.display())))?,
    ))?;
    let acts: Value = serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(
        &acts_path,
    )?))?;

    let mut stats = IngestStats::default();
    let records = load_turns_from_values(&data, &acts, cfg, &mut stats)?;
    let records = split_all(records, &mut stats)?;
    Ok((records, stats))
}
