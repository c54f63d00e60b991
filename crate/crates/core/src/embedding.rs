//! Word and slot embeddings.
//!
//! Words go through a lookup table (optionally initialized from a pretrained
//! vector file) and a projection to the model width. A slot token is embedded
//! as the sum of three parts: a learned slot-type embedding, a parameter-free
//! sinusoidal code of its position AMONG SAME-TYPE slots, and a gated CBOW of
//! its value — mean of the value tokens' word embeddings, projected to slot
//! width and multiplied elementwise by a logistic gate computed from the type
//! embedding. The gate lets training decide per type how much the value
//! matters (a phone number's digits carry no style; a food type does).

use crate::config::ModelConfig;
use crate::corpus::{CorpusRecord, SlotFill, Token};
use crate::error::{Error, Result};
use crate::tape::{glorot, NodeId, ParamId, ParamStore, Tape};
use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

/// Reserved vocabulary indices.
pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Token ↔ index table with fixed reserved entries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Vocabulary> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::corpus(
                "vocabulary must start with the reserved tokens <pad>, <unk>, <s>, </s>",
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::corpus(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Collect words from responses (surface words, slot values) and their
    /// contexts; keep those seen at least `min_freq` times.
    pub fn from_records<'a>(
        records: impl Iterator<Item = &'a CorpusRecord>,
        min_freq: usize,
    ) -> Vocabulary {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for r in records {
            for t in &r.response.tokens {
                if let Token::Word(w) = t {
                    *counts.entry(w).or_default() += 1;
                }
            }
            for s in &r.response.slots {
                for w in &s.value_tokens {
                    *counts.entry(w).or_default() += 1;
                }
            }
            for turn in &r.context.turns {
                for w in &turn.tokens {
                    *counts.entry(w).or_default() += 1;
                }
            }
        }
        let mut kept: Vec<&str> = counts
            .into_iter()
            .filter(|&(w, c)| c >= min_freq && !RESERVED.contains(&w))
            .map(|(w, _)| w)
            .collect();
        kept.sort_unstable();
        let tokens: Vec<String> = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(String::from))
            .collect();
        Vocabulary::from_tokens(tokens).expect("reserved prefix constructed here")
    }

    /// Index of a word; unknown words map to [`UNK`].
    pub fn index_of(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn word(&self, idx: usize) -> &str {
        &self.tokens[idx]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved entries always present
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Vocabulary> {
        Vocabulary::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Vec<String> {
        v.tokens
    }
}

/// Slot-type ↔ index table; index 0 is the learned unknown-type row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct SlotTypeVocab {
    types: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

pub const UNK_SLOT_TYPE: &str = "<unk_type>";

impl SlotTypeVocab {
    pub fn from_records<'a>(records: impl Iterator<Item = &'a CorpusRecord>) -> SlotTypeVocab {
        let mut seen: Vec<&str> = records
            .flat_map(|r| r.response.slots.iter().map(|s| s.slot_type.as_str()))
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        seen.retain(|&t| t != UNK_SLOT_TYPE);
        let types: Vec<String> = std::iter::once(UNK_SLOT_TYPE.to_string())
            .chain(seen.into_iter().map(String::from))
            .collect();
        SlotTypeVocab::from(types)
    }

    pub fn index_of(&self, slot_type: &str) -> usize {
        self.index.get(slot_type).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl From<Vec<String>> for SlotTypeVocab {
    fn from(mut types: Vec<String>) -> SlotTypeVocab {
        if types.first().map(String::as_str) != Some(UNK_SLOT_TYPE) {
            types.insert(0, UNK_SLOT_TYPE.to_string());
        }
        let index = types
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        SlotTypeVocab { types, index }
    }
}

impl From<SlotTypeVocab> for Vec<String> {
    fn from(v: SlotTypeVocab) -> Vec<String> {
        v.types
    }
}

/// Parameter-free sinusoidal position code: pair i of the output holds
/// (sin, cos) of pos / 10000^(2i/d).
pub fn sinusoidal_position(pos: usize, d: usize) -> Result<Array1<f64>> {
    if d % 2 != 0 {
        return Err(Error::config(format!(
            "sinusoidal position width must be even, got {d}"
        )));
    }
    let mut out = Array1::zeros(d);
    for i in 0..d / 2 {
        let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    Ok(out)
}

/// Parameter handles for the embedding layers.
#[derive(Debug, Clone)]
pub struct EmbeddingParams {
    pub word_table: ParamId,
    pub slot_type_table: ParamId,
    /// d_slot × d_word: projects the CBOW mean into slot space.
    pub w_cbow: ParamId,
    /// d_slot × d_slot (+ bias): gate logits from the type embedding.
    pub w_gate: ParamId,
    pub b_gate: ParamId,
    /// Projections into the shared model width.
    pub w_word_proj: ParamId,
    pub w_slot_proj: ParamId,
}

impl EmbeddingParams {
    /// Register all embedding parameters. `pretrained` rows override the
    /// random word-table initialization where available. The padding row is
    /// zeroed and frozen.
    pub fn new(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        vocab: &Vocabulary,
        slot_types: &SlotTypeVocab,
        pretrained: Option<&HashMap<String, Vec<f64>>>,
        rng: &mut impl Rng,
    ) -> EmbeddingParams {
        let mut words = Array2::from_shape_fn((vocab.len(), cfg.d_word), |_| {
            rng.gen_range(-0.1..0.1)
        });
        if let Some(vectors) = pretrained {
            for i in 0..vocab.len() {
                if let Some(v) = vectors.get(vocab.word(i)) {
                    if v.len() == cfg.d_word {
                        for (j, &x) in v.iter().enumerate() {
                            words[(i, j)] = x;
                        }
                    }
                }
            }
        }
        words.row_mut(PAD).fill(0.0);
        let word_table = store.add_mat("embedding.words", words);
        store.freeze_row(word_table, PAD);

        let slot_type_table = store.add_mat_uniform(
            "embedding.slot_types",
            slot_types.len(),
            cfg.d_slot,
            0.1,
            rng,
        );
        let w_cbow = store.add_mat_uniform(
            "embedding.cbow",
            cfg.d_slot,
            cfg.d_word,
            glorot(cfg.d_slot, cfg.d_word),
            rng,
        );
        let w_gate = store.add_mat_uniform(
            "embedding.gate.w",
            cfg.d_slot,
            cfg.d_slot,
            glorot(cfg.d_slot, cfg.d_slot),
            rng,
        );
        let b_gate = store.add_vec_zeros("embedding.gate.b", cfg.d_slot);
        let w_word_proj = store.add_mat_uniform(
            "embedding.word_proj",
            cfg.d_model,
            cfg.d_word,
            glorot(cfg.d_model, cfg.d_word),
            rng,
        );
        let w_slot_proj = store.add_mat_uniform(
            "embedding.slot_proj",
            cfg.d_model,
            cfg.d_slot,
            glorot(cfg.d_model, cfg.d_slot),
            rng,
        );
        EmbeddingParams {
            word_table,
            slot_type_table,
            w_cbow,
            w_gate,
            b_gate,
            w_word_proj,
            w_slot_proj,
        }
    }

    /// Raw word embedding (no projection).
    pub fn word_raw(&self, tape: &mut Tape, vocab: &Vocabulary, word: &str) -> NodeId {
        tape.row(self.word_table, vocab.index_of(word))
    }

    /// Embed a word by vocabulary index into the model width.
    pub fn embed_word_id(&self, tape: &mut Tape, id: usize) -> NodeId {
        let e = tape.row(self.word_table, id);
        tape.matvec(self.w_word_proj, e)
    }

    /// Slot embedding in slot space: type + position + gate ⊙ cbow(value).
    pub fn embed_slot(
        &self,
        tape: &mut Tape,
        vocab: &Vocabulary,
        slot_types: &SlotTypeVocab,
        slot: &SlotFill,
    ) -> Result<NodeId> {
        let type_emb = tape.row(self.slot_type_table, slot_types.index_of(&slot.slot_type));
        let d = tape.value(type_emb).len();
        let position = tape.leaf(sinusoidal_position(slot.type_position, d)?);
        let gate_logits = tape.affine(self.w_gate, self.b_gate, type_emb);
        let gate = tape.sigmoid(gate_logits);
        let cbow = if slot.value_tokens.is_empty() {
            tape.zeros(d)
        } else {
            let rows: Vec<usize> = slot
                .value_tokens
                .iter()
                .map(|w| vocab.index_of(w))
                .collect();
            let mean = tape.row_average(self.word_table, rows);
            tape.matvec(self.w_cbow, mean)
        };
        let gated = tape.mul(gate, cbow);
        Ok(tape.add_many(&[type_emb, position, gated]))
    }

    /// Embed one token into the shared model width.
    pub fn embed_token(
        &self,
        tape: &mut Tape,
        vocab: &Vocabulary,
        slot_types: &SlotTypeVocab,
        token: &Token,
        slots: &[SlotFill],
    ) -> Result<NodeId> {
        match token {
            Token::Word(w) => {
                let e = self.word_raw(tape, vocab, w);
                Ok(tape.matvec(self.w_word_proj, e))
            }
            Token::Slot { slot } => {
                let fill = slots.get(*slot).ok_or_else(|| {
                    Error::invalid(format!("slot reference {slot} out of range"))
                })?;
                let e = self.embed_slot(tape, vocab, slot_types, fill)?;
                Ok(tape.matvec(self.w_slot_proj, e))
            }
        }
    }

    /// Embed a full token sequence; output length equals input length.
    pub fn embed_tokens(
        &self,
        tape: &mut Tape,
        vocab: &Vocabulary,
        slot_types: &SlotTypeVocab,
        tokens: &[Token],
        slots: &[SlotFill],
    ) -> Result<Vec<NodeId>> {
        tokens
            .iter()
            .map(|t| self.embed_token(tape, vocab, slot_types, t, slots))
            .collect()
    }

    /// Embed a plain word sequence (context turns).
    pub fn embed_words(
        &self,
        tape: &mut Tape,
        vocab: &Vocabulary,
        words: &[String],
    ) -> Vec<NodeId> {
        words
            .iter()
            .map(|w| {
                let e = self.word_raw(tape, vocab, w);
                tape.matvec(self.w_word_proj, e)
            })
            .collect()
    }
}

/// Read a GloVe-style text file: one token per line, followed by its vector
/// components. Lines with the wrong arity are skipped.
pub fn load_word_vectors(path: &Path, d: usize) -> Result<HashMap<String, Vec<f64>>> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::config(format!("word vectors {}: {e}", path.display())))?;
    let mut out = HashMap::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line?;
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        let values: Vec<f64> = parts.filter_map(|p| p.parse().ok()).collect();
        if values.len() == d {
            out.insert(word.to_string(), values);
        }
    }
    Ok(out)
}
