//! Token-by-token decoder with a generate-vs-slot gate and exactly-once slot
//! masking.
//!
//! Each step advances a unidirectional LSTM on the previous token's
//! embedding, attends over the still-available slots to get both a slot
//! distribution and a pooled slot context, and produces three quantities:
//! p_gen (a logistic gate saying "emit a vocabulary word"), p_slot (masked
//! softmax over available slots), and p_word (softmax over the vocabulary).
//! Selection emits a word when p_gen clears the threshold — or
//! unconditionally once every slot is consumed — and otherwise emits a slot,
//! which is then masked out for the rest of the generation. That mask is the
//! hard mechanism behind the no-repeated-slots guarantee.

use crate::corpus::{AnnotatedResponse, SlotFill, Token, EOS_TOKEN};
use crate::embedding::{EmbeddingParams, SlotTypeVocab, Vocabulary, BOS, EOS};
use crate::encoders::{AttentionParams, StyleBundle};
use crate::error::{Error, Result};
use crate::rnn::{lstm_step, LstmParams, LstmState};
use crate::tape::{glorot, NodeId, ParamId, ParamStore, Tape};
use crate::config::ModelConfig;
use rand::Rng;
use serde::Serialize;

/// The five parameter groups of the generate-vs-slot gate:
/// p_gen = σ(w_h·h_t + w_s·s_semantics + w_c·s_context + w_gt·s_noise + b).
#[derive(Debug, Clone)]
pub struct GenGateParams {
    pub w_h: ParamId,
    pub w_s: ParamId,
    pub w_c: ParamId,
    pub w_gt: ParamId,
    /// Scalar bias, stored as a length-1 vector.
    pub b: ParamId,
}

#[derive(Debug, Clone)]
pub struct DecoderParams {
    /// Initial-state layer: tanh(w_init [s_context ; s_semantics] + b_init),
    /// split into the LSTM's h and c halves.
    pub w_init: ParamId,
    pub b_init: ParamId,
    pub cell: LstmParams,
    /// Additive attention of the decoder state over slot embeddings.
    pub slot_attn: AttentionParams,
    pub gate: GenGateParams,
    /// Output layer over [h_t ; slot context ; s_semantics].
    pub w_out: ParamId,
    pub b_out: ParamId,
    pub d_dec: usize,
    pub d_model: usize,
}

impl DecoderParams {
    pub fn new(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        vocab_size: usize,
        rng: &mut impl Rng,
    ) -> DecoderParams {
        let d_ctx = cfg.d_context_effective();
        let init_in = d_ctx + cfg.d_enc_out;
        let w_init = store.add_mat_uniform(
            "decoder.init.w",
            2 * cfg.d_dec,
            init_in,
            glorot(2 * cfg.d_dec, init_in),
            rng,
        );
        let b_init = store.add_vec_zeros("decoder.init.b", 2 * cfg.d_dec);
        let cell = LstmParams::new(store, "decoder.cell", cfg.d_model, cfg.d_dec, rng);
        let slot_attn = AttentionParams::new(
            store,
            "decoder.slot_attn",
            cfg.d_model,
            cfg.d_dec,
            cfg.d_attn,
            rng,
        );
        let gate = GenGateParams {
            w_h: store.add_vec_uniform("decoder.gate.h", cfg.d_dec, glorot(1, cfg.d_dec), rng),
            w_s: store.add_vec_uniform(
                "decoder.gate.s",
                cfg.d_enc_out,
                glorot(1, cfg.d_enc_out),
                rng,
            ),
            w_c: store.add_vec_uniform("decoder.gate.c", d_ctx, glorot(1, d_ctx), rng),
            w_gt: store.add_vec_uniform(
                "decoder.gate.gt",
                cfg.d_response_noise,
                glorot(1, cfg.d_response_noise),
                rng,
            ),
            b: store.add_vec_zeros("decoder.gate.b", 1),
        };
        let out_in = cfg.d_dec + cfg.d_model + cfg.d_enc_out;
        let w_out = store.add_mat_uniform(
            "decoder.out.w",
            vocab_size,
            out_in,
            glorot(vocab_size, out_in),
            rng,
        );
        let b_out = store.add_vec_zeros("decoder.out.b", vocab_size);
        DecoderParams {
            w_init,
            b_init,
            cell,
            slot_attn,
            gate,
            w_out,
            b_out,
            d_dec: cfg.d_dec,
            d_model: cfg.d_model,
        }
    }
}

/// Per-slot availability. Consumption is one-way within a generation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotMask {
    available: Vec<bool>,
}

impl SlotMask {
    pub fn all_available(n: usize) -> SlotMask {
        SlotMask {
            available: vec![true; n],
        }
    }

    pub fn len(&self) -> usize {
        self.available.len()
    }

    pub fn is_empty(&self) -> bool {
        self.available.is_empty()
    }

    pub fn is_available(&self, i: usize) -> bool {
        self.available.get(i).copied().unwrap_or(false)
    }

    pub fn any_available(&self) -> bool {
        self.available.iter().any(|&a| a)
    }

    pub fn n_available(&self) -> usize {
        self.available.iter().filter(|&&a| a).count()
    }

    pub fn as_bools(&self) -> &[bool] {
        &self.available
    }

    pub fn consume(&mut self, i: usize) -> Result<()> {
        match self.available.get_mut(i) {
            Some(a) if *a => {
                *a = false;
                Ok(())
            }
            Some(_) => Err(Error::invalid(format!("slot {i} consumed twice"))),
            None => Err(Error::invalid(format!("slot {i} out of range"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecoderState {
    pub h: NodeId,
    pub c: NodeId,
    pub t: usize,
    pub mask: SlotMask,
}

/// Tape handles for one step's three outputs.
#[derive(Debug, Clone, Copy)]
pub struct StepNodes {
    /// Length-1 node holding p_gen.
    pub p_gen: NodeId,
    /// Length = total slot count; exactly 0 at consumed slots. Length-0 node
    /// when the instance has no slots.
    pub p_slot: NodeId,
    pub p_word: NodeId,
}

/// Plain numbers extracted from [`StepNodes`] for selection and losses.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeStepOutput {
    pub p_gen: f64,
    pub p_slot: Vec<f64>,
    pub p_word: Vec<f64>,
}

impl StepNodes {
    pub fn extract(&self, tape: &Tape) -> DecodeStepOutput {
        DecodeStepOutput {
            p_gen: tape.value(self.p_gen)[0],
            p_slot: tape.value(self.p_slot).to_vec(),
            p_word: tape.value(self.p_word).to_vec(),
        }
    }
}

pub fn init_decoder_state(
    tape: &mut Tape,
    params: &DecoderParams,
    bundle: &StyleBundle,
    n_slots: usize,
) -> DecoderState {
    let cat = tape.concat(&[bundle.s_context_style, bundle.s_semantics]);
    let pre = tape.affine(params.w_init, params.b_init, cat);
    let act = tape.tanh(pre);
    let h = tape.slice(act, 0, params.d_dec);
    let c = tape.slice(act, params.d_dec, params.d_dec);
    DecoderState {
        h,
        c,
        t: 0,
        mask: SlotMask::all_available(n_slots),
    }
}

/// One decoding step. Reads (never writes) the state's slot mask; the caller
/// consumes a slot after selection.
pub fn decode_step(
    tape: &mut Tape,
    params: &DecoderParams,
    state: &DecoderState,
    prev_embedded: NodeId,
    bundle: &StyleBundle,
    slot_embeddings: &[NodeId],
) -> (StepNodes, DecoderState) {
    assert_eq!(slot_embeddings.len(), state.mask.len());
    let next = lstm_step(
        tape,
        &params.cell,
        LstmState {
            h: state.h,
            c: state.c,
        },
        prev_embedded,
    );

    let (p_slot, slot_ctx) = if slot_embeddings.is_empty() {
        (tape.zeros(0), tape.zeros(params.d_model))
    } else {
        let a = &params.slot_attn;
        let wq = tape.matvec(a.w_c, next.h);
        let scores: Vec<NodeId> = slot_embeddings
            .iter()
            .map(|&s| {
                let ws = tape.matvec(a.w_h, s);
                let sum = tape.add(ws, wq);
                let pre = tape.add_bias(a.b, sum);
                let act = tape.tanh(pre);
                tape.dot_param(a.v, act)
            })
            .collect();
        let score_vec = tape.concat(&scores);
        let p_slot = tape.masked_softmax(score_vec, state.mask.as_bools().to_vec());
        // All-consumed masks give a zero weight vector, hence a zero context.
        let slot_ctx = tape.weighted_sum(p_slot, slot_embeddings);
        (p_slot, slot_ctx)
    };

    let word_in = tape.concat(&[next.h, slot_ctx, bundle.s_semantics]);
    let logits = tape.affine(params.w_out, params.b_out, word_in);
    let p_word = tape.softmax(logits);

    let g = &params.gate;
    let dh = tape.dot_param(g.w_h, next.h);
    let ds = tape.dot_param(g.w_s, bundle.s_semantics);
    let dc = tape.dot_param(g.w_c, bundle.s_context_style);
    let dgt = tape.dot_param(g.w_gt, bundle.s_response_noise);
    let gate_sum = tape.add_many(&[dh, ds, dc, dgt]);
    let gate_pre = tape.add_bias(g.b, gate_sum);
    let p_gen = tape.sigmoid(gate_pre);

    let nodes = StepNodes {
        p_gen,
        p_slot,
        p_word,
    };
    let new_state = DecoderState {
        h: next.h,
        c: next.c,
        t: state.t + 1,
        mask: state.mask.clone(),
    };
    (nodes, new_state)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMode {
    Greedy,
    Sample,
}

/// What one step emitted: a vocabulary word index or a slot index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Choice {
    Word(usize),
    Slot(usize),
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = probs.iter().sum();
    let draw = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            acc += p;
            if draw < acc {
                return i;
            }
        }
    }
    last_positive
}

/// Threshold rule: word branch when p_gen > δ or no slot remains available;
/// slot branch otherwise. The caller must mark the returned slot consumed.
pub fn select_token(
    out: &DecodeStepOutput,
    delta: f64,
    mode: SelectionMode,
    rng: &mut impl Rng,
) -> Choice {
    let slots_open = out.p_slot.iter().any(|&p| p > 0.0);
    if out.p_gen > delta || !slots_open {
        let id = match mode {
            SelectionMode::Greedy => argmax(&out.p_word),
            SelectionMode::Sample => categorical(&out.p_word, rng),
        };
        Choice::Word(id)
    } else {
        let i = match mode {
            SelectionMode::Greedy => argmax(&out.p_slot),
            SelectionMode::Sample => categorical(&out.p_slot, rng),
        };
        Choice::Slot(i)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Word,
    Slot,
}

/// One row of the exportable generation trace.
#[derive(Debug, Clone, Serialize)]
pub struct TraceStep {
    pub p_gen: f64,
    pub branch: Branch,
    pub slots_available: usize,
}

#[derive(Debug, Clone)]
pub struct Generated {
    /// Emitted tokens, always closed with the end marker.
    pub tokens: Vec<Token>,
    /// Set when generation stopped with at least one slot unconsumed.
    pub semantic_failure: bool,
    pub trace: Vec<TraceStep>,
}

impl Generated {
    /// Package the generation against its instance metadata. The result may
    /// reference only a subset of `slots` when generation failed to place
    /// them all; `semantic_failure` records that.
    pub fn into_response(
        self,
        dialogue_id: &str,
        turn_index: usize,
        sub_index: usize,
        dialogue_action: &str,
        slots: Vec<SlotFill>,
    ) -> AnnotatedResponse {
        AnnotatedResponse {
            dialogue_id: dialogue_id.to_string(),
            turn_index,
            sub_index,
            dialogue_action: dialogue_action.to_string(),
            tokens: self.tokens,
            slots,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GenerationSettings {
    pub delta: f64,
    pub max_len: usize,
    pub mode: SelectionMode,
}

/// Decode until the end marker or the length cap. Each slot is referenced at
/// most once; stopping with available slots left sets the failure flag.
#[allow(clippy::too_many_arguments)]
pub fn generate(
    tape: &mut Tape,
    params: &DecoderParams,
    emb: &EmbeddingParams,
    vocab: &Vocabulary,
    slot_types: &SlotTypeVocab,
    bundle: &StyleBundle,
    slots: &[SlotFill],
    settings: &GenerationSettings,
    rng: &mut impl Rng,
) -> Result<Generated> {
    let slot_embeddings: Vec<NodeId> = slots
        .iter()
        .map(|s| {
            let e = emb.embed_slot(tape, vocab, slot_types, s)?;
            Ok(tape.matvec(emb.w_slot_proj, e))
        })
        .collect::<Result<_>>()?;

    let mut state = init_decoder_state(tape, params, bundle, slots.len());
    let mut prev = emb.embed_word_id(tape, BOS);
    let mut tokens = Vec::new();
    let mut trace = Vec::new();
    let mut ended = false;

    while state.t < settings.max_len {
        let (nodes, mut next_state) =
            decode_step(tape, params, &state, prev, bundle, &slot_embeddings);
        let out = nodes.extract(tape);
        let choice = select_token(&out, settings.delta, settings.mode, rng);
        match choice {
            Choice::Word(id) => {
                trace.push(TraceStep {
                    p_gen: out.p_gen,
                    branch: Branch::Word,
                    slots_available: next_state.mask.n_available(),
                });
                if id == EOS {
                    tokens.push(Token::word(EOS_TOKEN));
                    ended = true;
                    break;
                }
                tokens.push(Token::word(vocab.word(id)));
                prev = emb.embed_word_id(tape, id);
            }
            Choice::Slot(i) => {
                next_state.mask.consume(i)?;
                trace.push(TraceStep {
                    p_gen: out.p_gen,
                    branch: Branch::Slot,
                    slots_available: next_state.mask.n_available(),
                });
                tokens.push(Token::Slot { slot: i });
                prev = slot_embeddings[i];
            }
        }
        state = next_state;
    }
    let semantic_failure = if ended {
        state.mask.any_available()
    } else {
        // Length cap hit: close the sequence ourselves.
        tokens.push(Token::word(EOS_TOKEN));
        state.mask.any_available()
    };
    Ok(Generated {
        tokens,
        semantic_failure,
        trace,
    })
}

/// Run the decoder along a ground-truth response, producing one step output
/// per position. The slot mask follows the ground truth's slot references;
/// `forcing[t]` says whether step t's input is the previous ground-truth
/// token (true) or the model's own previous greedy choice (false). Step 0
/// always starts from the sequence-start marker, so `forcing[0]` is ignored.
/// `noise_per_step`, when given, replaces the bundle's noise vector at each
/// step (the noise-dropout augmentation zeroes a prefix of steps this way).
#[allow(clippy::too_many_arguments)]
pub fn teacher_forced_pass(
    tape: &mut Tape,
    params: &DecoderParams,
    emb: &EmbeddingParams,
    vocab: &Vocabulary,
    slot_types: &SlotTypeVocab,
    bundle: &StyleBundle,
    gt: &AnnotatedResponse,
    forcing: &[bool],
    noise_per_step: Option<&[NodeId]>,
    delta: f64,
) -> Result<Vec<StepNodes>> {
    let len = gt.tokens.len();
    if len == 0 {
        return Err(Error::invalid("empty ground truth"));
    }
    if forcing.len() != len {
        return Err(Error::invalid(format!(
            "forcing plan length {} != ground truth length {len}",
            forcing.len()
        )));
    }
    if let Some(ns) = noise_per_step {
        if ns.len() != len {
            return Err(Error::invalid(format!(
                "noise schedule length {} != ground truth length {len}",
                ns.len()
            )));
        }
    }
    let slot_embeddings: Vec<NodeId> = gt
        .slots
        .iter()
        .map(|s| {
            let e = emb.embed_slot(tape, vocab, slot_types, s)?;
            Ok(tape.matvec(emb.w_slot_proj, e))
        })
        .collect::<Result<_>>()?;

    let mut state = init_decoder_state(tape, params, bundle, gt.slots.len());
    let mut outputs = Vec::with_capacity(len);
    let mut prev = emb.embed_word_id(tape, BOS);
    let mut rng_unused = rand::rngs::mock::StepRng::new(0, 0);
    for t in 0..len {
        let step_bundle = StyleBundle {
            s_semantics: bundle.s_semantics,
            s_context_style: bundle.s_context_style,
            s_response_noise: noise_per_step
                .map_or(bundle.s_response_noise, |ns| ns[t]),
            noise_weights: None,
        };
        let (nodes, mut next_state) =
            decode_step(tape, params, &state, prev, &step_bundle, &slot_embeddings);
        // Next step's input: ground truth under forcing, else the model's
        // own greedy choice (input only — the mask still follows the gt).
        if t + 1 < len {
            prev = if forcing[t + 1] {
                match &gt.tokens[t] {
                    Token::Word(w) => emb.embed_word_id(tape, vocab.index_of(w)),
                    Token::Slot { slot } => slot_embeddings[*slot],
                }
            } else {
                let out = nodes.extract(tape);
                match select_token(&out, delta, SelectionMode::Greedy, &mut rng_unused) {
                    Choice::Word(id) => emb.embed_word_id(tape, id),
                    Choice::Slot(i) => slot_embeddings[i],
                }
            };
        }
        if let Token::Slot { slot } = &gt.tokens[t] {
            next_state.mask.consume(*slot)?;
        }
        outputs.push(nodes);
        state = next_state;
    }
    Ok(outputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;
    use ndarray::Array1;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::desk_scale(Variant::GtCtxprotoSlotsTmpl);
        cfg.d_word = 5;
        cfg.d_slot = 4;
        cfg.d_model = 5;
        cfg.d_hidden = 4;
        cfg.d_enc_out = 4;
        cfg.d_dec = 4;
        cfg.d_attn = 3;
        cfg.d_context_style = 3;
        cfg.d_response_noise = 3;
        cfg.max_len = 12;
        cfg
    }

    fn tiny_vocab() -> Vocabulary {
        let words = ["the", "a", "hotel", "is", "nice", "what", "about"];
        let mut tokens: Vec<String> = crate::embedding::RESERVED
            .iter()
            .map(|s| s.to_string())
            .collect();
        tokens.extend(words.iter().map(|s| s.to_string()));
        serde_json::from_str(&serde_json::to_string(&tokens).unwrap()).unwrap()
    }

    struct Fixture {
        store: ParamStore,
        cfg: ModelConfig,
        vocab: Vocabulary,
        slot_types: SlotTypeVocab,
        emb: EmbeddingParams,
        dec: DecoderParams,
    }

    fn fixture(seed: u64) -> Fixture {
        let cfg = tiny_cfg();
        let vocab = tiny_vocab();
        let slot_types = SlotTypeVocab::from(vec!["name".to_string(), "area".to_string()]);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb = EmbeddingParams::new(&mut store, &cfg, &vocab, &slot_types, None, &mut rng);
        let dec = DecoderParams::new(&mut store, &cfg, vocab.len(), &mut rng);
        Fixture {
            store,
            cfg,
            vocab,
            slot_types,
            emb,
            dec,
        }
    }

    fn leaf_bundle(tape: &mut Tape, cfg: &ModelConfig, scale: f64) -> StyleBundle {
        let d_ctx = cfg.d_context_effective();
        StyleBundle {
            s_semantics: tape.leaf(Array1::from_shape_fn(cfg.d_enc_out, |i| {
                (i as f64 * 0.7 + scale).sin()
            })),
            s_context_style: tape.leaf(Array1::from_shape_fn(d_ctx, |i| {
                (i as f64 * 0.3 - scale).cos()
            })),
            s_response_noise: tape.leaf(Array1::from_shape_fn(cfg.d_response_noise, |i| {
                (i as f64 + scale) * 0.1
            })),
            noise_weights: None,
        }
    }

    fn zero_bundle(tape: &mut Tape, cfg: &ModelConfig) -> StyleBundle {
        StyleBundle {
            s_semantics: tape.zeros(cfg.d_enc_out),
            s_context_style: tape.zeros(cfg.d_context_effective()),
            s_response_noise: tape.zeros(cfg.d_response_noise),
            noise_weights: None,
        }
    }

    fn sample_slots() -> Vec<SlotFill> {
        vec![
            SlotFill::new("name", 0, &["acorn", "house"]),
            SlotFill::new("area", 0, &["north"]),
        ]
    }

    #[test]
    fn init_state_is_tanh_of_bias_for_zero_bundle() {
        let f = fixture(31);
        let dec = &f.dec;
        let mut tape = Tape::new(&f.store);
        let bundle = zero_bundle(&mut tape, &f.cfg);
        let st = init_decoder_state(&mut tape, dec, &bundle, 2);
        let b = f.store.vec(dec.b_init);
        for i in 0..f.cfg.d_dec {
            assert!((tape.value(st.h)[i] - b[i].tanh()).abs() < 1e-12);
            assert!((tape.value(st.c)[i] - b[f.cfg.d_dec + i].tanh()).abs() < 1e-12);
        }
        assert_eq!(st.t, 0);
        assert_eq!(st.mask.n_available(), 2);

        let bundle2 = leaf_bundle(&mut tape, &f.cfg, 0.4);
        let s1 = init_decoder_state(&mut tape, dec, &bundle2, 0);
        let s2 = init_decoder_state(&mut tape, dec, &bundle2, 0);
        assert_eq!(tape.value(s1.h), tape.value(s2.h));
        let bundle3 = leaf_bundle(&mut tape, &f.cfg, 1.9);
        let s3 = init_decoder_state(&mut tape, dec, &bundle3, 0);
        assert_ne!(tape.value(s1.h), tape.value(s3.h));
    }

    #[test]
    fn lone_available_slot_takes_all_the_mass() {
        let f = fixture(32);
        let mut tape = Tape::new(&f.store);
        let bundle = leaf_bundle(&mut tape, &f.cfg, 0.2);
        let slots = sample_slots();
        let slot_embeddings: Vec<NodeId> = slots
            .iter()
            .map(|s| {
                let e = f
                    .emb
                    .embed_slot(&mut tape, &f.vocab, &f.slot_types, s)
                    .unwrap();
                tape.matvec(f.emb.w_slot_proj, e)
            })
            .collect();
        let mut st = init_decoder_state(&mut tape, &f.dec, &bundle, 2);
        st.mask.consume(0).unwrap();
        let prev = f.emb.embed_word_id(&mut tape, BOS);
        let (nodes, _) = decode_step(&mut tape, &f.dec, &st, prev, &bundle, &slot_embeddings);
        let out = nodes.extract(&tape);
        assert_eq!(out.p_slot[0], 0.0);
        assert!((out.p_slot[1] - 1.0).abs() < 1e-12);
        assert!(out.p_gen > 0.0 && out.p_gen < 1.0);
        let word_sum: f64 = out.p_word.iter().sum();
        assert!((word_sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn word_distribution_matches_independent_computation() {
        let f = fixture(33);
        let dec = &f.dec;
        let mut tape = Tape::new(&f.store);
        let bundle = leaf_bundle(&mut tape, &f.cfg, 0.8);
        let mut slots = sample_slots();
        slots.push(SlotFill::new("name", 1, &["marina"]));
        let slot_embeddings: Vec<NodeId> = slots
            .iter()
            .map(|s| {
                let e = f
                    .emb
                    .embed_slot(&mut tape, &f.vocab, &f.slot_types, s)
                    .unwrap();
                tape.matvec(f.emb.w_slot_proj, e)
            })
            .collect();
        let st = init_decoder_state(&mut tape, dec, &bundle, 3);
        let prev = f.emb.embed_word_id(&mut tape, 5);
        let (nodes, new_state) = decode_step(&mut tape, dec, &st, prev, &bundle, &slot_embeddings);
        let out = nodes.extract(&tape);

        // Oracle: softmax(W_out [h ; Σ p_slot_i e_i ; s_sem] + b_out).
        let h = tape.value(new_state.h).clone();
        let mut ctx = Array1::<f64>::zeros(f.cfg.d_model);
        for (i, &e) in slot_embeddings.iter().enumerate() {
            ctx = ctx + &(tape.value(e) * out.p_slot[i]);
        }
        let s_sem = tape.value(bundle.s_semantics).clone();
        let cat: Vec<f64> = h
            .iter()
            .chain(ctx.iter())
            .chain(s_sem.iter())
            .copied()
            .collect();
        let logits = f.store.mat(dec.w_out).dot(&Array1::from_vec(cat)) + f.store.vec(dec.b_out);
        let m = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let exps = logits.mapv(|x| (x - m).exp());
        let z = exps.sum();
        for (i, &e) in exps.iter().enumerate() {
            assert!(
                (out.p_word[i] - e / z).abs() < 1e-6,
                "word {i}: {} vs {}",
                out.p_word[i],
                e / z
            );
        }
        let slot_sum: f64 = out.p_slot.iter().sum();
        assert!((slot_sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn threshold_rule_and_forced_word_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let out = DecodeStepOutput {
            p_gen: 0.6,
            p_slot: vec![0.3, 0.7],
            p_word: vec![0.1, 0.2, 0.7],
        };
        assert_eq!(
            select_token(&out, 0.5, SelectionMode::Greedy, &mut rng),
            Choice::Word(2)
        );
        let out2 = DecodeStepOutput {
            p_gen: 0.4,
            ..out.clone()
        };
        assert_eq!(
            select_token(&out2, 0.5, SelectionMode::Greedy, &mut rng),
            Choice::Slot(1)
        );
        // All slots consumed: word branch even at p_gen ≈ 0.
        let out3 = DecodeStepOutput {
            p_gen: 1e-9,
            p_slot: vec![0.0, 0.0],
            p_word: vec![0.9, 0.05, 0.05],
        };
        assert_eq!(
            select_token(&out3, 0.5, SelectionMode::Greedy, &mut rng),
            Choice::Word(0)
        );
        // Sampling never picks a masked slot.
        let out4 = DecodeStepOutput {
            p_gen: 0.1,
            p_slot: vec![0.0, 1.0],
            p_word: vec![0.5, 0.5],
        };
        for _ in 0..50 {
            assert_eq!(
                select_token(&out4, 0.5, SelectionMode::Sample, &mut rng),
                Choice::Slot(1)
            );
        }
    }

    #[test]
    fn no_slot_is_ever_referenced_twice() {
        for seed in 0..20 {
            let f = fixture(100 + seed);
            let mut tape = Tape::new(&f.store);
            let bundle = leaf_bundle(&mut tape, &f.cfg, seed as f64 * 0.31);
            let slots = sample_slots();
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 7 + 1);
            let settings = GenerationSettings {
                delta: 0.5,
                max_len: f.cfg.max_len,
                mode: SelectionMode::Sample,
            };
            let gen = generate(
                &mut tape,
                &f.dec,
                &f.emb,
                &f.vocab,
                &f.slot_types,
                &bundle,
                &slots,
                &settings,
                &mut rng,
            )
            .unwrap();
            let mut seen = std::collections::HashSet::new();
            for t in &gen.tokens {
                if let Token::Slot { slot } = t {
                    assert!(seen.insert(*slot), "slot {slot} repeated (seed {seed})");
                }
            }
            assert_eq!(gen.tokens.last(), Some(&Token::word(EOS_TOKEN)));
            // One trace row per decided step; the length-cap end marker is
            // appended without one.
            assert!(
                gen.trace.len() == gen.tokens.len()
                    || gen.trace.len() + 1 == gen.tokens.len()
            );
        }
    }

    #[test]
    fn empty_slot_set_generates_pure_words() {
        let f = fixture(35);
        let mut tape = Tape::new(&f.store);
        let bundle = leaf_bundle(&mut tape, &f.cfg, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let settings = GenerationSettings {
            delta: 0.5,
            max_len: 10,
            mode: SelectionMode::Sample,
        };
        let gen = generate(
            &mut tape,
            &f.dec,
            &f.emb,
            &f.vocab,
            &f.slot_types,
            &bundle,
            &[],
            &settings,
            &mut rng,
        )
        .unwrap();
        assert!(!gen.semantic_failure);
        assert!(gen
            .tokens
            .iter()
            .all(|t| matches!(t, Token::Word(_))));
        assert!(gen.trace.iter().all(|s| s.branch == Branch::Word));
    }

    #[test]
    fn word_only_bias_leaves_slots_unconsumed_and_flags_failure() {
        let mut f = fixture(36);
        // Pin the gate open: p_gen ≈ 1 at every step, so no slot is emitted.
        let gate_b = f.dec.gate.b;
        f.store.get_mut(gate_b).as_flat_slice_mut()[0] = 25.0;
        let mut tape = Tape::new(&f.store);
        let bundle = leaf_bundle(&mut tape, &f.cfg, 1.2);
        let slots = sample_slots();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let settings = GenerationSettings {
            delta: 0.5,
            max_len: 8,
            mode: SelectionMode::Greedy,
        };
        let gen = generate(
            &mut tape,
            &f.dec,
            &f.emb,
            &f.vocab,
            &f.slot_types,
            &bundle,
            &slots,
            &settings,
            &mut rng,
        )
        .unwrap();
        assert!(gen.semantic_failure);
        assert!(gen.tokens.iter().all(|t| matches!(t, Token::Word(_))));
        assert_eq!(gen.tokens.last(), Some(&Token::word(EOS_TOKEN)));
    }

    #[test]
    fn gate_gradients_pass_finite_difference() {
        let Fixture {
            mut store,
            cfg,
            vocab,
            slot_types,
            emb,
            dec,
        } = fixture(37);
        let err = crate::tape::grad_check(&mut store, 1e-5, |_ps, tape| {
            let bundle = leaf_bundle(tape, &cfg, 0.6);
            let slots = sample_slots();
            let slot_embeddings: Vec<NodeId> = slots
                .iter()
                .map(|s| {
                    let e = emb.embed_slot(tape, &vocab, &slot_types, s).unwrap();
                    tape.matvec(emb.w_slot_proj, e)
                })
                .collect();
            let st = init_decoder_state(tape, &dec, &bundle, 2);
            let prev = emb.embed_word_id(tape, BOS);
            let (nodes, _) = decode_step(tape, &dec, &st, prev, &bundle, &slot_embeddings);
            nodes.p_gen
        });
        assert!(err < 1e-4, "relative error {err}");
    }

    fn gt_with_two_slots() -> AnnotatedResponse {
        AnnotatedResponse {
            dialogue_id: "d1".into(),
            turn_index: 2,
            sub_index: 0,
            dialogue_action: "hotel-inform".into(),
            tokens: vec![
                Token::word("the"),
                Token::Slot { slot: 0 },
                Token::word("is"),
                Token::word("nice"),
                Token::Slot { slot: 1 },
                Token::word(EOS_TOKEN),
            ],
            slots: sample_slots(),
        }
    }

    #[test]
    fn teacher_forcing_follows_the_ground_truth_mask() {
        let f = fixture(38);
        let gt = gt_with_two_slots();
        let mut tape = Tape::new(&f.store);
        let bundle = leaf_bundle(&mut tape, &f.cfg, 0.3);
        let forcing = vec![true; gt.tokens.len()];
        let outs = teacher_forced_pass(
            &mut tape,
            &f.dec,
            &f.emb,
            &f.vocab,
            &f.slot_types,
            &bundle,
            &gt,
            &forcing,
            None,
            0.5,
        )
        .unwrap();
        assert_eq!(outs.len(), gt.tokens.len());

        // Slot 0 is consumed after step 1, slot 1 after step 4; a consumed
        // slot's probability is exactly zero from the next step on.
        let p_slot_at = |t: usize| tape.value(outs[t].p_slot).to_vec();
        assert!(p_slot_at(0).iter().all(|&p| p > 0.0));
        assert!(p_slot_at(1).iter().all(|&p| p > 0.0));
        assert_eq!(p_slot_at(2)[0], 0.0);
        assert!(p_slot_at(2)[1] > 0.0);
        assert!((p_slot_at(4)[1] - 1.0).abs() < 1e-12);
        assert_eq!(p_slot_at(5), vec![0.0, 0.0]);

        // Determinism under a fixed forcing plan.
        let mut tape2 = Tape::new(&f.store);
        let bundle2 = leaf_bundle(&mut tape2, &f.cfg, 0.3);
        let outs2 = teacher_forced_pass(
            &mut tape2,
            &f.dec,
            &f.emb,
            &f.vocab,
            &f.slot_types,
            &bundle2,
            &gt,
            &forcing,
            None,
            0.5,
        )
        .unwrap();
        for (a, b) in outs.iter().zip(&outs2) {
            assert_eq!(tape.value(a.p_gen), tape2.value(b.p_gen));
            assert_eq!(tape.value(a.p_word), tape2.value(b.p_word));
        }
    }

    #[test]
    fn unforced_steps_feed_back_the_models_own_choice() {
        let f = fixture(39);
        let gt = gt_with_two_slots();
        let mut tape = Tape::new(&f.store);
        let bundle = leaf_bundle(&mut tape, &f.cfg, 0.9);
        let all_forced = vec![true; gt.tokens.len()];
        let none_forced: Vec<bool> = (0..gt.tokens.len()).map(|t| t == 0).collect();
        let a = teacher_forced_pass(
            &mut tape, &f.dec, &f.emb, &f.vocab, &f.slot_types, &bundle, &gt, &all_forced, None, 0.5,
        )
        .unwrap();
        let b = teacher_forced_pass(
            &mut tape, &f.dec, &f.emb, &f.vocab, &f.slot_types, &bundle, &gt, &none_forced, None, 0.5,
        )
        .unwrap();
        // With random parameters the model's own trajectory diverges from
        // the forced one at some step.
        let diverged = a.iter().zip(&b).any(|(x, y)| {
            let px = tape.value(x.p_gen)[0];
            let py = tape.value(y.p_gen)[0];
            (px - py).abs() > 1e-12
        });
        assert!(diverged);
    }

    #[test]
    fn trace_serializes_to_json() {
        let step = TraceStep {
            p_gen: 0.75,
            branch: Branch::Slot,
            slots_available: 3,
        };
        let js = serde_json::to_string(&step).unwrap();
        assert!(js.contains("\"branch\":\"slot\""));
    }
}
