//! Decoding strategies: noise-sampled greedy generation plus the beam-search
//! baseline family, and surface realization of generated responses.
//!
//! The model's own diversity mechanism draws prototype weights from a
//! Dirichlet and decodes greedily once per draw, keeping template, slots and
//! context fixed. The beam baselines instead search the joint token space
//! {slots} ∪ {words}, scoring slots by (1 − p_gen)·p_slot and words by
//! p_gen·p_word with no gate threshold, one slot mask per beam. Batched
//! decoding over instances is embarrassingly parallel: everything here takes
//! the parameter store read-only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::config::{DecodingConfig, Strategy};
use crate::corpus::{AnnotatedResponse, CorpusRecord, SlotFill, Token, EOS_TOKEN};
use crate::decoder::{
    decode_step, init_decoder_state, Choice, DecodeStepOutput, DecoderState, GenerationSettings,
    SelectionMode, SlotMask,
};
use crate::embedding::{BOS, EOS};
use crate::encoders::StyleBundle;
use crate::error::{Error, Result};
use crate::model::{NoiseSource, P2Net};
use crate::tape::{NodeId, ParamStore, Tape};

/// Draw simplex weights over the response prototypes from a symmetric
/// Dirichlet(α, ..., α). Small α gives sparse draws that commit to one
/// prototype's style.
pub fn sample_prototype_weights(k: usize, alpha: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::invalid("prototype count must be at least 1"));
    }
    if alpha <= 0.0 {
        return Err(Error::invalid("Dirichlet concentration must be positive"));
    }
    if k == 1 {
        return Ok(vec![1.0]);
    }
    let dir = Dirichlet::new_with_size(alpha, k)
        .map_err(|e| Error::invalid(format!("Dirichlet setup failed: {e}")))?;
    Ok(dir.sample(rng))
}

/// One generated response plus the noise weights behind it (None when the
/// sample was decoded with the zero noise vector or the model has no noise
/// encoder).
#[derive(Debug, Clone)]
pub struct GenerationSample {
    pub noise_weights: Option<Vec<f64>>,
    pub response: AnnotatedResponse,
    pub semantic_failure: bool,
}

/// N generations for one instance. Template, slots and context are fixed
/// across samples; only the noise weights differ.
#[derive(Debug, Clone)]
pub struct GenerationBatch {
    pub instance_id: String,
    pub samples: Vec<GenerationSample>,
}

/// N independent noise-weight draws, one greedy decode per draw.
pub fn generate_diverse(
    store: &ParamStore,
    model: &P2Net,
    instance: &CorpusRecord,
    cfg: &DecodingConfig,
) -> Result<GenerationBatch> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let settings = GenerationSettings {
        delta: cfg.delta,
        max_len: cfg.max_len,
        mode: SelectionMode::Greedy,
    };
    let k = model.cfg.k_response_prototypes;
    let mut samples = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        let weights = if cfg.zero_noise || model.noise.is_none() {
            None
        } else {
            Some(sample_prototype_weights(k, cfg.alpha, &mut rng)?)
        };
        let noise = match &weights {
            Some(w) => NoiseSource::Weights(w),
            None => NoiseSource::Zero,
        };
        let mut tape = Tape::new(store);
        let gen = model.generate_one(
            &mut tape,
            &instance.response,
            &instance.context,
            noise,
            &settings,
            &mut rng,
        )?;
        let semantic_failure = gen.semantic_failure;
        let response = gen.into_response(
            &instance.response.dialogue_id,
            instance.response.turn_index,
            i,
            &instance.response.dialogue_action,
            instance.response.slots.clone(),
        );
        samples.push(GenerationSample {
            noise_weights: weights,
            response,
            semantic_failure,
        });
    }
    Ok(GenerationBatch {
        instance_id: instance.id(),
        samples,
    })
}

/// One ranked hypothesis from a beam-family search. `tokens` is always
/// closed with the end marker; `normalized` is `logprob` divided by the
/// number of probability-scored tokens.
#[derive(Debug, Clone)]
pub struct BeamHypothesis {
    pub tokens: Vec<Token>,
    pub logprob: f64,
    pub normalized: f64,
    pub semantic_failure: bool,
}

#[derive(Clone)]
struct BeamState {
    state: DecoderState,
    prev: NodeId,
    tokens: Vec<Token>,
    /// Number of probability-scored tokens (excludes an end marker appended
    /// when the length cap closes the sequence).
    scored: usize,
    logprob: f64,
    finished: bool,
    /// Perturbed score for stochastic beam search; unused elsewhere.
    gumbel: f64,
}

impl BeamState {
    fn normalized(&self) -> f64 {
        if self.scored == 0 {
            0.0
        } else {
            self.logprob / self.scored as f64
        }
    }
}

fn embed_slots(tape: &mut Tape, model: &P2Net, slots: &[SlotFill]) -> Result<Vec<NodeId>> {
    slots
        .iter()
        .map(|s| {
            let e = model
                .emb
                .embed_slot(tape, &model.vocab, &model.slot_types, s)?;
            Ok(tape.matvec(model.emb.w_slot_proj, e))
        })
        .collect()
}

/// Conditioning for the beam baselines: zero noise vector, so a search is a
/// deterministic function of the checkpoint and instance.
fn prepare(
    tape: &mut Tape,
    model: &P2Net,
    instance: &CorpusRecord,
) -> Result<(StyleBundle, Vec<NodeId>)> {
    let out = model.bundle(
        tape,
        Some(&instance.response),
        &instance.context,
        NoiseSource::Zero,
        None,
    )?;
    let slot_embeddings = embed_slots(tape, model, &instance.response.slots)?;
    Ok((out.bundle, slot_embeddings))
}

fn root_beam(tape: &mut Tape, model: &P2Net, bundle: &StyleBundle, n_slots: usize) -> BeamState {
    let state = init_decoder_state(tape, &model.decoder, bundle, n_slots);
    let prev = model.emb.embed_word_id(tape, BOS);
    BeamState {
        state,
        prev,
        tokens: Vec::new(),
        scored: 0,
        logprob: 0.0,
        finished: false,
        gumbel: 0.0,
    }
}

/// The joint token space at one step: every available slot scored by
/// (1 − p_gen)·p_slot and every vocabulary word by p_gen·p_word.
fn joint_candidates(out: &DecodeStepOutput, mask: &SlotMask) -> Vec<(Choice, f64)> {
    let mut cands = Vec::with_capacity(out.p_word.len() + out.p_slot.len());
    for (i, &p) in out.p_slot.iter().enumerate() {
        if mask.is_available(i) {
            let joint = (1.0 - out.p_gen) * p;
            if joint > 0.0 {
                cands.push((Choice::Slot(i), joint.ln()));
            }
        }
    }
    for (w, &p) in out.p_word.iter().enumerate() {
        let joint = out.p_gen * p;
        if joint > 0.0 {
            cands.push((Choice::Word(w), joint.ln()));
        }
    }
    cands
}

fn extend(
    tape: &mut Tape,
    model: &P2Net,
    slot_embeddings: &[NodeId],
    parent: &BeamState,
    stepped: &DecoderState,
    choice: Choice,
    lnp: f64,
) -> Result<BeamState> {
    let mut state = stepped.clone();
    let mut tokens = parent.tokens.clone();
    let (prev, finished) = match choice {
        Choice::Word(w) if w == EOS => {
            tokens.push(Token::word(EOS_TOKEN));
            (parent.prev, true)
        }
        Choice::Word(w) => {
            tokens.push(Token::word(model.vocab.word(w)));
            (model.emb.embed_word_id(tape, w), false)
        }
        Choice::Slot(i) => {
            state.mask.consume(i)?;
            tokens.push(Token::Slot { slot: i });
            (slot_embeddings[i], false)
        }
    };
    Ok(BeamState {
        state,
        prev,
        tokens,
        scored: parent.scored + 1,
        logprob: parent.logprob + lnp,
        finished,
        gumbel: 0.0,
    })
}

/// One synchronized step: expand every active beam over the joint candidate
/// space, rank finished carries and extensions together by length-normalized
/// score minus `penalty`, and keep the best `width`. Returns the new beams
/// and the choices the extensions made (for diversity bookkeeping).
fn advance_beams(
    tape: &mut Tape,
    model: &P2Net,
    bundle: &StyleBundle,
    slot_embeddings: &[NodeId],
    beams: &[BeamState],
    width: usize,
    mut penalty: impl FnMut(&Choice) -> f64,
) -> Result<(Vec<BeamState>, Vec<Choice>)> {
    struct Cand {
        parent: usize,
        ext: Option<(Choice, f64)>,
        score: f64,
    }
    let mut stepped: Vec<Option<DecoderState>> = Vec::with_capacity(beams.len());
    let mut cands: Vec<Cand> = Vec::new();
    for (bi, beam) in beams.iter().enumerate() {
        if beam.finished {
            stepped.push(None);
            cands.push(Cand {
                parent: bi,
                ext: None,
                score: beam.normalized(),
            });
            continue;
        }
        let (nodes, next) = decode_step(
            tape,
            &model.decoder,
            &beam.state,
            beam.prev,
            bundle,
            slot_embeddings,
        );
        let out = nodes.extract(tape);
        for (choice, lnp) in joint_candidates(&out, &next.mask) {
            let score = (beam.logprob + lnp) / (beam.scored + 1) as f64 - penalty(&choice);
            cands.push(Cand {
                parent: bi,
                ext: Some((choice, lnp)),
                score,
            });
        }
        stepped.push(Some(next));
    }
    cands.sort_by(|a, b| b.score.partial_cmp(&a.score).expect("finite beam scores"));
    cands.truncate(width);
    let mut next_beams = Vec::with_capacity(cands.len());
    let mut chosen = Vec::new();
    for c in cands {
        match c.ext {
            None => next_beams.push(beams[c.parent].clone()),
            Some((choice, lnp)) => {
                let proto = stepped[c.parent]
                    .as_ref()
                    .expect("stepped state exists for every active beam");
                next_beams.push(extend(
                    tape,
                    model,
                    slot_embeddings,
                    &beams[c.parent],
                    proto,
                    choice,
                    lnp,
                )?);
                chosen.push(choice);
            }
        }
    }
    Ok((next_beams, chosen))
}

fn finalize(beams: Vec<BeamState>) -> Vec<BeamHypothesis> {
    let mut hyps: Vec<BeamHypothesis> = beams
        .into_iter()
        .map(|mut b| {
            if !b.finished {
                b.tokens.push(Token::word(EOS_TOKEN));
            }
            BeamHypothesis {
                semantic_failure: b.state.mask.any_available(),
                normalized: b.normalized(),
                logprob: b.logprob,
                tokens: b.tokens,
            }
        })
        .collect();
    hyps.sort_by(|a, b| {
        b.normalized
            .partial_cmp(&a.normalized)
            .expect("finite beam scores")
    });
    hyps
}

/// Length-normalized beam search over the joint token space. Selection is
/// fully probabilistic — no gate threshold — which reproduces the known
/// failure mode of near-certain slots crowding the early positions.
pub fn beam_search(
    store: &ParamStore,
    model: &P2Net,
    instance: &CorpusRecord,
    cfg: &DecodingConfig,
) -> Result<Vec<BeamHypothesis>> {
    cfg.validate()?;
    let mut tape = Tape::new(store);
    let (bundle, slot_embeddings) = prepare(&mut tape, model, instance)?;
    let mut beams = vec![root_beam(
        &mut tape,
        model,
        &bundle,
        instance.response.slots.len(),
    )];
    for _ in 0..cfg.max_len {
        if beams.iter().all(|b| b.finished) {
            break;
        }
        let (next, _) = advance_beams(
            &mut tape,
            model,
            &bundle,
            &slot_embeddings,
            &beams,
            cfg.beam_width,
            |_| 0.0,
        )?;
        beams = next;
    }
    Ok(finalize(beams))
}

/// Condition a child's perturbed score so the maximum over siblings equals
/// the parent's: -ln(exp(-t) − exp(-z) + exp(-g')), computed stably.
/// `z` must be the maximum perturbed score among the siblings.
fn conditional_gumbel(t: f64, z: f64, g_prime: f64) -> f64 {
    let u = z - g_prime;
    let v = t - g_prime + (-(-u).exp()).ln_1p();
    t - v.max(0.0) - (-v.abs()).exp().ln_1p()
}

/// Sample `beam_width` distinct sequences via Gumbel-top-k over total
/// sequence log-probabilities: each step perturbs every extension with
/// conditional Gumbel noise and keeps the top scorers, which makes the
/// final beams samples without replacement from the sequence distribution.
pub fn stochastic_beam_search(
    store: &ParamStore,
    model: &P2Net,
    instance: &CorpusRecord,
    cfg: &DecodingConfig,
) -> Result<Vec<BeamHypothesis>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let gumbel = Gumbel::new(0.0, 1.0).expect("valid Gumbel parameters");
    let mut tape = Tape::new(store);
    let (bundle, slot_embeddings) = prepare(&mut tape, model, instance)?;
    let mut beams = vec![root_beam(
        &mut tape,
        model,
        &bundle,
        instance.response.slots.len(),
    )];
    struct Cand {
        parent: usize,
        ext: Option<(Choice, f64)>,
        g: f64,
    }
    for _ in 0..cfg.max_len {
        if beams.iter().all(|b| b.finished) {
            break;
        }
        let mut stepped: Vec<Option<DecoderState>> = Vec::with_capacity(beams.len());
        let mut cands: Vec<Cand> = Vec::new();
        for (bi, beam) in beams.iter().enumerate() {
            if beam.finished {
                stepped.push(None);
                cands.push(Cand {
                    parent: bi,
                    ext: None,
                    g: beam.gumbel,
                });
                continue;
            }
            let (nodes, next) = decode_step(
                &mut tape,
                &model.decoder,
                &beam.state,
                beam.prev,
                &bundle,
                &slot_embeddings,
            );
            let out = nodes.extract(&tape);
            let perturbed: Vec<(Choice, f64, f64)> = joint_candidates(&out, &next.mask)
                .into_iter()
                .map(|(c, lnp)| {
                    let phi = beam.logprob + lnp;
                    (c, lnp, phi + gumbel.sample(&mut rng))
                })
                .collect();
            let z = perturbed
                .iter()
                .map(|&(_, _, g)| g)
                .fold(f64::NEG_INFINITY, f64::max);
            for (c, lnp, gp) in perturbed {
                cands.push(Cand {
                    parent: bi,
                    ext: Some((c, lnp)),
                    g: conditional_gumbel(beam.gumbel, z, gp),
                });
            }
            stepped.push(Some(next));
        }
        cands.sort_by(|a, b| b.g.partial_cmp(&a.g).expect("finite perturbed scores"));
        cands.truncate(cfg.beam_width);
        let mut next_beams = Vec::with_capacity(cands.len());
        for c in cands {
            match c.ext {
                None => next_beams.push(beams[c.parent].clone()),
                Some((choice, lnp)) => {
                    let proto = stepped[c.parent]
                        .as_ref()
                        .expect("stepped state exists for every active beam");
                    let mut child = extend(
                        &mut tape,
                        model,
                        &slot_embeddings,
                        &beams[c.parent],
                        proto,
                        choice,
                        lnp,
                    )?;
                    child.gumbel = c.g;
                    next_beams.push(child);
                }
            }
        }
        beams = next_beams;
    }
    Ok(finalize(beams))
}

/// Beam search over G groups of `beam_width / G` beams each: at every step,
/// group g's candidate scores are reduced by γ for each time a candidate
/// token was already chosen this step by an earlier group.
pub fn diverse_beam_search(
    store: &ParamStore,
    model: &P2Net,
    instance: &CorpusRecord,
    cfg: &DecodingConfig,
) -> Result<Vec<BeamHypothesis>> {
    cfg.validate()?;
    let group_width = cfg.beam_width / cfg.groups;
    let mut tape = Tape::new(store);
    let (bundle, slot_embeddings) = prepare(&mut tape, model, instance)?;
    let root = root_beam(&mut tape, model, &bundle, instance.response.slots.len());
    let mut groups: Vec<Vec<BeamState>> = vec![vec![root]; cfg.groups];
    for _ in 0..cfg.max_len {
        if groups.iter().flatten().all(|b| b.finished) {
            break;
        }
        let mut counts: Vec<(Choice, usize)> = Vec::new();
        for group in groups.iter_mut() {
            if group.iter().all(|b| b.finished) {
                continue;
            }
            let (next, chosen) = advance_beams(
                &mut tape,
                model,
                &bundle,
                &slot_embeddings,
                group,
                group_width,
                |c| {
                    let n = counts
                        .iter()
                        .find(|(cc, _)| cc == c)
                        .map_or(0, |&(_, n)| n);
                    cfg.gamma * n as f64
                },
            )?;
            *group = next;
            for ch in chosen {
                match counts.iter_mut().find(|(cc, _)| *cc == ch) {
                    Some((_, n)) => *n += 1,
                    None => counts.push((ch, 1)),
                }
            }
        }
    }
    let mut hyps = Vec::new();
    for group in groups {
        hyps.extend(finalize(group));
    }
    Ok(hyps)
}

/// Dispatch an instance through the configured strategy. Beam-family
/// strategies return their hypotheses as the batch's samples; they carry no
/// noise weights because the baselines condition on the zero noise vector.
pub fn run_strategy(
    store: &ParamStore,
    model: &P2Net,
    instance: &CorpusRecord,
    cfg: &DecodingConfig,
) -> Result<GenerationBatch> {
    match cfg.strategy {
        Strategy::Greedy => {
            let mut one = cfg.clone();
            one.n_samples = 1;
            generate_diverse(store, model, instance, &one)
        }
        Strategy::SampleProtos => generate_diverse(store, model, instance, cfg),
        Strategy::Beam | Strategy::StochasticBeam | Strategy::DiverseBeam => {
            let hyps = match cfg.strategy {
                Strategy::Beam => beam_search(store, model, instance, cfg)?,
                Strategy::StochasticBeam => stochastic_beam_search(store, model, instance, cfg)?,
                _ => diverse_beam_search(store, model, instance, cfg)?,
            };
            let samples = hyps
                .into_iter()
                .enumerate()
                .map(|(i, h)| GenerationSample {
                    noise_weights: None,
                    semantic_failure: h.semantic_failure,
                    response: AnnotatedResponse {
                        dialogue_id: instance.response.dialogue_id.clone(),
                        turn_index: instance.response.turn_index,
                        sub_index: i,
                        dialogue_action: instance.response.dialogue_action.clone(),
                        tokens: h.tokens,
                        slots: instance.response.slots.clone(),
                    },
                })
                .collect();
            Ok(GenerationBatch {
                instance_id: instance.id(),
                samples,
            })
        }
    }
}

/// Surface string for a token stream: slot references replaced by their
/// value tokens, everything joined with single spaces, end marker dropped.
pub fn surface(tokens: &[Token], slots: &[SlotFill]) -> Result<String> {
    let mut parts: Vec<&str> = Vec::new();
    for tok in tokens {
        match tok {
            Token::Word(w) if w == EOS_TOKEN => {}
            Token::Word(w) => parts.push(w),
            Token::Slot { slot } => {
                let fill = slots.get(*slot).ok_or_else(|| {
                    Error::invalid(format!(
                        "token references slot {slot}, but the response has only {} slot fills",
                        slots.len()
                    ))
                })?;
                for v in &fill.value_tokens {
                    parts.push(v);
                }
            }
        }
    }
    Ok(parts.join(" "))
}

/// Realize a delexicalized response as its surface string.
pub fn relexicalize(r: &AnnotatedResponse) -> Result<String> {
    surface(&r.tokens, &r.slots)
}

/// One line of generation output, ready for JSON-lines serialization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub instance_id: String,
    pub strategy: String,
    pub sample_index: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_weights: Option<Vec<f64>>,
    pub tokens: Vec<Token>,
    pub surface: String,
    pub semantic_failure: bool,
}

/// Flatten a batch into output records, one per sample.
pub fn generation_records(
    batch: &GenerationBatch,
    strategy: Strategy,
) -> Result<Vec<GenerationRecord>> {
    batch
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            Ok(GenerationRecord {
                instance_id: batch.instance_id.clone(),
                strategy: strategy.name().to_string(),
                sample_index: i,
                noise_weights: s.noise_weights.clone(),
                tokens: s.response.tokens.clone(),
                surface: relexicalize(&s.response)?,
                semantic_failure: s.semantic_failure,
            })
        })
        .collect()
}
