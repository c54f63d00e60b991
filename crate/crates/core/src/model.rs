//! Full model assembly: embeddings, the three conditioning encoders, and the
//! gated decoder, wired per ablation variant.
//!
//! Variants drop encoders rather than reshape the decoder: a disabled
//! encoder's style vector is the zero vector of its configured width, so the
//! decoder's parameter shapes stay comparable across ablations. Checkpoints
//! store every parameter tensor by name next to the config, vocabularies,
//! iteration counter, and training RNG state, and loading rebuilds the exact
//! model and verifies the tensor sets match.

use crate::config::ModelConfig;
use crate::corpus::{AnnotatedResponse, DialogueContext};
use crate::decoder::{self, DecoderParams, Generated, GenerationSettings, StepNodes};
use crate::embedding::{EmbeddingParams, SlotTypeVocab, Vocabulary};
use crate::encoders::{ContextEncoder, NoiseEncoder, SemanticEncoder, StyleBundle};
use crate::error::{Error, Result};
use crate::tape::{NodeId, PValue, ParamStore, Tape};
use ndarray::{Array1, Array2};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Where the response-noise vector comes from.
#[derive(Debug, Clone, Copy)]
pub enum NoiseSource<'a> {
    /// Encode the ground truth (training, and guided evaluation).
    GroundTruth(&'a AnnotatedResponse),
    /// Externally supplied simplex weights over the response prototypes.
    Weights(&'a [f64]),
    /// The zero vector (likelihood-style evaluation).
    Zero,
}

/// Inverted dropout on embedded inputs; active only during training.
pub struct Dropout<'a> {
    pub p: f64,
    pub rng: &'a mut dyn RngCore,
}

/// A [`StyleBundle`] plus the attention weights behind it, for export.
#[derive(Debug, Clone)]
pub struct BundleOutput {
    pub bundle: StyleBundle,
    pub semantic_weights: Option<NodeId>,
    pub context_weights: Option<NodeId>,
    pub noise_weights: Option<NodeId>,
}

#[derive(Debug, Clone)]
pub struct P2Net {
    pub cfg: ModelConfig,
    pub vocab: Vocabulary,
    pub slot_types: SlotTypeVocab,
    pub emb: EmbeddingParams,
    pub semantic: Option<SemanticEncoder>,
    pub context: ContextEncoder,
    pub noise: Option<NoiseEncoder>,
    pub decoder: DecoderParams,
}

impl P2Net {
    pub fn new(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        vocab: &Vocabulary,
        slot_types: &SlotTypeVocab,
        pretrained: Option<&HashMap<String, Vec<f64>>>,
        rng: &mut impl Rng,
    ) -> Result<P2Net> {
        cfg.validate()?;
        let emb = EmbeddingParams::new(store, cfg, vocab, slot_types, pretrained, rng);
        let semantic = cfg
            .variant
            .uses_template()
            .then(|| SemanticEncoder::new(store, cfg, rng));
        let context = ContextEncoder::new(store, cfg, rng);
        let noise = cfg
            .variant
            .uses_noise()
            .then(|| NoiseEncoder::new(store, cfg, rng));
        let decoder = DecoderParams::new(store, cfg, vocab.len(), rng);
        Ok(P2Net {
            cfg: cfg.clone(),
            vocab: vocab.clone(),
            slot_types: slot_types.clone(),
            emb,
            semantic,
            context,
            noise,
            decoder,
        })
    }

    fn drop_nodes(
        &self,
        tape: &mut Tape,
        nodes: Vec<NodeId>,
        dropout: &mut Option<&mut Dropout>,
    ) -> Vec<NodeId> {
        let Some(d) = dropout.as_deref_mut() else {
            return nodes;
        };
        if d.p <= 0.0 {
            return nodes;
        }
        let keep = 1.0 - d.p;
        nodes
            .into_iter()
            .map(|n| {
                let len = tape.value(n).len();
                let mask = Array1::from_shape_fn(len, |_| {
                    if d.rng.gen_bool(keep) {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                let m = tape.leaf(mask);
                tape.mul(n, m)
            })
            .collect()
    }

    /// Build the three conditioning vectors. `template` may be None only for
    /// variants that do not encode it; extra inputs a variant ignores are
    /// accepted silently so every ablation runs on the same instances.
    pub fn bundle(
        &self,
        tape: &mut Tape,
        template: Option<&AnnotatedResponse>,
        context: &DialogueContext,
        noise: NoiseSource,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<BundleOutput> {
        let (s_semantics, semantic_weights) = match &self.semantic {
            Some(sem) => {
                let t = template.ok_or_else(|| {
                    Error::invalid(format!(
                        "variant {} encodes the template, but none was given",
                        self.cfg.variant
                    ))
                })?;
                let embedded =
                    self.emb
                        .embed_tokens(tape, &self.vocab, &self.slot_types, &t.tokens, &t.slots)?;
                let embedded = self.drop_nodes(tape, embedded, &mut dropout);
                let out = sem.encode(tape, &embedded)?;
                (out.pooled, Some(out.weights))
            }
            None => (tape.zeros(self.cfg.d_enc_out), None),
        };

        let turns: Vec<Vec<NodeId>> = context
            .turns
            .iter()
            .map(|turn| {
                let embedded = self.emb.embed_words(tape, &self.vocab, &turn.tokens);
                self.drop_nodes(tape, embedded, &mut dropout)
            })
            .collect();
        let ctx_out = self.context.encode(tape, &turns)?;

        let (s_response_noise, noise_weights_node, noise_weights) = match &self.noise {
            Some(ne) => match noise {
                NoiseSource::GroundTruth(gt) => {
                    let embedded = self.emb.embed_tokens(
                        tape,
                        &self.vocab,
                        &self.slot_types,
                        &gt.tokens,
                        &gt.slots,
                    )?;
                    let embedded = self.drop_nodes(tape, embedded, &mut dropout);
                    let out = ne.encode(tape, &embedded)?;
                    let w = tape.value(out.weights).to_vec();
                    (out.noise, Some(out.weights), Some(w))
                }
                NoiseSource::Weights(w) => {
                    if w.iter().any(|&x| x < 0.0) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                        return Err(Error::invalid(
                            "prototype weights must be non-negative and sum to 1",
                        ));
                    }
                    let node = ne.from_weights(tape, w)?;
                    (node, None, Some(w.to_vec()))
                }
                NoiseSource::Zero => (ne.zeroed(tape), None, None),
            },
            None => (tape.zeros(self.cfg.d_response_noise), None, None),
        };

        Ok(BundleOutput {
            bundle: StyleBundle {
                s_semantics,
                s_context_style: ctx_out.style,
                s_response_noise,
                noise_weights,
            },
            semantic_weights,
            context_weights: ctx_out.weights,
            noise_weights: noise_weights_node,
        })
    }

    /// Teacher-forced pass for one training instance. `noise_zero[t]` forces
    /// the zero noise vector at step t (the noise-dropout augmentation).
    #[allow(clippy::too_many_arguments)]
    pub fn training_forward(
        &self,
        tape: &mut Tape,
        template: Option<&AnnotatedResponse>,
        context: &DialogueContext,
        gt: &AnnotatedResponse,
        forcing: &[bool],
        noise_zero: &[bool],
        delta: f64,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<Vec<StepNodes>> {
        let out = self.bundle(
            tape,
            template,
            context,
            NoiseSource::GroundTruth(gt),
            dropout.as_deref_mut(),
        )?;
        let zero = tape.zeros(self.cfg.d_response_noise);
        let noise_per_step: Vec<NodeId> = noise_zero
            .iter()
            .map(|&z| if z { zero } else { out.bundle.s_response_noise })
            .collect();
        decoder::teacher_forced_pass(
            tape,
            &self.decoder,
            &self.emb,
            &self.vocab,
            &self.slot_types,
            &out.bundle,
            gt,
            forcing,
            Some(&noise_per_step),
            delta,
        )
    }

    /// Generate one response for an input (template with slots to place,
    /// plus context), under the given noise source.
    pub fn generate_one(
        &self,
        tape: &mut Tape,
        template: &AnnotatedResponse,
        context: &DialogueContext,
        noise: NoiseSource,
        settings: &GenerationSettings,
        rng: &mut impl Rng,
    ) -> Result<Generated> {
        let out = self.bundle(tape, Some(template), context, noise, None)?;
        decoder::generate(
            tape,
            &self.decoder,
            &self.emb,
            &self.vocab,
            &self.slot_types,
            &out.bundle,
            &template.slots,
            settings,
            rng,
        )
    }
}

/// Exact state of a counter-based RNG, for resumable training.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: Vec<u8>,
    pub word_pos: u128,
    pub stream: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> RngState {
        RngState {
            seed: rng.get_seed().to_vec(),
            word_pos: rng.get_word_pos(),
            stream: rng.get_stream(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let seed: [u8; 32] = self
            .seed
            .as_slice()
            .try_into()
            .map_err(|_| Error::checkpoint("RNG seed must be 32 bytes"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        Ok(rng)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"P2NC";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelConfig,
    vocab: Vocabulary,
    slot_types: SlotTypeVocab,
    iteration: u64,
    rng: RngState,
    tensor_count: usize,
}

fn write_bytes(w: &mut impl Write, b: &[u8]) -> Result<()> {
    w.write_all(b)?;
    Ok(())
}

fn read_exactly<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

/// Write the full model state: config, vocabularies, iteration, RNG state,
/// and every parameter tensor keyed by name.
pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    model: &P2Net,
    iteration: u64,
    rng: &RngState,
) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write_bytes(&mut w, CHECKPOINT_MAGIC)?;
    write_bytes(&mut w, &CHECKPOINT_VERSION.to_le_bytes())?;
    let header = CheckpointHeader {
        model: model.cfg.clone(),
        vocab: model.vocab.clone(),
        slot_types: model.slot_types.clone(),
        iteration,
        rng: rng.clone(),
        tensor_count: store.ids().count(),
    };
    let header_json = serde_json::to_vec(&header)?;
    write_bytes(&mut w, &(header_json.len() as u64).to_le_bytes())?;
    write_bytes(&mut w, &header_json)?;
    for id in store.ids() {
        let name = store.name(id).as_bytes();
        write_bytes(&mut w, &(name.len() as u16).to_le_bytes())?;
        write_bytes(&mut w, name)?;
        match store.get(id) {
            PValue::Vec(v) => {
                write_bytes(&mut w, &[0u8])?;
                write_bytes(&mut w, &(v.len() as u64).to_le_bytes())?;
                write_bytes(&mut w, &0u64.to_le_bytes())?;
                for &x in v.iter() {
                    write_bytes(&mut w, &x.to_le_bytes())?;
                }
            }
            PValue::Mat(m) => {
                write_bytes(&mut w, &[1u8])?;
                write_bytes(&mut w, &(m.nrows() as u64).to_le_bytes())?;
                write_bytes(&mut w, &(m.ncols() as u64).to_le_bytes())?;
                for &x in m.iter() {
                    write_bytes(&mut w, &x.to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub struct LoadedCheckpoint {
    pub store: ParamStore,
    pub model: P2Net,
    pub iteration: u64,
    pub rng: RngState,
}

/// Rebuild the model from a checkpoint. The file's tensor set must exactly
/// match the reconstructed model's parameters, names and shapes included.
pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let magic = read_exactly::<4>(&mut r)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::checkpoint(format!(
            "{}: not a model checkpoint",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(read_exactly::<4>(&mut r)?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let header_len = u64::from_le_bytes(read_exactly::<8>(&mut r)?) as usize;
    let mut header_json = vec![0u8; header_len];
    r.read_exact(&mut header_json)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_json)?;

    let mut store = ParamStore::new();
    // Structure only; every value is overwritten from the file below.
    let mut init_rng = ChaCha8Rng::seed_from_u64(0);
    let model = P2Net::new(
        &mut store,
        &header.model,
        &header.vocab,
        &header.slot_types,
        None,
        &mut init_rng,
    )?;

    let all_ids: Vec<_> = store.ids().collect();
    let mut seen = vec![false; all_ids.len()];
    for _ in 0..header.tensor_count {
        let name_len = u16::from_le_bytes(read_exactly::<2>(&mut r)?) as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::checkpoint("tensor name is not UTF-8"))?;
        let kind = read_exactly::<1>(&mut r)?[0];
        let rows = u64::from_le_bytes(read_exactly::<8>(&mut r)?) as usize;
        let cols = u64::from_le_bytes(read_exactly::<8>(&mut r)?) as usize;
        let count = if kind == 0 { rows } else { rows * cols };
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(f64::from_le_bytes(read_exactly::<8>(&mut r)?));
        }
        let id = store.lookup(&name).ok_or_else(|| {
            Error::checkpoint(format!("unexpected tensor {name:?} in checkpoint"))
        })?;
        let idx = all_ids.iter().position(|&i| i == id).expect("id from ids()");
        if seen[idx] {
            return Err(Error::checkpoint(format!("duplicate tensor {name:?}")));
        }
        seen[idx] = true;
        match (kind, store.get_mut(id)) {
            (0, PValue::Vec(v)) => {
                if v.len() != rows {
                    return Err(Error::checkpoint(format!(
                        "tensor {name:?}: expected length {}, file has {rows}",
                        v.len()
                    )));
                }
                *v = Array1::from_vec(data);
            }
            (1, PValue::Mat(m)) => {
                if m.nrows() != rows || m.ncols() != cols {
                    return Err(Error::checkpoint(format!(
                        "tensor {name:?}: expected {}x{}, file has {rows}x{cols}",
                        m.nrows(),
                        m.ncols()
                    )));
                }
                *m = Array2::from_shape_vec((rows, cols), data)
                    .map_err(|e| Error::checkpoint(format!("tensor {name:?}: {e}")))?;
            }
            _ => {
                return Err(Error::checkpoint(format!(
                    "tensor {name:?}: kind does not match the model's parameter"
                )))
            }
        }
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        let name = store.name(all_ids[missing]);
        return Err(Error::checkpoint(format!(
            "checkpoint is missing tensor {name:?}"
        )));
    }
    Ok(LoadedCheckpoint {
        store,
        model,
        iteration: header.iteration,
        rng: header.rng,
    })
}
