//! The three conditioning encoders: template semantics, context style, and
//! response paraphrasing noise.
//!
//! All three share one additive-attention shape — score each key against a
//! query through a tanh layer, softmax, pool — but own disjoint parameters.
//! The semantic encoder attends over its own hidden states; the other two
//! attend over small banks of learnable prototype vectors, which bottlenecks
//! what they can express to a convex combination of K rows.

use crate::config::{ContextMode, ModelConfig};
use crate::error::{Error, Result};
use crate::rnn::{lstm_run, BiLstmParams, EncoderOutput, LstmParams};
use crate::tape::{glorot, NodeId, ParamId, ParamStore, Tape};
use ndarray::Array1;
use rand::Rng;

/// Additive attention: score_t = v · tanh(W_h h_t + W_c query + b).
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub w_h: ParamId,
    pub w_c: ParamId,
    pub b: ParamId,
    pub v: ParamId,
}

impl AttentionParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        key_width: usize,
        query_width: usize,
        d_attn: usize,
        rng: &mut impl Rng,
    ) -> AttentionParams {
        let w_h = store.add_mat_uniform(
            &format!("{name}.w_h"),
            d_attn,
            key_width,
            glorot(d_attn, key_width),
            rng,
        );
        let w_c = store.add_mat_uniform(
            &format!("{name}.w_c"),
            d_attn,
            query_width,
            glorot(d_attn, query_width),
            rng,
        );
        let b = store.add_vec_zeros(&format!("{name}.b"), d_attn);
        let v = store.add_vec_uniform(&format!("{name}.v"), d_attn, glorot(1, d_attn), rng);
        AttentionParams { w_h, w_c, b, v }
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.w_h, self.w_c, self.b, self.v]
    }
}

/// Softmax-pooled additive attention over `keys` with a fixed `query`.
/// Returns (weights over keys, pooled vector).
pub fn attend(
    tape: &mut Tape,
    p: &AttentionParams,
    keys: &[NodeId],
    query: NodeId,
) -> (NodeId, NodeId) {
    assert!(!keys.is_empty(), "attention over an empty key set");
    let wq = tape.matvec(p.w_c, query);
    let scores: Vec<NodeId> = keys
        .iter()
        .map(|&h| {
            let wh = tape.matvec(p.w_h, h);
            let sum = tape.add(wh, wq);
            let pre = tape.add_bias(p.b, sum);
            let act = tape.tanh(pre);
            tape.dot_param(p.v, act)
        })
        .collect();
    let score_vec = tape.concat(&scores);
    let weights = tape.softmax(score_vec);
    let pooled = tape.weighted_sum(weights, keys);
    (weights, pooled)
}

/// A bank of K learnable style prototypes, stored as a K × width matrix.
#[derive(Debug, Clone)]
pub struct PrototypeBank {
    pub table: ParamId,
    pub k: usize,
    pub width: usize,
}

impl PrototypeBank {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        k: usize,
        width: usize,
        rng: &mut impl Rng,
    ) -> PrototypeBank {
        let table = store.add_mat_uniform(name, k, width, glorot(k, width), rng);
        PrototypeBank { table, k, width }
    }

    pub fn rows(&self, tape: &mut Tape) -> Vec<NodeId> {
        (0..self.k).map(|i| tape.row(self.table, i)).collect()
    }

    /// Weighted combination with weights supplied as plain numbers (sampled
    /// or forced), not produced by attention.
    pub fn combine_fixed(&self, tape: &mut Tape, weights: &[f64]) -> Result<NodeId> {
        if weights.len() != self.k {
            return Err(Error::invalid(format!(
                "expected {} prototype weights, got {}",
                self.k,
                weights.len()
            )));
        }
        let w = tape.leaf(Array1::from_vec(weights.to_vec()));
        let rows = self.rows(tape);
        Ok(tape.weighted_sum(w, &rows))
    }
}

/// Template encoder: Bi-RNN, then attention over its own hidden states with
/// the final state as query.
#[derive(Debug, Clone)]
pub struct SemanticEncoder {
    pub rnn: BiLstmParams,
    pub attn: AttentionParams,
}

#[derive(Debug, Clone)]
pub struct SemanticEncoding {
    /// The pooled response semantic vector.
    pub pooled: NodeId,
    /// Attention weights over template positions (for export/analysis).
    pub weights: NodeId,
    pub enc: EncoderOutput,
}

impl SemanticEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> SemanticEncoder {
        SemanticEncoder {
            rnn: BiLstmParams::new(
                store,
                "semantic.rnn",
                cfg.d_model,
                cfg.d_hidden,
                cfg.d_enc_out,
                rng,
            ),
            attn: AttentionParams::new(
                store,
                "semantic.attn",
                cfg.d_enc_out,
                cfg.d_enc_out,
                cfg.d_attn,
                rng,
            ),
        }
    }

    pub fn encode(&self, tape: &mut Tape, embedded: &[NodeId]) -> Result<SemanticEncoding> {
        if embedded.is_empty() {
            return Err(Error::invalid("semantic encoder given an empty template"));
        }
        let enc = crate::rnn::bilstm_run(tape, &self.rnn, embedded);
        let (weights, pooled) = attend(tape, &self.attn, &enc.hidden, enc.h_end);
        Ok(SemanticEncoding {
            pooled,
            weights,
            enc,
        })
    }
}

/// Hierarchical context encoder: a shared per-turn Bi-RNN produces one vector
/// per turn; a single-direction turn-level RNN consumes them oldest first;
/// its final state either feeds the decoder directly (raw mode) or queries
/// the context prototype bank (prototype mode).
#[derive(Debug, Clone)]
pub struct ContextEncoder {
    pub mode: ContextMode,
    pub turn_rnn: Option<BiLstmParams>,
    pub turn_level: Option<LstmParams>,
    pub bank: Option<PrototypeBank>,
    pub attn: Option<AttentionParams>,
    d_out: usize,
}

#[derive(Debug, Clone)]
pub struct ContextEncoding {
    /// The context style vector handed to the decoder.
    pub style: NodeId,
    /// Prototype attention weights (prototype mode only).
    pub weights: Option<NodeId>,
}

impl ContextEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> ContextEncoder {
        let mode = cfg.variant.context_mode();
        let d_out = cfg.d_context_effective();
        if mode == ContextMode::Off {
            return ContextEncoder {
                mode,
                turn_rnn: None,
                turn_level: None,
                bank: None,
                attn: None,
                d_out,
            };
        }
        let turn_rnn = BiLstmParams::new(
            store,
            "context.turn_rnn",
            cfg.d_model,
            cfg.d_hidden,
            cfg.d_enc_out,
            rng,
        );
        let turn_level = LstmParams::new(
            store,
            "context.turn_level",
            cfg.d_enc_out,
            cfg.d_enc_out,
            rng,
        );
        let (bank, attn) = if mode == ContextMode::Proto {
            (
                Some(PrototypeBank::new(
                    store,
                    "context.protos",
                    cfg.k_context_prototypes,
                    cfg.d_context_style,
                    rng,
                )),
                Some(AttentionParams::new(
                    store,
                    "context.attn",
                    cfg.d_context_style,
                    cfg.d_enc_out,
                    cfg.d_attn,
                    rng,
                )),
            )
        } else {
            (None, None)
        };
        ContextEncoder {
            mode,
            turn_rnn: Some(turn_rnn),
            turn_level: Some(turn_level),
            bank,
            attn,
            d_out,
        }
    }

    /// `turns` must be ordered oldest to newest; each turn is the embedded
    /// token sequence of one utterance.
    pub fn encode(&self, tape: &mut Tape, turns: &[Vec<NodeId>]) -> Result<ContextEncoding> {
        if self.mode == ContextMode::Off {
            return Ok(ContextEncoding {
                style: tape.zeros(self.d_out),
                weights: None,
            });
        }
        let turn_rnn = self.turn_rnn.as_ref().unwrap();
        let turn_level = self.turn_level.as_ref().unwrap();
        let turn_vecs: Vec<NodeId> = turns
            .iter()
            .filter(|t| !t.is_empty())
            .map(|t| crate::rnn::bilstm_run(tape, turn_rnn, t).h_end)
            .collect();
        let s_context = if turn_vecs.is_empty() {
            // No context: the turn-level RNN contributes its initial state.
            tape.zeros(turn_level.hidden)
        } else {
            lstm_run(tape, turn_level, &turn_vecs).1.h
        };
        match self.mode {
            ContextMode::Raw => Ok(ContextEncoding {
                style: s_context,
                weights: None,
            }),
            ContextMode::Proto => {
                let bank = self.bank.as_ref().unwrap();
                let attn = self.attn.as_ref().unwrap();
                let rows = bank.rows(tape);
                let (weights, pooled) = attend(tape, attn, &rows, s_context);
                Ok(ContextEncoding {
                    style: pooled,
                    weights: Some(weights),
                })
            }
            ContextMode::Off => unreachable!(),
        }
    }
}

/// Paraphrasing-noise encoder: the ground truth's own Bi-RNN final state
/// queries the response prototype bank. Training only; at inference the
/// weights are sampled instead (or zeroed for likelihood evaluation).
#[derive(Debug, Clone)]
pub struct NoiseEncoder {
    pub rnn: BiLstmParams,
    pub bank: PrototypeBank,
    pub attn: AttentionParams,
}

#[derive(Debug, Clone)]
pub struct NoiseEncoding {
    pub noise: NodeId,
    pub weights: NodeId,
}

impl NoiseEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> NoiseEncoder {
        NoiseEncoder {
            rnn: BiLstmParams::new(
                store,
                "noise.rnn",
                cfg.d_model,
                cfg.d_hidden,
                cfg.d_enc_out,
                rng,
            ),
            bank: PrototypeBank::new(
                store,
                "noise.protos",
                cfg.k_response_prototypes,
                cfg.d_response_noise,
                rng,
            ),
            attn: AttentionParams::new(
                store,
                "noise.attn",
                cfg.d_response_noise,
                cfg.d_enc_out,
                cfg.d_attn,
                rng,
            ),
        }
    }

    pub fn encode(&self, tape: &mut Tape, gt_embedded: &[NodeId]) -> Result<NoiseEncoding> {
        if gt_embedded.is_empty() {
            return Err(Error::invalid("noise encoder given an empty ground truth"));
        }
        let enc = crate::rnn::bilstm_run(tape, &self.rnn, gt_embedded);
        let rows = self.bank.rows(tape);
        let (weights, noise) = attend(tape, &self.attn, &rows, enc.h_end);
        Ok(NoiseEncoding { noise, weights })
    }

    /// Noise vector from externally supplied simplex weights (sampled at
    /// inference, or a forced one-hot).
    pub fn from_weights(&self, tape: &mut Tape, weights: &[f64]) -> Result<NodeId> {
        self.bank.combine_fixed(tape, weights)
    }

    /// The zeroed noise vector used for likelihood-style evaluation.
    pub fn zeroed(&self, tape: &mut Tape) -> NodeId {
        tape.zeros(self.bank.width)
    }
}

/// The three conditioning vectors the decoder consumes, plus the response
/// prototype weights that were actually applied (absent when the noise
/// vector was forced to zero).
#[derive(Debug, Clone)]
pub struct StyleBundle {
    pub s_semantics: NodeId,
    pub s_context_style: NodeId,
    pub s_response_noise: NodeId,
    pub noise_weights: Option<Vec<f64>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;
    use crate::tape::grad_check;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn probe_sum(tape: &mut Tape, node: NodeId, len: usize) -> NodeId {
        let probe = tape.leaf(Array1::from_shape_fn(len, |i| (0.41 * i as f64 + 0.3).sin()));
        let prod = tape.mul(node, probe);
        let parts: Vec<NodeId> = (0..len).map(|i| tape.pick(prod, i)).collect();
        tape.add_many(&parts)
    }

    #[test]
    fn singleton_attention_is_identity() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = AttentionParams::new(&mut store, "a", 3, 4, 5, &mut rng);
        let mut tape = Tape::new(&store);
        let h = tape.leaf(Array1::from_vec(vec![0.3, -0.7, 0.2]));
        let q = tape.leaf(Array1::from_vec(vec![0.1, 0.2, 0.3, 0.4]));
        let (w, pooled) = attend(&mut tape, &p, &[h], q);
        assert_eq!(tape.value(w).as_slice().unwrap(), &[1.0]);
        assert_eq!(tape.value(pooled), tape.value(h));
    }

    #[test]
    fn identical_keys_get_uniform_weights() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = AttentionParams::new(&mut store, "a", 3, 3, 4, &mut rng);
        let mut tape = Tape::new(&store);
        let h = Array1::from_vec(vec![0.5, -0.1, 0.9]);
        let keys: Vec<NodeId> = (0..4).map(|_| tape.leaf(h.clone())).collect();
        let q = tape.leaf(Array1::from_vec(vec![0.2, 0.0, -0.4]));
        let (w, pooled) = attend(&mut tape, &p, &keys, q);
        for &wi in tape.value(w).iter() {
            assert!((wi - 0.25).abs() < 1e-12);
        }
        let diff = (tape.value(pooled) - &h).mapv(f64::abs).sum();
        assert!(diff < 1e-12);
    }

    #[test]
    fn attention_matches_brute_force() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = AttentionParams::new(&mut store, "a", 4, 3, 6, &mut rng);
        let keys_raw: Vec<Array1<f64>> = (0..5)
            .map(|i| Array1::from_shape_fn(4, |j| ((i * 7 + j * 3) as f64 * 0.21).sin()))
            .collect();
        let q_raw = Array1::from_vec(vec![0.4, -0.8, 0.15]);

        let mut tape = Tape::new(&store);
        let keys: Vec<NodeId> = keys_raw.iter().map(|k| tape.leaf(k.clone())).collect();
        let q = tape.leaf(q_raw.clone());
        let (w, pooled) = attend(&mut tape, &p, &keys, q);

        // Independent computation with plain ndarray ops.
        let w_h: &Array2<f64> = store.mat(p.w_h);
        let w_c: &Array2<f64> = store.mat(p.w_c);
        let b = store.vec(p.b);
        let v = store.vec(p.v);
        let scores: Vec<f64> = keys_raw
            .iter()
            .map(|k| {
                let pre = w_h.dot(k) + w_c.dot(&q_raw) + b;
                v.dot(&pre.mapv(f64::tanh))
            })
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut expect = Array1::<f64>::zeros(4);
        for (e, k) in exps.iter().zip(&keys_raw) {
            expect = expect + k * (*e / z);
        }
        for (i, e) in exps.iter().enumerate() {
            assert!((tape.value(w)[i] - e / z).abs() < 1e-12);
        }
        let max_diff = (tape.value(pooled) - &expect)
            .mapv(f64::abs)
            .fold(0.0f64, |a, &b| a.max(b));
        assert!(max_diff < 1e-6, "max abs diff {max_diff}");
    }

    #[test]
    fn attention_gradients_pass_finite_difference() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let p = AttentionParams::new(&mut store, "a", 3, 3, 4, &mut rng);
        let err = grad_check(&mut store, 1e-5, |_ps, tape| {
            let keys: Vec<NodeId> = (0..3)
                .map(|i| {
                    tape.leaf(Array1::from_shape_fn(3, |j| ((i + 2 * j) as f64 * 0.3).cos()))
                })
                .collect();
            let q = tape.leaf(Array1::from_vec(vec![0.3, -0.2, 0.6]));
            let (_, pooled) = attend(tape, &p, &keys, q);
            probe_sum(tape, pooled, 3)
        });
        assert!(err < 1e-4, "relative error {err}");
    }

    fn desk_cfg(variant: Variant) -> ModelConfig {
        let mut cfg = ModelConfig::desk_scale(variant);
        // Shrink further: these tests only exercise wiring.
        cfg.d_model = 6;
        cfg.d_hidden = 5;
        cfg.d_enc_out = 7;
        cfg.d_attn = 4;
        cfg.d_context_style = 5;
        cfg.d_response_noise = 4;
        cfg
    }

    #[test]
    fn semantic_encoder_single_token_returns_that_state() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let cfg = desk_cfg(Variant::GtCtxprotoSlotsTmpl);
        let enc = SemanticEncoder::new(&mut store, &cfg, &mut rng);
        let mut tape = Tape::new(&store);
        let x = tape.leaf(Array1::from_shape_fn(6, |i| (i as f64 * 0.5).sin()));
        let out = enc.encode(&mut tape, &[x]).unwrap();
        assert_eq!(tape.value(out.weights).as_slice().unwrap(), &[1.0]);
        assert_eq!(tape.value(out.pooled), tape.value(out.enc.hidden[0]));
        assert_eq!(tape.value(out.pooled).len(), 7);

        let mut tape2 = Tape::new(&store);
        assert!(enc.encode(&mut tape2, &[]).is_err());
    }

    #[test]
    fn context_encoder_modes_and_empty_context() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);

        // Off: zero vector of the configured style width.
        let mut store = ParamStore::new();
        let cfg = desk_cfg(Variant::GtSlotsTmpl);
        let enc = ContextEncoder::new(&mut store, &cfg, &mut rng);
        assert_eq!(store.n_scalars(), 0);
        let mut tape = Tape::new(&store);
        let out = enc.encode(&mut tape, &[]).unwrap();
        assert_eq!(tape.value(out.style).len(), cfg.d_context_style);
        assert_eq!(tape.value(out.style).sum(), 0.0);

        // Proto with empty context: well-defined, weights on the simplex.
        let mut store = ParamStore::new();
        let cfg = desk_cfg(Variant::GtCtxprotoSlotsTmpl);
        let enc = ContextEncoder::new(&mut store, &cfg, &mut rng);
        let mut tape = Tape::new(&store);
        let out = enc.encode(&mut tape, &[]).unwrap();
        assert_eq!(tape.value(out.style).len(), cfg.d_context_style);
        let w = tape.value(out.weights.unwrap());
        assert_eq!(w.len(), cfg.k_context_prototypes);
        assert!((w.sum() - 1.0).abs() < 1e-9);

        // Raw: style is the turn-level state, width d_enc_out.
        let mut store = ParamStore::new();
        let cfg = desk_cfg(Variant::CtxSlotsTmpl);
        let enc = ContextEncoder::new(&mut store, &cfg, &mut rng);
        let mut tape = Tape::new(&store);
        let turn: Vec<NodeId> = (0..3)
            .map(|i| tape.leaf(Array1::from_shape_fn(6, |j| ((i + j) as f64 * 0.3).sin())))
            .collect();
        let out = enc.encode(&mut tape, &[turn]).unwrap();
        assert_eq!(tape.value(out.style).len(), cfg.d_enc_out);
        assert!(out.weights.is_none());
    }

    #[test]
    fn context_turn_order_matters() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cfg = desk_cfg(Variant::CtxSlotsTmpl);
        let enc = ContextEncoder::new(&mut store, &cfg, &mut rng);
        let turn_a: Vec<Array1<f64>> =
            (0..2).map(|i| Array1::from_shape_fn(6, |j| ((i * 6 + j) as f64 * 0.4).sin())).collect();
        let turn_b: Vec<Array1<f64>> =
            (0..2).map(|i| Array1::from_shape_fn(6, |j| ((i * 6 + j) as f64 * 0.4).cos())).collect();
        let style_of = |order: [&Vec<Array1<f64>>; 2], store: &ParamStore| {
            let mut tape = Tape::new(store);
            let turns: Vec<Vec<NodeId>> = order
                .iter()
                .map(|t| t.iter().map(|x| tape.leaf(x.clone())).collect())
                .collect();
            let out = enc.encode(&mut tape, &turns).unwrap();
            tape.value(out.style).clone()
        };
        let ab = style_of([&turn_a, &turn_b], &store);
        let ba = style_of([&turn_b, &turn_a], &store);
        let ab2 = style_of([&turn_a, &turn_b], &store);
        assert_eq!(ab, ab2, "same order must be deterministic");
        assert!((ab - ba).mapv(f64::abs).sum() > 1e-8, "order must matter");
    }

    #[test]
    fn prototype_outputs_stay_in_the_banks_span() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let cfg = desk_cfg(Variant::GtCtxprotoSlotsTmpl);
        let enc = NoiseEncoder::new(&mut store, &cfg, &mut rng);
        let k = cfg.k_response_prototypes;
        let d = cfg.d_response_noise;

        // Many different ground truths; every noise vector must be the
        // weight-combination of the K prototype rows (weights from the tape).
        for trial in 0..12 {
            let mut tape = Tape::new(&store);
            let len = 2 + trial % 4;
            let gt: Vec<NodeId> = (0..len)
                .map(|i| {
                    tape.leaf(Array1::from_shape_fn(6, |j| {
                        ((trial * 31 + i * 7 + j) as f64 * 0.13).sin()
                    }))
                })
                .collect();
            let out = enc.encode(&mut tape, &gt).unwrap();
            let w = tape.value(out.weights).clone();
            assert!((w.sum() - 1.0).abs() < 1e-6);
            assert!(w.iter().all(|&x| x >= 0.0));
            let mut expect = Array1::<f64>::zeros(d);
            for i in 0..k {
                expect = expect + &(store.mat(enc.bank.table).row(i).to_owned() * w[i]);
            }
            let diff = (tape.value(out.noise) - &expect).mapv(f64::abs).sum();
            assert!(diff < 1e-9, "trial {trial}: off the prototype span by {diff}");
        }
    }

    #[test]
    fn forced_one_hot_weights_select_one_prototype() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let cfg = desk_cfg(Variant::GtCtxprotoSlotsTmpl);
        let enc = NoiseEncoder::new(&mut store, &cfg, &mut rng);
        let mut tape = Tape::new(&store);
        let noise = enc.from_weights(&mut tape, &[0.0, 0.0, 1.0, 0.0]).unwrap();
        let expect = store.mat(enc.bank.table).row(2).to_owned();
        assert_eq!(tape.value(noise), &expect);

        assert!(enc.from_weights(&mut tape, &[1.0]).is_err());
        let zeroed = enc.zeroed(&mut tape);
        assert_eq!(tape.value(zeroed).sum(), 0.0);
    }

    #[test]
    fn the_three_attention_modules_share_no_parameters() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let cfg = desk_cfg(Variant::GtCtxprotoSlotsTmpl);
        let sem = SemanticEncoder::new(&mut store, &cfg, &mut rng);
        let ctx = ContextEncoder::new(&mut store, &cfg, &mut rng);
        let noise = NoiseEncoder::new(&mut store, &cfg, &mut rng);

        let mut all: Vec<ParamId> = Vec::new();
        all.extend(sem.attn.ids());
        all.extend(ctx.attn.as_ref().unwrap().ids());
        all.extend(noise.attn.ids());
        let mut dedup = all.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), all.len(), "attention parameters are aliased");
        // The banks are distinct parameters too.
        assert_ne!(ctx.bank.as_ref().unwrap().table, noise.bank.table);
    }

    #[test]
    fn context_prototype_gradients_pass_finite_difference() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut cfg = desk_cfg(Variant::GtCtxprotoSlotsTmpl);
        cfg.d_model = 3;
        cfg.d_hidden = 3;
        cfg.d_enc_out = 3;
        let enc = ContextEncoder::new(&mut store, &cfg, &mut rng);
        let width = cfg.d_context_style;
        let err = grad_check(&mut store, 1e-5, |_ps, tape| {
            let turns: Vec<Vec<NodeId>> = (0..2)
                .map(|t| {
                    (0..2)
                        .map(|i| {
                            tape.leaf(Array1::from_shape_fn(3, |j| {
                                ((t * 9 + i * 3 + j) as f64 * 0.27).sin()
                            }))
                        })
                        .collect()
                })
                .collect();
            let out = enc.encode(tape, &turns).unwrap();
            probe_sum(tape, out.style, width)
        });
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn noise_gradients_pass_finite_difference() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut cfg = desk_cfg(Variant::GtCtxprotoSlotsTmpl);
        cfg.d_model = 3;
        cfg.d_hidden = 3;
        cfg.d_enc_out = 3;
        let enc = NoiseEncoder::new(&mut store, &cfg, &mut rng);
        let width = cfg.d_response_noise;
        let err = grad_check(&mut store, 1e-5, |_ps, tape| {
            let gt: Vec<NodeId> = (0..3)
                .map(|i| {
                    tape.leaf(Array1::from_shape_fn(3, |j| ((i * 3 + j) as f64 * 0.35).cos()))
                })
                .collect();
            let out = enc.encode(tape, &gt).unwrap();
            probe_sum(tape, out.noise, width)
        });
        assert!(err < 1e-4, "relative error {err}");
    }
}
