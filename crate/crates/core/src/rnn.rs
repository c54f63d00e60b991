//! LSTM building blocks on the autodiff tape.
//!
//! Gates use one fused input matrix and one fused recurrent matrix per cell,
//! ordered [input; forget; cell; output] along the rows; the forget-gate bias
//! section starts at 1.0, the usual trick to keep early training from
//! flushing state. The bidirectional wrapper concatenates both directions per
//! position and projects back to the configured output width with a single
//! shared matrix, so downstream attention sees one width regardless of
//! direction count.

use crate::tape::{glorot, NodeId, ParamId, ParamStore, Tape};
use ndarray::Array1;
use rand::Rng;

#[derive(Debug, Clone)]
pub struct LstmParams {
    /// 4H × I input weights.
    pub w_x: ParamId,
    /// 4H × H recurrent weights.
    pub w_h: ParamId,
    /// 4H bias.
    pub b: ParamId,
    pub hidden: usize,
}

impl LstmParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> LstmParams {
        let w_x = store.add_mat_uniform(
            &format!("{name}.w_x"),
            4 * hidden,
            input,
            glorot(4 * hidden, input),
            rng,
        );
        let w_h = store.add_mat_uniform(
            &format!("{name}.w_h"),
            4 * hidden,
            hidden,
            glorot(4 * hidden, hidden),
            rng,
        );
        let mut bias = Array1::zeros(4 * hidden);
        bias.slice_mut(ndarray::s![hidden..2 * hidden]).fill(1.0);
        let b = store.add_vec(&format!("{name}.b"), bias);
        LstmParams {
            w_x,
            w_h,
            b,
            hidden,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: NodeId,
    pub c: NodeId,
}

pub fn lstm_zero_state(tape: &mut Tape, hidden: usize) -> LstmState {
    LstmState {
        h: tape.zeros(hidden),
        c: tape.zeros(hidden),
    }
}

pub fn lstm_step(tape: &mut Tape, p: &LstmParams, state: LstmState, x: NodeId) -> LstmState {
    let h = p.hidden;
    let from_x = tape.matvec(p.w_x, x);
    let from_h = tape.matvec(p.w_h, state.h);
    let sum = tape.add(from_x, from_h);
    let gates = tape.add_bias(p.b, sum);
    let i_part = tape.slice(gates, 0, h);
    let f_part = tape.slice(gates, h, h);
    let g_part = tape.slice(gates, 2 * h, h);
    let o_part = tape.slice(gates, 3 * h, h);
    let i = tape.sigmoid(i_part);
    let f = tape.sigmoid(f_part);
    let g = tape.tanh(g_part);
    let o = tape.sigmoid(o_part);
    let fc = tape.mul(f, state.c);
    let ig = tape.mul(i, g);
    let c = tape.add(fc, ig);
    let tc = tape.tanh(c);
    let h_out = tape.mul(o, tc);
    LstmState { h: h_out, c }
}

/// Run a unidirectional LSTM over a sequence; returns per-step hidden states
/// and the final state.
pub fn lstm_run(
    tape: &mut Tape,
    p: &LstmParams,
    inputs: &[NodeId],
) -> (Vec<NodeId>, LstmState) {
    let mut state = lstm_zero_state(tape, p.hidden);
    let mut hs = Vec::with_capacity(inputs.len());
    for &x in inputs {
        state = lstm_step(tape, p, state, x);
        hs.push(state.h);
    }
    (hs, state)
}

#[derive(Debug, Clone)]
pub struct BiLstmParams {
    pub fwd: LstmParams,
    pub bwd: LstmParams,
    /// d_out × 2H projection applied to every concatenated position and to
    /// the concatenated final states.
    pub proj: ParamId,
    pub d_out: usize,
}

impl BiLstmParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> BiLstmParams {
        let fwd = LstmParams::new(store, &format!("{name}.fwd"), input, hidden, rng);
        let bwd = LstmParams::new(store, &format!("{name}.bwd"), input, hidden, rng);
        let proj = store.add_mat_uniform(
            &format!("{name}.proj"),
            d_out,
            2 * hidden,
            glorot(d_out, 2 * hidden),
            rng,
        );
        BiLstmParams {
            fwd,
            bwd,
            proj,
            d_out,
        }
    }
}

/// Per-position outputs and final state of a bidirectional pass.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// One projected vector per input position.
    pub hidden: Vec<NodeId>,
    /// Projection of [forward final; backward final].
    pub h_end: NodeId,
}

pub fn bilstm_run(tape: &mut Tape, p: &BiLstmParams, inputs: &[NodeId]) -> EncoderOutput {
    assert!(!inputs.is_empty(), "bilstm over an empty sequence");
    let (fwd_hs, fwd_final) = lstm_run(tape, &p.fwd, inputs);
    let reversed: Vec<NodeId> = inputs.iter().rev().copied().collect();
    let (bwd_hs_rev, bwd_final) = lstm_run(tape, &p.bwd, &reversed);

    let hidden = (0..inputs.len())
        .map(|t| {
            let cat = tape.concat(&[fwd_hs[t], bwd_hs_rev[inputs.len() - 1 - t]]);
            tape.matvec(p.proj, cat)
        })
        .collect();
    let cat_end = tape.concat(&[fwd_final.h, bwd_final.h]);
    let h_end = tape.matvec(p.proj, cat_end);
    EncoderOutput { hidden, h_end }
}
