//! Differentiable forward pass recorded on a tape.

use super::{AttentionMode, LengthContract, LstmLayout, ModelParams, Normalization};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};
use crate::BOS;

/// Parameters placed on a tape as leaves, in block order.
pub struct Bound<'p> {
    pub params: &'p ModelParams,
    pub leaves: Vec<Tensor>,
}

impl ModelParams {
    pub fn bind(&self, tape: &mut Tape) -> Result<Bound<'_>> {
        let leaves = self
            .blocks
            .iter()
            .map(|p| tape.param(p))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Bound {
            params: self,
            leaves,
        })
    }

    /// Uses leaves already on the tape, one per block in declared order.
    pub fn bind_leaves(&self, leaves: &[Tensor]) -> Result<Bound<'_>> {
        if leaves.len() != self.blocks.len() {
            return Err(Error::Contract(format!(
                "{} leaves for {} parameter blocks",
                leaves.len(),
                self.blocks.len()
            )));
        }
        Ok(Bound {
            params: self,
            leaves: leaves.to_vec(),
        })
    }
}

impl Bound<'_> {
    fn at(&self, idx: usize) -> Tensor {
        self.leaves[idx]
    }

    pub fn hidden_dim(&self) -> usize {
        self.params.config.hidden_dim
    }

    pub fn target_embeddings(&self) -> Tensor {
        self.at(self.params.layout.tgt_embed)
    }

    pub fn normalization(&self) -> Normalization {
        self.params.config.normalization
    }
}

/// Encoder outputs, one row per input position.
#[derive(Debug, Clone, Copy)]
pub struct Annotations {
    pub rows: Tensor,
    /// Transposed rows, cached for content attention.
    pub rows_t: Option<Tensor>,
    pub len: usize,
}

/// Batched decoder state: `B` rows of hidden and cell vectors.
#[derive(Debug, Clone, Copy)]
pub struct DecoderState {
    pub hidden: Tensor,
    pub cell: Tensor,
    pub step: usize,
}

/// One LSTM cell update from pre-activation gates `[B, 4h]` (order i, f, g, o).
pub(crate) fn lstm_cell(
    tape: &mut Tape,
    gates: Tensor,
    cell: Option<Tensor>,
    h: usize,
) -> Result<(Tensor, Tensor)> {
    let sig = tape.sigmoid(gates)?;
    let g_pre = tape.slice(gates, 1, 2 * h, h)?;
    let g = tape.tanh(g_pre)?;
    let i = tape.slice(sig, 1, 0, h)?;
    let o = tape.slice(sig, 1, 3 * h, h)?;
    let ig = tape.mul(i, g)?;
    let c = match cell {
        Some(c_prev) => {
            let f = tape.slice(sig, 1, h, h)?;
            let fc = tape.mul(f, c_prev)?;
            tape.add(fc, ig)?
        }
        None => ig,
    };
    let tc = tape.tanh(c)?;
    let hid = tape.mul(o, tc)?;
    Ok((hid, c))
}

fn run_lstm(
    tape: &mut Tape,
    bound: &Bound,
    lstm: LstmLayout,
    emb: Tensor,
    order: &[usize],
) -> Result<Vec<Tensor>> {
    let h = bound.hidden_dim();
    let xw = tape.matmul(emb, bound.at(lstm.wx))?;
    let pre = tape.add(xw, bound.at(lstm.b))?;
    let mut state: Option<(Tensor, Tensor)> = None;
    let mut out = vec![None; order.len()];
    for &t in order {
        let row = tape.slice(pre, 0, t, 1)?;
        let gates = match state {
            Some((hid, _)) => {
                let rec = tape.matmul(hid, bound.at(lstm.wh))?;
                tape.add(row, rec)?
            }
            None => row,
        };
        let (hid, c) = lstm_cell(tape, gates, state.map(|s| s.1), h)?;
        state = Some((hid, c));
        out[t] = Some(hid);
    }
    Ok(out
        .into_iter()
        .map(|t| t.expect("every position visited"))
        .collect())
}

/// Encodes `x` into annotations `[n, h]` (unidirectional) or `[n, 2h]`.
pub fn encode(tape: &mut Tape, bound: &Bound, x: &[usize]) -> Result<Annotations> {
    let params = bound.params;
    params.check_source(x)?;
    let n = x.len();
    let emb = tape.row_select(bound.at(params.layout.src_embed), x.to_vec())?;
    let forward: Vec<usize> = (0..n).collect();
    let fwd = run_lstm(tape, bound, params.layout.enc_fwd, emb, &forward)?;
    let fwd_rows = tape.concat(&fwd, 0)?;
    let rows = match params.layout.enc_bwd {
        Some(bwd_layout) => {
            let backward: Vec<usize> = (0..n).rev().collect();
            let bwd = run_lstm(tape, bound, bwd_layout, emb, &backward)?;
            let bwd_rows = tape.concat(&bwd, 0)?;
            tape.concat(&[fwd_rows, bwd_rows], 1)?
        }
        None => fwd_rows,
    };
    let rows_t = match params.config.attention {
        AttentionMode::Content => Some(tape.transpose(rows)?),
        AttentionMode::FixedPosition => None,
    };
    Ok(Annotations {
        rows,
        rows_t,
        len: n,
    })
}

/// Initial decoder state replicated over `batch` rows.
pub fn init_decoder(
    tape: &mut Tape,
    bound: &Bound,
    ann: &Annotations,
    batch: usize,
) -> Result<DecoderState> {
    let params = bound.params;
    let h = params.config.hidden_dim;
    let (hidden, cell) = match params.config.attention {
        AttentionMode::FixedPosition => (tape.zeros(vec![batch, h])?, tape.zeros(vec![batch, h])?),
        AttentionMode::Content => {
            let layout = &params.layout;
            let last = tape.row_select(ann.rows, vec![ann.len - 1])?;
            let lin = tape.matmul(last, bound.at(layout.init_w.expect("content layout")))?;
            let pre = tape.add(lin, bound.at(layout.init_b.expect("content layout")))?;
            let act = tape.tanh(pre)?;
            let act = if batch == 1 {
                act
            } else {
                tape.row_select(act, vec![0; batch])?
            };
            (tape.slice(act, 1, 0, h)?, tape.slice(act, 1, h, h)?)
        }
    };
    Ok(DecoderState {
        hidden,
        cell,
        step: 0,
    })
}

/// Context vectors `[B, a]` for the current step.
pub(crate) fn context(
    tape: &mut Tape,
    bound: &Bound,
    state: &DecoderState,
    ann: &Annotations,
    batch: usize,
) -> Result<Tensor> {
    match bound.params.config.attention {
        AttentionMode::FixedPosition => {
            if state.step >= ann.len {
                return Err(Error::Contract(format!(
                    "fixed-position step {} beyond input length {}",
                    state.step, ann.len
                )));
            }
            Ok(tape.row_select(ann.rows, vec![state.step; batch])?)
        }
        AttentionMode::Content => {
            let w = bound.at(bound.params.layout.attention.expect("content layout"));
            let u = tape.matmul(state.hidden, w)?;
            let rows_t = ann
                .rows_t
                .expect("content annotations carry their transpose");
            let scores = tape.matmul(u, rows_t)?;
            let weights = tape.softmax(scores, 1, 1.0)?;
            Ok(tape.matmul(weights, ann.rows)?)
        }
    }
}

fn recurrent_update(
    tape: &mut Tape,
    bound: &Bound,
    state: &DecoderState,
    pre: Tensor,
) -> Result<DecoderState> {
    let dec = bound.params.layout.dec;
    let rec = tape.matmul(state.hidden, bound.at(dec.wh))?;
    let gates = tape.add(pre, rec)?;
    let (hidden, cell) = lstm_cell(tape, gates, Some(state.cell), bound.hidden_dim())?;
    Ok(DecoderState {
        hidden,
        cell,
        step: state.step + 1,
    })
}

/// Output head: `[B, h] -> [B, |V|]` logits.
pub fn output_logits(tape: &mut Tape, bound: &Bound, hidden: Tensor) -> Result<Tensor> {
    let layout = &bound.params.layout;
    let lin = tape.matmul(hidden, bound.at(layout.out_w))?;
    Ok(tape.add(lin, bound.at(layout.out_b))?)
}

/// Advances `B` decoder rows by one step from the previous-token embeddings
/// `[B, d]`; returns the new state and logits `[B, |V|]`.
pub fn decoder_step(
    tape: &mut Tape,
    bound: &Bound,
    state: &DecoderState,
    prev_emb: Tensor,
    ann: &Annotations,
) -> Result<(DecoderState, Tensor)> {
    let batch = tape.shape(state.hidden)[0];
    let ctx = context(tape, bound, state, ann, batch)?;
    let inp = tape.concat(&[prev_emb, ctx], 1)?;
    let dec = bound.params.layout.dec;
    let xw = tape.matmul(inp, bound.at(dec.wx))?;
    let pre = tape.add(xw, bound.at(dec.b))?;
    let next = recurrent_update(tape, bound, state, pre)?;
    let logits = output_logits(tape, bound, next.hidden)?;
    Ok((next, logits))
}

/// Applies the normalization mode to logits `[B, |V|]`.
pub fn step_log_scores(
    tape: &mut Tape,
    normalization: Normalization,
    logits: Tensor,
) -> Result<Tensor> {
    match normalization {
        Normalization::Global => Ok(logits),
        Normalization::Local => {
            let shape = tape.shape(logits).to_vec();
            let lse = tape.logsumexp(logits, shape.len() - 1)?;
            if shape.len() == 1 {
                let lse_row = tape.row_select(lse, vec![0; shape[0]])?;
                Ok(tape.sub(logits, lse_row)?)
            } else {
                let col = tape.reshape(lse, vec![shape[0], 1])?;
                Ok(tape.sub(logits, col)?)
            }
        }
    }
}

/// `log Z` for each row of logits.
pub fn local_log_normalizer(tape: &mut Tape, logits: Tensor) -> Result<Tensor> {
    let rank = tape.shape(logits).len();
    Ok(tape.logsumexp(logits, rank - 1)?)
}

/// Teacher-forced logits `[|y|, |V|]`, gold history fed at every step.
///
/// Batches the input projection and output head over time; numerically the
/// same computation as repeated [`decoder_step`] calls.
pub fn teacher_forced_logits(
    tape: &mut Tape,
    bound: &Bound,
    x: &[usize],
    y: &[usize],
) -> Result<Tensor> {
    let params = bound.params;
    params.check_target(y)?;
    if y.is_empty() {
        return Err(Error::Contract("empty output sequence".into()));
    }
    let ann = encode(tape, bound, x)?;
    let mut state = init_decoder(tape, bound, &ann, 1)?;
    let n = y.len();
    let (d, a) = (params.config.embed_dim, params.config.annotation_dim());
    let dec = params.layout.dec;
    let history: Vec<usize> = std::iter::once(BOS)
        .chain(y[..n - 1].iter().copied())
        .collect();
    let embs = tape.row_select(bound.target_embeddings(), history)?;
    let mut hiddens = Vec::with_capacity(n);
    match params.config.attention {
        AttentionMode::FixedPosition => {
            if n > ann.len {
                return Err(Error::Contract(format!(
                    "{n} fixed-position steps for input length {}",
                    ann.len
                )));
            }
            let ctx = if n == ann.len {
                ann.rows
            } else {
                tape.slice(ann.rows, 0, 0, n)?
            };
            let inp = tape.concat(&[embs, ctx], 1)?;
            let xw = tape.matmul(inp, bound.at(dec.wx))?;
            let pre_all = tape.add(xw, bound.at(dec.b))?;
            for t in 0..n {
                let pre = tape.slice(pre_all, 0, t, 1)?;
                state = recurrent_update(tape, bound, &state, pre)?;
                hiddens.push(state.hidden);
            }
        }
        AttentionMode::Content => {
            let w_emb = tape.slice(bound.at(dec.wx), 0, 0, d)?;
            let w_ctx = tape.slice(bound.at(dec.wx), 0, d, a)?;
            let xw = tape.matmul(embs, w_emb)?;
            let pre_all = tape.add(xw, bound.at(dec.b))?;
            for t in 0..n {
                let ctx = context(tape, bound, &state, &ann, 1)?;
                let cw = tape.matmul(ctx, w_ctx)?;
                let row = tape.slice(pre_all, 0, t, 1)?;
                let pre = tape.add(row, cw)?;
                state = recurrent_update(tape, bound, &state, pre)?;
                hiddens.push(state.hidden);
            }
        }
    }
    let all = tape.concat(&hiddens, 0)?;
    output_logits(tape, bound, all)
}

/// Sum of step log-scores of `y` under gold history: `log p(y|x)` in local
/// mode, the unnormalized log-score in global mode.
pub fn sequence_log_score(
    tape: &mut Tape,
    bound: &Bound,
    x: &[usize],
    y: &[usize],
    contract: LengthContract,
) -> Result<Tensor> {
    contract.check_gold(x, y)?;
    let logits = teacher_forced_logits(tape, bound, x, y)?;
    let scores = step_log_scores(tape, bound.normalization(), logits)?;
    let v = bound.params.config.tgt_vocab;
    let picks = tape.gather(
        scores,
        y.iter().enumerate().map(|(t, tok)| t * v + tok).collect(),
    )?;
    Ok(tape.sum(picks)?)
}
