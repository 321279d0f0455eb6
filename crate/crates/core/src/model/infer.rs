//! Plain-vector forward pass for decoding and evaluation. Mirrors
//! [`graph`](super::graph) operation for operation without recording a tape.

use super::{AttentionMode, LengthContract, LstmLayout, ModelParams, Normalization};
use crate::beam::StepScorer;
use crate::error::{Error, Result};
use crate::tensor::Param;
use crate::BOS;

/// `acc += x · W[row_offset .. row_offset + len(x), :]`.
fn accumulate_vec_mat(acc: &mut [f64], x: &[f64], w: &Param, row_offset: usize) {
    let cols = w.shape[1];
    for (i, xi) in x.iter().enumerate() {
        if *xi == 0.0 {
            continue;
        }
        let row = &w.values[(row_offset + i) * cols..(row_offset + i + 1) * cols];
        for (a, wv) in acc.iter_mut().zip(row) {
            *a += xi * wv;
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// LSTM update in place from pre-activation gates (order i, f, g, o).
fn lstm_cell(gates: &[f64], hidden: &mut [f64], cell: &mut [f64]) {
    let h = hidden.len();
    for j in 0..h {
        let i = sigmoid(gates[j]);
        let f = sigmoid(gates[h + j]);
        let g = gates[2 * h + j].tanh();
        let o = sigmoid(gates[3 * h + j]);
        cell[j] = f * cell[j] + i * g;
        hidden[j] = o * cell[j].tanh();
    }
}

fn embedding(params: &ModelParams, block: usize, id: usize) -> &[f64] {
    let p = params.block(block);
    let d = p.shape[1];
    &p.values[id * d..(id + 1) * d]
}

fn run_lstm(params: &ModelParams, lstm: LstmLayout, x: &[usize], reverse: bool) -> Vec<Vec<f64>> {
    let h = params.config.hidden_dim;
    let (mut hidden, mut cell) = (vec![0.0; h], vec![0.0; h]);
    let mut out = vec![Vec::new(); x.len()];
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..x.len()).rev())
    } else {
        Box::new(0..x.len())
    };
    for t in order {
        let mut gates = params.block(lstm.b).values.clone();
        accumulate_vec_mat(
            &mut gates,
            embedding(params, params.layout.src_embed, x[t]),
            params.block(lstm.wx),
            0,
        );
        accumulate_vec_mat(&mut gates, &hidden, params.block(lstm.wh), 0);
        lstm_cell(&gates, &mut hidden, &mut cell);
        out[t] = hidden.clone();
    }
    out
}

/// Encoder outputs, one row per input position.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotations {
    pub rows: Vec<Vec<f64>>,
}

impl Annotations {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub hidden: Vec<f64>,
    pub cell: Vec<f64>,
    pub step: usize,
}

pub fn encode(params: &ModelParams, x: &[usize]) -> Result<Annotations> {
    params.check_source(x)?;
    let fwd = run_lstm(params, params.layout.enc_fwd, x, false);
    let rows = match params.layout.enc_bwd {
        Some(bwd_layout) => {
            let bwd = run_lstm(params, bwd_layout, x, true);
            fwd.into_iter()
                .zip(bwd)
                .map(|(mut f, b)| {
                    f.extend(b);
                    f
                })
                .collect()
        }
        None => fwd,
    };
    Ok(Annotations { rows })
}

pub fn init_decoder(params: &ModelParams, ann: &Annotations) -> DecoderState {
    let h = params.config.hidden_dim;
    match params.config.attention {
        AttentionMode::FixedPosition => DecoderState {
            hidden: vec![0.0; h],
            cell: vec![0.0; h],
            step: 0,
        },
        AttentionMode::Content => {
            let layout = &params.layout;
            let mut act = params
                .block(layout.init_b.expect("content layout"))
                .values
                .clone();
            let last = ann.rows.last().expect("non-empty annotations");
            accumulate_vec_mat(
                &mut act,
                last,
                params.block(layout.init_w.expect("content layout")),
                0,
            );
            act.iter_mut().for_each(|v| *v = v.tanh());
            let cell = act.split_off(h);
            DecoderState {
                hidden: act,
                cell,
                step: 0,
            }
        }
    }
}

pub(crate) fn context(
    params: &ModelParams,
    state: &DecoderState,
    ann: &Annotations,
) -> Result<Vec<f64>> {
    match params.config.attention {
        AttentionMode::FixedPosition => ann.rows.get(state.step).cloned().ok_or_else(|| {
            Error::Contract(format!(
                "fixed-position step {} beyond input length {}",
                state.step,
                ann.len()
            ))
        }),
        AttentionMode::Content => {
            let w = params.block(params.layout.attention.expect("content layout"));
            let mut u = vec![0.0; w.shape[1]];
            accumulate_vec_mat(&mut u, &state.hidden, w, 0);
            let scores: Vec<f64> = ann
                .rows
                .iter()
                .map(|r| r.iter().zip(&u).map(|(a, b)| a * b).sum())
                .collect();
            let weights = softmax(&scores);
            let mut ctx = vec![0.0; u.len()];
            for (wt, row) in weights.iter().zip(&ann.rows) {
                for (c, r) in ctx.iter_mut().zip(row) {
                    *c += wt * r;
                }
            }
            Ok(ctx)
        }
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// One decoder step from the previous token; returns the new state and logits.
pub fn decoder_step(
    params: &ModelParams,
    state: &DecoderState,
    prev_token: usize,
    ann: &Annotations,
) -> Result<(DecoderState, Vec<f64>)> {
    if prev_token >= params.config.tgt_vocab {
        return Err(Error::Data(format!(
            "target id {prev_token} out of vocabulary"
        )));
    }
    let emb = embedding(params, params.layout.tgt_embed, prev_token);
    decoder_step_embedded(params, state, emb, ann)
}

/// One decoder step from an arbitrary input embedding (e.g. a soft mixture of
/// token embeddings).
pub fn decoder_step_embedded(
    params: &ModelParams,
    state: &DecoderState,
    emb: &[f64],
    ann: &Annotations,
) -> Result<(DecoderState, Vec<f64>)> {
    let layout = &params.layout;
    let ctx = context(params, state, ann)?;
    let d = params.config.embed_dim;
    let wx = params.block(layout.dec.wx);
    let mut gates = params.block(layout.dec.b).values.clone();
    accumulate_vec_mat(&mut gates, emb, wx, 0);
    accumulate_vec_mat(&mut gates, &ctx, wx, d);
    accumulate_vec_mat(&mut gates, &state.hidden, params.block(layout.dec.wh), 0);
    let mut next = DecoderState {
        hidden: state.hidden.clone(),
        cell: state.cell.clone(),
        step: state.step + 1,
    };
    lstm_cell(&gates, &mut next.hidden, &mut next.cell);
    let mut logits = params.block(layout.out_b).values.clone();
    accumulate_vec_mat(&mut logits, &next.hidden, params.block(layout.out_w), 0);
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Tensor(crate::tensor::TensorError::NonFinite {
            op: "decoder_step",
        }));
    }
    Ok((next, logits))
}

/// Row `id` of the target embedding matrix.
pub fn target_embedding(params: &ModelParams, id: usize) -> &[f64] {
    embedding(params, params.layout.tgt_embed, id)
}

pub fn log_normalizer(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn step_log_scores(normalization: Normalization, logits: &[f64]) -> Vec<f64> {
    match normalization {
        Normalization::Global => logits.to_vec(),
        Normalization::Local => {
            let lz = log_normalizer(logits);
            logits.iter().map(|v| v - lz).collect()
        }
    }
}

/// Teacher-forced logits for every step of `y`.
pub fn teacher_forced_logits(
    params: &ModelParams,
    x: &[usize],
    y: &[usize],
) -> Result<Vec<Vec<f64>>> {
    params.check_target(y)?;
    let ann = encode(params, x)?;
    let mut state = init_decoder(params, &ann);
    let mut prev = BOS;
    let mut out = Vec::with_capacity(y.len());
    for &tok in y {
        let (next, logits) = decoder_step(params, &state, prev, &ann)?;
        out.push(logits);
        state = next;
        prev = tok;
    }
    Ok(out)
}

pub fn sequence_log_score(
    params: &ModelParams,
    x: &[usize],
    y: &[usize],
    contract: LengthContract,
) -> Result<f64> {
    contract.check_gold(x, y)?;
    let logits = teacher_forced_logits(params, x, y)?;
    Ok(logits
        .iter()
        .zip(y)
        .map(|(l, tok)| step_log_scores(params.config.normalization, l)[*tok])
        .sum())
}

/// A model conditioned on one input, scoring successors with a chosen mode.
pub struct Decoder<'p> {
    params: &'p ModelParams,
    ann: Annotations,
    normalization: Normalization,
}

impl<'p> Decoder<'p> {
    pub fn new(params: &'p ModelParams, x: &[usize]) -> Result<Self> {
        Ok(Self {
            params,
            ann: encode(params, x)?,
            normalization: params.config.normalization,
        })
    }

    /// Overrides how step scores are computed (e.g. raw logits from a model
    /// trained with local normalization).
    pub fn with_scores(mut self, normalization: Normalization) -> Self {
        self.normalization = normalization;
        self
    }

    pub fn annotations(&self) -> &Annotations {
        &self.ann
    }
}

/// Decoder state before consuming `input`.
#[derive(Debug, Clone)]
pub struct Pending {
    state: DecoderState,
    input: usize,
}

impl StepScorer for Decoder<'_> {
    type State = Pending;

    fn vocab_size(&self) -> usize {
        self.params.config.tgt_vocab
    }

    fn initial(&self) -> Result<Pending> {
        Ok(Pending {
            state: init_decoder(self.params, &self.ann),
            input: BOS,
        })
    }

    fn step(&self, state: &Pending) -> Result<(Vec<f64>, Pending)> {
        let (next, logits) = decoder_step(self.params, &state.state, state.input, &self.ann)?;
        Ok((
            step_log_scores(self.normalization, &logits),
            Pending {
                state: next,
                input: state.input,
            },
        ))
    }

    fn feed(&self, state: &Pending, token: usize) -> Pending {
        Pending {
            state: state.state.clone(),
            input: token,
        }
    }
}
