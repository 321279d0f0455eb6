use super::{eos_masks, exact_top_k, final_offsets, finished_slots, hamming_cost};
use crate::error::{Error, Result};
use crate::model::graph::{self, Annotations, Bound, DecoderState};
use crate::model::LengthContract;
use crate::tensor::{Tape, Tensor};
use crate::{BOS, PAD};

/// Initial score of the replicated slots `1..K`; low enough that their
/// successors never win selection.
pub const INIT_SCORE: f64 = -1e9;

/// Relaxed beam at one decoding step.
#[derive(Debug, Clone)]
pub struct SoftBeamState {
    /// `[K, h]` hidden and cell states before the next step.
    pub decoder: DecoderState,
    /// `[K, d]` next-step input embeddings.
    pub inputs: Tensor,
    /// `[K]` cumulative soft scores.
    pub scores: Tensor,
    /// `[K]` cumulative soft losses.
    pub losses: Tensor,
    pub k: usize,
    /// Per-slot finished flags for variable-length outputs; `None` for
    /// fixed-length dynamics.
    pub finished: Option<Vec<bool>>,
}

/// Result of relaxed selection over a `[K, |V|]` candidate matrix.
#[derive(Debug, Clone)]
pub struct Transition {
    /// `[K, K·|V|]` peaked weights, one row per output slot.
    pub weights: Tensor,
    /// Exact top-k values and flat indices (constants).
    pub top: Vec<(f64, usize)>,
    /// `[K]` new soft scores.
    pub scores: Tensor,
    /// `[K]` new soft losses.
    pub losses: Tensor,
    /// `[K, K]` soft backpointers: row `k` weights previous slots.
    pub backpointers: Tensor,
    /// `[K, |V|]` soft labels: row `k` weights tokens.
    pub labels: Tensor,
}

/// Rows `softmax(-α (s - s[i])²)` over a score vector `s` of length `N`, one
/// per selected index `i`; shape `[len(indices), N]`.
///
/// The indices are fixed, but the centre `s[i]` is read from the tape so the
/// weights are differentiated through both the scores and the centres.
pub fn peaked_weights(
    tape: &mut Tape,
    scores: Tensor,
    indices: &[usize],
    alpha: f64,
) -> Result<Tensor> {
    let n = tape.shape(scores)[0];
    let k = indices.len();
    let row = tape.reshape(scores, vec![1, n])?;
    let rows = tape.row_select(row, vec![0; k])?;
    let centres = tape.gather(scores, indices.to_vec())?;
    let centres = tape.reshape(centres, vec![k, 1])?;
    let diff = tape.sub(rows, centres)?;
    let sq = tape.mul(diff, diff)?;
    let neg = tape.scale(sq, -1.0)?;
    Ok(tape.softmax(neg, 1, alpha)?)
}

/// Relaxed top-k selection given candidates `[K_in, |V|]`, previous slot
/// losses `[K_in]`, and per-token costs `[|V|]`, producing `k` output slots.
pub fn soft_transition(
    tape: &mut Tape,
    candidates: Tensor,
    losses: Tensor,
    costs: &[f64],
    k: usize,
    alpha: f64,
) -> Result<Transition> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    let shape = tape.shape(candidates).to_vec();
    let (k_in, v) = (shape[0], shape[1]);
    if costs.len() != v {
        return Err(Error::Contract(format!(
            "{} costs for |V| = {v}",
            costs.len()
        )));
    }
    let flat = tape.reshape(candidates, vec![k_in * v])?;
    let top = exact_top_k(tape.value(flat), k)?;
    let weights = peaked_weights(
        tape,
        flat,
        &top.iter().map(|t| t.1).collect::<Vec<_>>(),
        alpha,
    )?;
    let column = tape.reshape(flat, vec![k_in * v, 1])?;
    let scores = tape.matmul(weights, column)?;
    let scores = tape.reshape(scores, vec![k])?;
    let cube = tape.reshape(weights, vec![k, k_in, v])?;
    let backpointers = tape.sum_axis(cube, 2)?;
    let labels = tape.sum_axis(cube, 1)?;
    let prev = tape.reshape(losses, vec![k_in, 1])?;
    let carried = tape.matmul(backpointers, prev)?;
    let cost = tape.constant(vec![v, 1], costs.to_vec())?;
    let added = tape.matmul(labels, cost)?;
    let new_losses = tape.add(carried, added)?;
    let losses = tape.reshape(new_losses, vec![k])?;
    Ok(Transition {
        weights,
        top,
        scores,
        losses,
        backpointers,
        labels,
    })
}

/// Slot 0 holds the BOS state with score 0; the other slots replicate it with
/// score [`INIT_SCORE`]. With `until_eos` the dynamics follow the
/// variable-length rules of [`eos_masks`].
pub fn soft_beam_init(
    tape: &mut Tape,
    bound: &Bound,
    ann: &Annotations,
    k: usize,
    until_eos: bool,
) -> Result<SoftBeamState> {
    if k == 0 {
        return Err(Error::Contract("beam size must be at least 1".into()));
    }
    let decoder = graph::init_decoder(tape, bound, ann, k)?;
    let inputs = tape.row_select(bound.target_embeddings(), vec![BOS; k])?;
    let mut init = vec![INIT_SCORE; k];
    init[0] = 0.0;
    let scores = tape.constant(vec![k], init)?;
    let losses = tape.zeros(vec![k])?;
    Ok(SoftBeamState {
        decoder,
        inputs,
        scores,
        losses,
        k,
        finished: until_eos.then(|| vec![false; k]),
    })
}

/// Candidate matrix `[K, |V|]`: slot score plus the step log-scores of its
/// successors, along with the post-step decoder state.
pub fn candidate_scores(
    tape: &mut Tape,
    bound: &Bound,
    beam: &SoftBeamState,
    ann: &Annotations,
) -> Result<(Tensor, DecoderState)> {
    let (next, logits) = graph::decoder_step(tape, bound, &beam.decoder, beam.inputs, ann)?;
    let mut step = graph::step_log_scores(tape, bound.normalization(), logits)?;
    if let Some(finished) = &beam.finished {
        let v = bound.params.config.tgt_vocab;
        let (keep, offset) = eos_masks(finished, v);
        let keep = tape.constant(vec![beam.k, v], keep)?;
        let offset = tape.constant(vec![beam.k, v], offset)?;
        let kept = tape.mul(step, keep)?;
        step = tape.add(kept, offset)?;
    }
    let col = tape.reshape(beam.scores, vec![beam.k, 1])?;
    Ok((tape.add(step, col)?, next))
}

/// One relaxed beam step against gold token `gold` (PAD past the gold EOS).
pub fn soft_beam_step(
    tape: &mut Tape,
    bound: &Bound,
    beam: &SoftBeamState,
    ann: &Annotations,
    gold: usize,
    alpha: f64,
) -> Result<(SoftBeamState, Transition)> {
    let (cands, next) = candidate_scores(tape, bound, beam, ann)?;
    let v = bound.params.config.tgt_vocab;
    let costs: Vec<f64> = (0..v).map(|tok| hamming_cost(tok, gold)).collect();
    let tr = soft_transition(tape, cands, beam.losses, &costs, beam.k, alpha)?;
    let hidden = tape.matmul(tr.backpointers, next.hidden)?;
    let cell = tape.matmul(tr.backpointers, next.cell)?;
    let inputs = tape.matmul(tr.labels, bound.target_embeddings())?;
    let state = SoftBeamState {
        decoder: DecoderState {
            hidden,
            cell,
            step: next.step,
        },
        inputs,
        scores: tr.scores,
        losses: tr.losses,
        k: beam.k,
        finished: beam.finished.as_ref().map(|_| finished_slots(&tr.top, v)),
    };
    Ok((state, tr))
}

/// Gold sequence padded with PAD to the relaxed step count.
pub fn padded_gold(y: &[usize], steps: usize) -> Vec<usize> {
    let mut g = y.to_vec();
    g.resize(steps.max(y.len()), PAD);
    g
}

/// Surrogate objective `J̃ = Σ_k ŵ_k loss_k`, with `ŵ` the soft 1-argmax of
/// the final slot scores. For transduction, finished slots win the final
/// selection whenever any exist.
pub fn soft_beam_objective(
    tape: &mut Tape,
    bound: &Bound,
    x: &[usize],
    y: &[usize],
    contract: LengthContract,
    k: usize,
    alpha: f64,
) -> Result<Tensor> {
    contract.check_gold(x, y)?;
    bound.params.check_target(y)?;
    let steps = contract.soft_steps(x.len());
    let gold = padded_gold(y, steps);
    let ann = graph::encode(tape, bound, x)?;
    let until_eos = matches!(contract, LengthContract::Transduction { .. });
    let mut beam = soft_beam_init(tape, bound, &ann, k, until_eos)?;
    for &g in &gold {
        beam = soft_beam_step(tape, bound, &beam, &ann, g, alpha)?.0;
    }
    let mut finals = beam.scores;
    if let Some(finished) = &beam.finished {
        let offset = tape.constant(vec![k], final_offsets(finished))?;
        finals = tape.add(finals, offset)?;
    }
    let best = exact_top_k(tape.value(finals), 1)?[0].1;
    let w = peaked_weights(tape, finals, &[best], alpha)?;
    let col = tape.reshape(beam.losses, vec![k, 1])?;
    let j = tape.matmul(w, col)?;
    Ok(tape.sum(j)?)
}
