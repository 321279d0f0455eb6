use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::soft::padded_gold;
use super::{
    eos_masks, exact_top_k, final_offsets, finished_slots, hamming_cost, soft_k_argmax, StepScorer,
    INIT_SCORE,
};
use crate::error::{Error, Result};
use crate::model::infer::{self, DecoderState};
use crate::model::{LengthContract, ModelParams};
use crate::{BOS, EOS};

/// How slots carry decoder state during MAP decoding.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapMode {
    /// Each slot takes the state and label of its selected `(b, v)`.
    #[default]
    Committed,
    /// Slots keep mixed states and embeddings; labels and backpointers are
    /// read off as the argmax of their soft marginals.
    SoftStates,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapTraceEntry {
    pub slot: usize,
    pub score: f64,
    /// Soft loss against the gold sequence, when one was supplied.
    pub loss: Option<f64>,
    pub backpointer: usize,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapDecode {
    pub tokens: Vec<usize>,
    pub score: f64,
    pub trace: Vec<Vec<MapTraceEntry>>,
}

impl MapDecode {
    /// Step-indexed text log of the trace.
    pub fn format_trace(&self) -> String {
        let mut out = String::new();
        for (t, step) in self.trace.iter().enumerate() {
            for e in step {
                let loss = e.loss.map_or("-".to_string(), |l| format!("{l:.6}"));
                let _ = writeln!(
                    out,
                    "step={t} slot={} score={:.6} loss={loss} backpointer={} label={}",
                    e.slot, e.score, e.backpointer, e.label
                );
            }
        }
        out
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

struct Selection {
    score: f64,
    /// Value of the exact k-th best candidate the slot is centred on.
    top: f64,
    loss: Option<f64>,
    backpointers: Vec<f64>,
    labels: Vec<f64>,
}

/// Soft selection of every output slot from flattened candidates.
fn select(
    cands: &[f64],
    k: usize,
    v: usize,
    alpha: f64,
    losses: &[f64],
    costs: Option<&[f64]>,
) -> Result<Vec<(Selection, usize)>> {
    let top = exact_top_k(cands, k)?;
    let k_in = cands.len() / v;
    top.iter()
        .map(|&(m, idx)| {
            let w = soft_k_argmax(cands, m, alpha)?;
            let score = w.iter().zip(cands).map(|(a, c)| a * c).sum();
            let mut backpointers = vec![0.0; k_in];
            let mut labels = vec![0.0; v];
            for (j, wj) in w.iter().enumerate() {
                backpointers[j / v] += wj;
                labels[j % v] += wj;
            }
            let loss = costs.map(|c| {
                backpointers
                    .iter()
                    .zip(losses)
                    .map(|(a, l)| a * l)
                    .sum::<f64>()
                    + labels.iter().zip(c).map(|(a, cv)| a * cv).sum::<f64>()
            });
            Ok((
                Selection {
                    score,
                    top: m,
                    loss,
                    backpointers,
                    labels,
                },
                idx,
            ))
        })
        .collect()
}

fn finish(
    mut histories: Vec<Vec<usize>>,
    scores: &[f64],
    finished: Option<&[bool]>,
    trace: Vec<Vec<MapTraceEntry>>,
) -> MapDecode {
    let finals: Vec<f64> = match finished {
        Some(f) => scores
            .iter()
            .zip(final_offsets(f))
            .map(|(s, o)| s + o)
            .collect(),
        None => scores.to_vec(),
    };
    let winner = argmax(&finals);
    let mut tokens = histories.swap_remove(winner);
    if finished.is_some() {
        if let Some(pos) = tokens.iter().position(|t| *t == EOS) {
            tokens.truncate(pos + 1);
        }
    }
    MapDecode {
        tokens,
        score: scores[winner],
        trace,
    }
}

/// Adds the variable-length masks of [`eos_masks`] to flattened candidates
/// `score + step`.
fn mask_candidates(cands: &mut [f64], scores: &[f64], finished: &[bool], v: usize) {
    let (keep, offset) = eos_masks(finished, v);
    for (j, c) in cands.iter_mut().enumerate() {
        let base = scores[j / v];
        *c = base + keep[j] * (*c - base) + offset[j];
    }
}

/// Relaxed beam dynamics with committed bookkeeping over any scorer: each slot
/// carries its soft score but continues from the state and label of its exact
/// k-th best candidate. The output is traced from the slot with the highest
/// final soft score.
///
/// Runs exactly `steps` steps; with `cut_at_eos` the output is cut after its
/// first EOS. `gold`, when given, only fills the loss column of the trace.
pub fn committed_map_decode<S: StepScorer>(
    scorer: &S,
    steps: usize,
    k: usize,
    alpha: f64,
    cut_at_eos: bool,
    gold: Option<&[usize]>,
) -> Result<MapDecode> {
    if k == 0 {
        return Err(Error::Contract("beam size must be at least 1".into()));
    }
    let gold = gold.map(|g| padded_gold(g, steps));
    let v = scorer.vocab_size();
    let mut states = vec![scorer.initial()?; k];
    let mut scores = vec![INIT_SCORE; k];
    scores[0] = 0.0;
    let mut losses = vec![0.0; k];
    let mut histories: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut finished = cut_at_eos.then(|| vec![false; k]);
    let mut trace = Vec::with_capacity(steps);
    for t in 0..steps {
        let mut posts = Vec::with_capacity(k);
        let mut cands = Vec::with_capacity(k * v);
        for (b, st) in states.iter().enumerate() {
            let (s, post) = scorer.step(st)?;
            cands.extend(s.into_iter().map(|x| scores[b] + x));
            posts.push(post);
        }
        if let Some(f) = &finished {
            mask_candidates(&mut cands, &scores, f, v);
        }
        let costs: Option<Vec<f64>> = gold
            .as_ref()
            .map(|g| (0..v).map(|tok| hamming_cost(tok, g[t])).collect());
        let sel = select(&cands, k, v, alpha, &losses, costs.as_deref())?;
        let mut entries = Vec::with_capacity(k);
        let mut next_states = Vec::with_capacity(k);
        let mut next_hist = Vec::with_capacity(k);
        for (slot, (s, idx)) in sel.iter().enumerate() {
            let (b, tok) = (idx / v, idx % v);
            next_states.push(scorer.feed(&posts[b], tok));
            let mut h = histories[b].clone();
            h.push(tok);
            next_hist.push(h);
            entries.push(MapTraceEntry {
                slot,
                score: s.score,
                loss: s.loss,
                backpointer: b,
                label: tok,
            });
        }
        if let Some(f) = &mut finished {
            *f = finished_slots(
                &sel.iter().map(|(s, idx)| (s.top, *idx)).collect::<Vec<_>>(),
                v,
            );
        }
        scores = sel.iter().map(|(s, _)| s.score).collect();
        losses = sel.iter().map(|(s, _)| s.loss.unwrap_or(0.0)).collect();
        states = next_states;
        histories = next_hist;
        trace.push(entries);
    }
    Ok(finish(histories, &scores, finished.as_deref(), trace))
}

/// Soft-beam MAP decoding of one input under the model's scoring mode.
///
/// Runs `|x|` steps for tagging and `t_max` steps for transduction, where
/// the output is cut after its first EOS.
pub fn soft_beam_map_decode(
    params: &ModelParams,
    x: &[usize],
    contract: LengthContract,
    k: usize,
    alpha: f64,
    mode: MapMode,
    gold: Option<&[usize]>,
) -> Result<MapDecode> {
    let steps = contract.soft_steps(x.len());
    let cut = matches!(contract, LengthContract::Transduction { .. });
    match mode {
        MapMode::Committed => {
            committed_map_decode(&infer::Decoder::new(params, x)?, steps, k, alpha, cut, gold)
        }
        MapMode::SoftStates => soft_states_map_decode(params, x, steps, k, alpha, cut, gold),
    }
}

fn soft_states_map_decode(
    params: &ModelParams,
    x: &[usize],
    steps: usize,
    k: usize,
    alpha: f64,
    cut_at_eos: bool,
    gold: Option<&[usize]>,
) -> Result<MapDecode> {
    if k == 0 {
        return Err(Error::Contract("beam size must be at least 1".into()));
    }
    let gold = gold.map(|g| padded_gold(g, steps));
    let (v, d, h) = (
        params.config.tgt_vocab,
        params.config.embed_dim,
        params.config.hidden_dim,
    );
    let norm = params.config.normalization;
    let ann = infer::encode(params, x)?;
    let mut states: Vec<DecoderState> = vec![infer::init_decoder(params, &ann); k];
    let mut inputs: Vec<Vec<f64>> = vec![infer::target_embedding(params, BOS).to_vec(); k];
    let mut scores = vec![INIT_SCORE; k];
    scores[0] = 0.0;
    let mut losses = vec![0.0; k];
    let mut histories: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut finished = cut_at_eos.then(|| vec![false; k]);
    let mut trace = Vec::with_capacity(steps);
    for t in 0..steps {
        let mut posts = Vec::with_capacity(k);
        let mut cands = Vec::with_capacity(k * v);
        for b in 0..k {
            let (post, logits) =
                infer::decoder_step_embedded(params, &states[b], &inputs[b], &ann)?;
            cands.extend(
                infer::step_log_scores(norm, &logits)
                    .into_iter()
                    .map(|s| scores[b] + s),
            );
            posts.push(post);
        }
        if let Some(f) = &finished {
            mask_candidates(&mut cands, &scores, f, v);
        }
        let costs: Option<Vec<f64>> = gold
            .as_ref()
            .map(|g| (0..v).map(|tok| hamming_cost(tok, g[t])).collect());
        let sel = select(&cands, k, v, alpha, &losses, costs.as_deref())?;
        let mut entries = Vec::with_capacity(k);
        let mut next_states = Vec::with_capacity(k);
        let mut next_inputs = Vec::with_capacity(k);
        let mut next_hist = Vec::with_capacity(k);
        let mut committed = Vec::with_capacity(k);
        for (slot, (s, _)) in sel.iter().enumerate() {
            let mut mixed = DecoderState {
                hidden: vec![0.0; h],
                cell: vec![0.0; h],
                step: posts[0].step,
            };
            for (b, a) in s.backpointers.iter().enumerate() {
                for j in 0..h {
                    mixed.hidden[j] += a * posts[b].hidden[j];
                    mixed.cell[j] += a * posts[b].cell[j];
                }
            }
            let mut emb = vec![0.0; d];
            for (tok, a) in s.labels.iter().enumerate() {
                for (e, r) in emb.iter_mut().zip(infer::target_embedding(params, tok)) {
                    *e += a * r;
                }
            }
            let (b_map, v_map) = (argmax(&s.backpointers), argmax(&s.labels));
            committed.push((s.top, b_map * v + v_map));
            let mut hist = histories[b_map].clone();
            hist.push(v_map);
            next_states.push(mixed);
            next_inputs.push(emb);
            next_hist.push(hist);
            entries.push(MapTraceEntry {
                slot,
                score: s.score,
                loss: s.loss,
                backpointer: b_map,
                label: v_map,
            });
        }
        if let Some(f) = &mut finished {
            *f = finished_slots(&committed, v);
        }
        scores = sel.iter().map(|(s, _)| s.score).collect();
        losses = sel.iter().map(|(s, _)| s.loss.unwrap_or(0.0)).collect();
        states = next_states;
        inputs = next_inputs;
        histories = next_hist;
        trace.push(entries);
    }
    Ok(finish(histories, &scores, finished.as_deref(), trace))
}
