//! Hard beam search, greedy decoding, and the continuous relaxation of beam
//! search used for search-aware training.
//!
//! The relaxation replaces the k-th selection with a peaked softmax over all
//! `K·|V|` successors:
//!
//! ```text
//! W^(k) = softmax_j(-α (C_j - m_k)²)
//! ```
//!
//! where `C` is the flattened candidate score matrix and `m_k` its exact k-th
//! largest value (its position is chosen discretely). Slot `k` then carries `Σ W^(k) C` as its
//! score, `Σ W^(k) (loss_b + cost_v)` as its loss, the row marginals of
//! `W^(k)` as soft backpointers over previous slots, and the column marginals
//! as a soft label over the vocabulary.

mod hard;
mod map;
mod soft;

#[cfg(test)]
mod tests;

pub use hard::{
    exhaustive_search, greedy, hard_beam_search, BeamOutput, Hypothesis, TableScorer, TraceEntry,
};
pub use map::{committed_map_decode, soft_beam_map_decode, MapDecode, MapMode, MapTraceEntry};
pub use soft::{
    candidate_scores, padded_gold, peaked_weights, soft_beam_init, soft_beam_objective,
    soft_beam_step, soft_transition, SoftBeamState, Transition, INIT_SCORE,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LengthContract;
use crate::{BOS, EOS, PAD};

/// Incremental successor scorer driven by a decoder.
pub trait StepScorer {
    type State: Clone;

    fn vocab_size(&self) -> usize;

    fn initial(&self) -> Result<Self::State>;

    /// Step log-scores over the vocabulary and the state after the step,
    /// still awaiting the chosen token.
    fn step(&self, state: &Self::State) -> Result<(Vec<f64>, Self::State)>;

    /// Commits `token` as the next input.
    fn feed(&self, state: &Self::State, token: usize) -> Self::State;
}

/// How long hard decoding runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Horizon {
    /// Exactly this many steps over the full vocabulary.
    Fixed(usize),
    /// Until every hypothesis has emitted EOS, or this many steps.
    UntilEos(usize),
}

impl Horizon {
    pub fn for_contract(contract: LengthContract, input_len: usize) -> Self {
        match contract {
            LengthContract::Tagging => Horizon::Fixed(input_len),
            LengthContract::Transduction { t_max } => Horizon::UntilEos(t_max),
        }
    }

    pub fn max_steps(&self) -> usize {
        match *self {
            Horizon::Fixed(n) | Horizon::UntilEos(n) => n,
        }
    }
}

/// Inverse-temperature schedule `α(e) = min(α0 · g^e, α_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub alpha0: f64,
    pub growth: f64,
    pub alpha_max: f64,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self {
            alpha0: 1.0,
            growth: 2.0,
            alpha_max: 1000.0,
        }
    }
}

impl AnnealSchedule {
    pub fn new(alpha0: f64, growth: f64, alpha_max: f64) -> Result<Self> {
        let s = Self {
            alpha0,
            growth,
            alpha_max,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha0 > 0.0 && self.alpha0.is_finite()) {
            return Err(Error::Config(format!(
                "alpha0 must be positive, got {}",
                self.alpha0
            )));
        }
        if !(self.growth >= 1.0 && self.growth.is_finite()) {
            return Err(Error::Config(format!(
                "alpha growth must be at least 1, got {}",
                self.growth
            )));
        }
        if !(self.alpha_max >= self.alpha0 && self.alpha_max.is_finite()) {
            return Err(Error::Config(format!(
                "alpha_max {} must be finite and at least alpha0 {}",
                self.alpha_max, self.alpha0
            )));
        }
        Ok(())
    }

    pub fn alpha(&self, epoch: usize) -> f64 {
        let e = i32::try_from(epoch).unwrap_or(i32::MAX);
        (self.alpha0 * self.growth.powi(e)).min(self.alpha_max)
    }
}

/// Whether a slot whose committed label is `tok` has ended: EOS ends a
/// hypothesis and PAD is only ever emitted after it.
pub fn ends_hypothesis(tok: usize) -> bool {
    tok == EOS || tok == PAD
}

/// Candidate masks for variable-length relaxed dynamics, mirroring hard beam
/// search: a finished slot has the single successor PAD at its unchanged
/// score, and a live slot may not emit PAD or BOS. Returns `(keep, offset)`
/// over the flattened `[K, |V|]` candidates, applied as `keep·step + offset`.
pub fn eos_masks(finished: &[bool], v: usize) -> (Vec<f64>, Vec<f64>) {
    let mut keep = Vec::with_capacity(finished.len() * v);
    let mut offset = Vec::with_capacity(finished.len() * v);
    for &done in finished {
        for tok in 0..v {
            if done {
                keep.push(0.0);
                offset.push(if tok == PAD { 0.0 } else { INIT_SCORE });
            } else {
                keep.push(1.0);
                offset.push(if tok == PAD || tok == BOS {
                    INIT_SCORE
                } else {
                    0.0
                });
            }
        }
    }
    (keep, offset)
}

/// Finished flags of the slots selected as `top` (value, flat index) pairs;
/// slots centred on masked candidates never count as finished.
pub fn finished_slots(top: &[(f64, usize)], v: usize) -> Vec<bool> {
    top.iter()
        .map(|&(score, idx)| score > INIT_SCORE / 2.0 && ends_hypothesis(idx % v))
        .collect()
}

/// Final-selection offsets: when any slot has finished, unfinished slots are
/// pushed out of contention, as hard beam search prefers completed outputs.
pub fn final_offsets(finished: &[bool]) -> Vec<f64> {
    let any = finished.iter().any(|f| *f);
    finished
        .iter()
        .map(|&f| if any && !f { INIT_SCORE } else { 0.0 })
        .collect()
}

/// Per-token Hamming cost. Past the gold EOS the gold token is PAD, and
/// emitting PAD or EOS there is free.
pub fn hamming_cost(v: usize, gold: usize) -> f64 {
    if gold == PAD {
        if v == PAD || v == EOS {
            0.0
        } else {
            1.0
        }
    } else if v == gold {
        0.0
    } else {
        1.0
    }
}

/// The `k` largest values with their indices, ties broken by lower index.
pub fn exact_top_k(scores: &[f64], k: usize) -> Result<Vec<(f64, usize)>> {
    if k == 0 || k > scores.len() {
        return Err(Error::Contract(format!(
            "top-{k} of {} scores",
            scores.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(idx.into_iter().take(k).map(|i| (scores[i], i)).collect())
}

/// Peaked weights `softmax(-α (s - m)²)`, max-subtracted.
pub fn soft_k_argmax(scores: &[f64], m: f64, alpha: f64) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    let logits: Vec<f64> = scores.iter().map(|s| -alpha * (s - m) * (s - m)).collect();
    Ok(crate::model::infer::softmax(&logits))
}
