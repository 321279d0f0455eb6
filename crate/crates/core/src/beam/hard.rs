use super::{Horizon, StepScorer};
use crate::error::{Error, Result};
use crate::{BOS, EOS, PAD};

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub score: f64,
    pub finished: bool,
}

/// One slot of the beam after a step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub parent: usize,
    /// `None` when a finished hypothesis was carried over.
    pub token: Option<usize>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamOutput {
    pub best: Hypothesis,
    /// Final beam, best first.
    pub beam: Vec<Hypothesis>,
    /// Per step, the selected slots in rank order.
    pub trace: Vec<Vec<TraceEntry>>,
}

struct Slot<St> {
    hyp: Hypothesis,
    state: St,
}

/// Standard beam search over step log-scores.
///
/// Candidates are ranked by score, then by lower flat index `slot·|V| + v`.
/// With [`Horizon::UntilEos`], live hypotheses may not emit PAD or BOS, a
/// hypothesis ending in EOS is finished and competes for a slot with its score
/// unchanged, and search stops when every slot is finished or the step limit
/// is reached. Scores are never length-normalized.
pub fn hard_beam_search<S: StepScorer>(
    scorer: &S,
    k: usize,
    horizon: Horizon,
) -> Result<BeamOutput> {
    if k == 0 {
        return Err(Error::Contract("beam size must be at least 1".into()));
    }
    let v = scorer.vocab_size();
    let until_eos = matches!(horizon, Horizon::UntilEos(_));
    let mut beam = vec![Slot {
        hyp: Hypothesis {
            tokens: Vec::new(),
            score: 0.0,
            finished: false,
        },
        state: scorer.initial()?,
    }];
    let mut trace = Vec::new();
    for _ in 0..horizon.max_steps() {
        if beam.iter().all(|s| s.hyp.finished) {
            break;
        }
        // (score, flat index, parent, token, post-step state)
        let mut cands: Vec<(f64, usize, usize, Option<usize>)> = Vec::new();
        let mut posts = Vec::with_capacity(beam.len());
        for (b, slot) in beam.iter().enumerate() {
            if slot.hyp.finished {
                cands.push((slot.hyp.score, b * v + PAD, b, None));
                posts.push(None);
                continue;
            }
            let (scores, post) = scorer.step(&slot.state)?;
            if scores.len() != v {
                return Err(Error::Contract(format!(
                    "scorer returned {} scores for |V| = {v}",
                    scores.len()
                )));
            }
            for (tok, s) in scores.iter().enumerate() {
                if until_eos && (tok == PAD || tok == BOS) {
                    continue;
                }
                cands.push((slot.hyp.score + s, b * v + tok, b, Some(tok)));
            }
            posts.push(Some(post));
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        cands.truncate(k);
        let mut next = Vec::with_capacity(cands.len());
        let mut entries = Vec::with_capacity(cands.len());
        for &(score, _, parent, token) in &cands {
            let prev = &beam[parent];
            let slot = match token {
                None => Slot {
                    hyp: Hypothesis {
                        score,
                        ..prev.hyp.clone()
                    },
                    state: prev.state.clone(),
                },
                Some(tok) => {
                    let mut tokens = prev.hyp.tokens.clone();
                    tokens.push(tok);
                    let post = posts[parent]
                        .as_ref()
                        .expect("live slot has a post-step state");
                    Slot {
                        hyp: Hypothesis {
                            tokens,
                            score,
                            finished: until_eos && tok == EOS,
                        },
                        state: scorer.feed(post, tok),
                    }
                }
            };
            entries.push(TraceEntry {
                parent,
                token,
                score,
            });
            next.push(slot);
        }
        trace.push(entries);
        beam = next;
    }
    let hyps: Vec<Hypothesis> = beam.into_iter().map(|s| s.hyp).collect();
    // Prefer completed outputs; fall back to the best truncated one.
    let best = hyps
        .iter()
        .find(|h| h.finished || !until_eos)
        .unwrap_or(&hyps[0])
        .clone();
    Ok(BeamOutput {
        best,
        beam: hyps,
        trace,
    })
}

pub fn greedy<S: StepScorer>(scorer: &S, horizon: Horizon) -> Result<BeamOutput> {
    hard_beam_search(scorer, 1, horizon)
}

/// Highest-scoring sequence by enumeration; ties go to the lexicographically
/// first sequence. Only for tiny spaces.
pub fn exhaustive_search<S: StepScorer>(scorer: &S, horizon: Horizon) -> Result<Hypothesis> {
    fn walk<S: StepScorer>(
        scorer: &S,
        horizon: Horizon,
        state: &S::State,
        prefix: &mut Vec<usize>,
        score: f64,
        best: &mut Option<Hypothesis>,
    ) -> Result<()> {
        let until_eos = matches!(horizon, Horizon::UntilEos(_));
        let done =
            prefix.len() == horizon.max_steps() || (until_eos && prefix.last() == Some(&EOS));
        if done {
            if best.as_ref().is_none_or(|b| score > b.score) {
                *best = Some(Hypothesis {
                    tokens: prefix.clone(),
                    score,
                    finished: prefix.last() == Some(&EOS),
                });
            }
            return Ok(());
        }
        let (scores, post) = scorer.step(state)?;
        for (tok, s) in scores.iter().enumerate() {
            if until_eos && (tok == PAD || tok == BOS) {
                continue;
            }
            prefix.push(tok);
            walk(
                scorer,
                horizon,
                &scorer.feed(&post, tok),
                prefix,
                score + s,
                best,
            )?;
            prefix.pop();
        }
        Ok(())
    }
    let mut best = None;
    walk(
        scorer,
        horizon,
        &scorer.initial()?,
        &mut Vec::new(),
        0.0,
        &mut best,
    )?;
    best.ok_or_else(|| Error::Contract("empty search space".into()))
}

/// Scorer backed by a function of the prefix; used for hand-built examples.
pub struct TableScorer<F> {
    vocab: usize,
    table: F,
}

impl<F: Fn(&[usize]) -> Vec<f64>> TableScorer<F> {
    pub fn new(vocab: usize, table: F) -> Self {
        Self { vocab, table }
    }
}

impl<F: Fn(&[usize]) -> Vec<f64>> StepScorer for TableScorer<F> {
    type State = Vec<usize>;

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn initial(&self) -> Result<Vec<usize>> {
        Ok(Vec::new())
    }

    fn step(&self, prefix: &Vec<usize>) -> Result<(Vec<f64>, Vec<usize>)> {
        Ok(((self.table)(prefix), prefix.clone()))
    }

    fn feed(&self, prefix: &Vec<usize>, token: usize) -> Vec<usize> {
        let mut p = prefix.clone();
        p.push(token);
        p
    }
}
