//! Corpus-level decoding and evaluation.

use serde::{Deserialize, Serialize};

use crate::beam::{greedy, hard_beam_search, soft_beam_map_decode, Horizon, MapMode};
use crate::error::{Error, Result};
use crate::metrics::{Bucket, DecodeMode, EvalReport};
use crate::model::infer::Decoder;
use crate::model::{ModelParams, Normalization};
use crate::tasks::{Corpus, TaskKind};
use crate::EOS;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "kebab-case")]
pub enum Strategy {
    Greedy,
    Beam { k: usize },
    SoftMap { k: usize, alpha: f64, mode: MapMode },
}

/// Decodes one input. `scores` overrides the checkpoint's scoring mode.
pub fn decode_one(
    params: &ModelParams,
    x: &[usize],
    task: TaskKind,
    t_max: Option<usize>,
    strategy: Strategy,
    scores: Option<Normalization>,
) -> Result<Vec<usize>> {
    let contract = match task {
        TaskKind::Tagging => crate::model::LengthContract::Tagging,
        TaskKind::Transduction => crate::model::LengthContract::Transduction {
            t_max: t_max
                .ok_or_else(|| Error::Config("transduction decoding needs t_max".into()))?,
        },
    };
    let norm = scores.unwrap_or(params.config.normalization);
    let horizon = Horizon::for_contract(contract, x.len());
    match strategy {
        Strategy::Greedy => {
            let dec = Decoder::new(params, x)?.with_scores(norm);
            Ok(greedy(&dec, horizon)?.best.tokens)
        }
        Strategy::Beam { k } => {
            let dec = Decoder::new(params, x)?.with_scores(norm);
            Ok(hard_beam_search(&dec, k, horizon)?.best.tokens)
        }
        Strategy::SoftMap { k, alpha, mode } => {
            let tokens = if norm == params.config.normalization {
                soft_beam_map_decode(params, x, contract, k, alpha, mode, None)?.tokens
            } else {
                let p = params.with_normalization(norm);
                soft_beam_map_decode(&p, x, contract, k, alpha, mode, None)?.tokens
            };
            Ok(tokens)
        }
    }
}

/// Errors unless the corpus vocabularies fit the checkpoint.
pub fn check_compatible(params: &ModelParams, corpus: &Corpus) -> Result<()> {
    let (s, t) = (corpus.src_vocab.len(), corpus.tgt_vocab.len());
    if s != params.config.src_vocab || t != params.config.tgt_vocab {
        return Err(Error::Data(format!(
            "corpus vocabularies ({s} source, {t} target) do not match the checkpoint ({} source, {} target)",
            params.config.src_vocab, params.config.tgt_vocab
        )));
    }
    Ok(())
}

pub fn decode_corpus(
    params: &ModelParams,
    corpus: &Corpus,
    strategy: Strategy,
    scores: Option<Normalization>,
) -> Result<Vec<Vec<usize>>> {
    check_compatible(params, corpus)?;
    corpus
        .examples
        .iter()
        .map(|(x, _)| decode_one(params, x, corpus.task, corpus.t_max, strategy, scores))
        .collect()
}

/// Prefix before the first EOS.
pub fn strip_eos(seq: &[usize]) -> Vec<usize> {
    seq.iter().take_while(|t| **t != EOS).copied().collect()
}

/// Scores predictions against the corpus golds; EOS is dropped on both sides
/// for transduction.
pub fn evaluate_predictions(
    corpus: &Corpus,
    preds: &[Vec<usize>],
    mode: DecodeMode,
    buckets: &[Bucket],
) -> Result<EvalReport> {
    let src_lens: Vec<usize> = corpus.examples.iter().map(|(x, _)| x.len()).collect();
    match corpus.task {
        TaskKind::Tagging => {
            let golds: Vec<Vec<usize>> = corpus.examples.iter().map(|(_, y)| y.clone()).collect();
            EvalReport::evaluate(corpus.task, mode, preds, &golds, &src_lens, buckets)
        }
        TaskKind::Transduction => {
            let golds: Vec<Vec<usize>> =
                corpus.examples.iter().map(|(_, y)| strip_eos(y)).collect();
            let preds: Vec<Vec<usize>> = preds.iter().map(|p| strip_eos(p)).collect();
            EvalReport::evaluate(corpus.task, mode, &preds, &golds, &src_lens, buckets)
        }
    }
}

pub fn evaluate(
    params: &ModelParams,
    corpus: &Corpus,
    strategy: Strategy,
    scores: Option<Normalization>,
    mode: DecodeMode,
    buckets: &[Bucket],
) -> Result<(Vec<Vec<usize>>, EvalReport)> {
    let preds = decode_corpus(params, corpus, strategy, scores)?;
    let report = evaluate_predictions(corpus, &preds, mode, buckets)?;
    Ok((preds, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::default_buckets;
    use crate::model::{AttentionMode, EncoderMode, ModelConfig};
    use crate::tasks::{gen_lookahead_tagging, gen_transduction, TaggingSpec, TransductionSpec};

    fn model(corpus: &Corpus, attention: AttentionMode) -> ModelParams {
        ModelParams::init(
            ModelConfig {
                src_vocab: corpus.src_vocab.len(),
                tgt_vocab: corpus.tgt_vocab.len(),
                embed_dim: 4,
                hidden_dim: 4,
                encoder: EncoderMode::Unidirectional,
                attention,
                normalization: Normalization::Local,
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn greedy_equals_beam_of_one() {
        let c = gen_transduction(&TransductionSpec {
            vocab_size: 6,
            min_len: 2,
            max_len: 4,
            t_max: 9,
            count: 20,
            ..Default::default()
        })
        .unwrap();
        let p = model(&c, AttentionMode::Content);
        for scores in [None, Some(Normalization::Global)] {
            assert_eq!(
                decode_corpus(&p, &c, Strategy::Greedy, scores).unwrap(),
                decode_corpus(&p, &c, Strategy::Beam { k: 1 }, scores).unwrap()
            );
        }
    }

    #[test]
    fn tagging_outputs_have_input_length() {
        let c = gen_lookahead_tagging(&TaggingSpec {
            vocab_size: 4,
            count: 10,
            ..Default::default()
        })
        .unwrap();
        let p = model(&c, AttentionMode::FixedPosition);
        for s in [
            Strategy::Greedy,
            Strategy::Beam { k: 3 },
            Strategy::SoftMap {
                k: 3,
                alpha: 10.0,
                mode: MapMode::Committed,
            },
        ] {
            let (preds, report) = evaluate(
                &p,
                &c,
                s,
                None,
                DecodeMode::PretrainBeam,
                &default_buckets(),
            )
            .unwrap();
            assert!(preds
                .iter()
                .zip(&c.examples)
                .all(|(p, (x, _))| p.len() == x.len()));
            assert!((0.0..=1.0).contains(&report.accuracy));
        }
    }

    #[test]
    fn vocabulary_mismatch_is_a_data_error() {
        let c = gen_lookahead_tagging(&TaggingSpec {
            vocab_size: 4,
            count: 2,
            ..Default::default()
        })
        .unwrap();
        let mut p = model(&c, AttentionMode::FixedPosition);
        p.config.tgt_vocab += 1;
        assert!(matches!(
            decode_corpus(&p, &c, Strategy::Greedy, None),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn eos_is_dropped_before_scoring() {
        assert_eq!(strip_eos(&[5, 6, EOS, 7]), vec![5, 6]);
        assert_eq!(strip_eos(&[5, 6]), vec![5, 6]);
    }
}
