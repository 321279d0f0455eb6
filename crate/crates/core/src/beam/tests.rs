use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::infer::{self, Decoder};
use crate::model::{AttentionMode, EncoderMode, ModelConfig, ModelParams, Normalization};
use crate::tensor::{grad_check, Tape};
use crate::{BOS, EOS, PAD};

fn tagger(
    tgt_vocab: usize,
    normalization: Normalization,
    seed: u64,
    head_scale: f64,
) -> ModelParams {
    let cfg = ModelConfig {
        src_vocab: 8,
        tgt_vocab,
        embed_dim: 4,
        hidden_dim: 5,
        encoder: EncoderMode::Unidirectional,
        attention: AttentionMode::FixedPosition,
        normalization,
    };
    let mut p = ModelParams::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbeef);
    for idx in [p.layout.out_w, p.layout.out_b, p.layout.tgt_embed] {
        p.block_mut(idx)
            .values
            .iter_mut()
            .for_each(|v| *v = head_scale * rng.gen_range(-1.0..1.0));
    }
    p
}

fn hamming(a: &[usize], b: &[usize]) -> f64 {
    a.iter().zip(b).filter(|(x, y)| x != y).count() as f64
}

#[test]
fn top_k_examples() {
    assert_eq!(
        exact_top_k(&[1.0, 3.0, 2.0], 2).unwrap(),
        vec![(3.0, 1), (2.0, 2)]
    );
    assert_eq!(
        exact_top_k(&[5.0, 5.0, 5.0], 2).unwrap(),
        vec![(5.0, 0), (5.0, 1)]
    );
    assert!(exact_top_k(&[1.0], 2).is_err());
    assert!(exact_top_k(&[1.0], 0).is_err());
}

#[test]
fn top_k_matches_full_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let xs: Vec<f64> = (0..50).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let mut sorted = xs.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let top = exact_top_k(&xs, 5).unwrap();
        for (i, (v, idx)) in top.iter().enumerate() {
            assert_eq!(*v, sorted[i]);
            assert_eq!(xs[*idx], *v);
        }
    }
}

#[test]
fn soft_k_argmax_examples() {
    let w = soft_k_argmax(&[1.0, 3.0, 2.0], 3.0, 1e6).unwrap();
    assert!(w[0] < 1e-12 && (w[1] - 1.0).abs() < 1e-12 && w[2] < 1e-12);
    let w = soft_k_argmax(&[0.0, 1.0], 1.0, 1.0).unwrap();
    let e = (-1f64).exp();
    assert!((w[0] - e / (1.0 + e)).abs() < 1e-15);
    assert!((w[0] - 0.26894).abs() < 1e-5 && (w[1] - 0.73106).abs() < 1e-5);
    let w = soft_k_argmax(&[2.5; 4], 2.5, 7.0).unwrap();
    assert!(w.iter().all(|x| (x - 0.25).abs() < 1e-15));
    assert!(soft_k_argmax(&[0.0], 0.0, 0.0).is_err());
}

#[test]
fn hamming_cost_rules() {
    assert_eq!(hamming_cost(7, 7), 0.0);
    assert_eq!(hamming_cost(7, 9), 1.0);
    assert_eq!(hamming_cost(PAD, PAD), 0.0);
    assert_eq!(hamming_cost(EOS, PAD), 0.0);
    assert_eq!(hamming_cost(5, PAD), 1.0);
    assert_eq!(hamming_cost(PAD, EOS), 1.0);
}

#[test]
fn anneal_schedule_grows_to_cap() {
    let s = AnnealSchedule::default();
    assert_eq!(s.alpha(0), 1.0);
    assert_eq!(s.alpha(3), 8.0);
    assert_eq!(s.alpha(10), 1000.0);
    assert_eq!(s.alpha(usize::MAX), 1000.0);
    let mut prev = 0.0;
    for e in 0..40 {
        assert!(s.alpha(e) >= prev);
        prev = s.alpha(e);
    }
    assert!(AnnealSchedule::new(0.0, 2.0, 10.0).is_err());
    assert!(AnnealSchedule::new(1.0, 0.5, 10.0).is_err());
    assert!(AnnealSchedule::new(5.0, 2.0, 1.0).is_err());
}

proptest! {
    #[test]
    fn peaked_weights_are_distributions(
        scores in proptest::collection::vec(-50.0f64..50.0, 1..40),
        pick in 0usize..40,
        alpha in 1e-3f64..1e4,
    ) {
        let m = scores[pick % scores.len()];
        let w = soft_k_argmax(&scores, m, alpha).unwrap();
        prop_assert!(w.iter().all(|x| *x >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn transition_weight_rows_are_distributions(
        cands in proptest::collection::vec(-20.0f64..20.0, 6),
        alpha in 1e-2f64..1e4,
    ) {
        let mut tape = Tape::new();
        let c = tape.constant(vec![2, 3], cands).unwrap();
        let l = tape.zeros(vec![2]).unwrap();
        let tr = soft_transition(&mut tape, c, l, &[0.0, 1.0, 1.0], 2, alpha).unwrap();
        for row in tape.value(tr.weights).chunks(6) {
            prop_assert!(row.iter().all(|x| *x >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        prop_assert!(tape.value(tr.losses).iter().all(|x| *x >= 0.0));
    }
}

/// Closed-form slot quantities by explicit sums over every `(b, v)`.
struct Brute {
    scores: Vec<f64>,
    losses: Vec<f64>,
    backpointers: Vec<Vec<f64>>,
    labels: Vec<Vec<f64>>,
}

fn brute_transition(c: &[Vec<f64>], losses: &[f64], costs: &[f64], k: usize, alpha: f64) -> Brute {
    let k_in = c.len();
    let v = c[0].len();
    let mut flat: Vec<(f64, usize, usize)> = Vec::new();
    for (b, row) in c.iter().enumerate() {
        for (tok, s) in row.iter().enumerate() {
            flat.push((*s, b, tok));
        }
    }
    let mut sorted: Vec<f64> = flat.iter().map(|f| f.0).collect();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut out = Brute {
        scores: vec![],
        losses: vec![],
        backpointers: vec![],
        labels: vec![],
    };
    for m in sorted.iter().take(k) {
        let z: f64 = flat
            .iter()
            .map(|(s, _, _)| (-alpha * (s - m).powi(2)).exp())
            .sum();
        let (mut score, mut loss) = (0.0, 0.0);
        let mut bp = vec![0.0; k_in];
        let mut lab = vec![0.0; v];
        for &(s, b, tok) in &flat {
            let w = (-alpha * (s - m).powi(2)).exp() / z;
            score += w * s;
            loss += w * (losses[b] + costs[tok]);
            bp[b] += w;
            lab[tok] += w;
        }
        out.scores.push(score);
        out.losses.push(loss);
        out.backpointers.push(bp);
        out.labels.push(lab);
    }
    out
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
}

#[test]
fn two_step_transition_matches_brute_force_sums() {
    let alpha = 2.0;
    let step_scores = [[[-0.2, -1.7], [-0.9, -0.5]], [[-1.1, -0.4], [-0.3, -1.6]]];
    let gold = [0, 1];
    let hidden0 = vec![0.3, -0.1, 0.8, 0.5, 0.2, -0.6];

    let mut tape = Tape::new();
    let mut scores = tape.constant(vec![2], vec![0.0, -0.35]).unwrap();
    let mut losses = tape.zeros(vec![2]).unwrap();
    let mut hidden = tape.constant(vec![2, 3], hidden0.clone()).unwrap();
    let (mut b_scores, mut b_losses, mut b_hidden) = (vec![0.0, -0.35], vec![0.0, 0.0], hidden0);
    for (t, table) in step_scores.iter().enumerate() {
        let costs: Vec<f64> = (0..2).map(|v| hamming_cost(v, gold[t])).collect();
        let step = tape.constant(vec![2, 2], table.concat()).unwrap();
        let col = tape.reshape(scores, vec![2, 1]).unwrap();
        let cands = tape.add(step, col).unwrap();
        let tr = soft_transition(&mut tape, cands, losses, &costs, 2, alpha).unwrap();
        let mixed = tape.matmul(tr.backpointers, hidden).unwrap();

        let c: Vec<Vec<f64>> = (0..2)
            .map(|b| table[b].iter().map(|s| s + b_scores[b]).collect())
            .collect();
        let brute = brute_transition(&c, &b_losses, &costs, 2, alpha);
        assert!(close(tape.value(tr.scores), &brute.scores, 1e-12));
        assert!(close(tape.value(tr.losses), &brute.losses, 1e-12));
        assert!(close(
            tape.value(tr.backpointers),
            &brute.backpointers.concat(),
            1e-12
        ));
        assert!(close(tape.value(tr.labels), &brute.labels.concat(), 1e-12));
        let expect_h: Vec<f64> = (0..2)
            .flat_map(|k| {
                let bp = brute.backpointers[k].clone();
                let bh = b_hidden.clone();
                (0..3).map(move |j| bp[0] * bh[j] + bp[1] * bh[3 + j])
            })
            .collect();
        assert!(close(tape.value(mixed), &expect_h, 1e-12));

        scores = tr.scores;
        losses = tr.losses;
        hidden = mixed;
        b_scores = brute.scores;
        b_losses = brute.losses;
        b_hidden = expect_h;
    }
}

#[test]
fn transition_gradients_match_finite_differences() {
    let c = crate::tensor::Param::new("c", vec![2, 3], vec![0.1, -0.4, 0.7, -0.2, 0.5, 0.0]);
    let l = crate::tensor::Param::new("l", vec![2], vec![0.5, 1.5]);
    let report = grad_check(
        |tape, leaves| -> Result<crate::tensor::Tensor> {
            let tr = soft_transition(tape, leaves[0], leaves[1], &[0.0, 1.0, 1.0], 2, 3.0)?;
            let a = tape.sum(tr.scores)?;
            let b = tape.sum(tr.losses)?;
            let s = tape.add(a, b)?;
            let h = tape.sum(tr.backpointers)?;
            Ok(tape.add(s, h)?)
        },
        &[c, l],
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn single_slot_first_step_candidates_are_log_softmax() {
    let p = tagger(6, Normalization::Local, 1, 1.0);
    let x = [3, 4, 5];
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape).unwrap();
    let ann = crate::model::graph::encode(&mut tape, &bound, &x).unwrap();
    let beam = soft_beam_init(&mut tape, &bound, &ann, 1, false).unwrap();
    let (cands, _) = candidate_scores(&mut tape, &bound, &beam, &ann).unwrap();
    let plain = infer::teacher_forced_logits(&p, &x, &[3]).unwrap();
    let expect = infer::step_log_scores(Normalization::Local, &plain[0]);
    assert!(close(tape.value(cands), &expect, 1e-12));
}

#[test]
fn replicated_slots_are_masked_by_initial_score() {
    let p = tagger(6, Normalization::Global, 2, 1.0);
    let x = [3, 4, 5];
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape).unwrap();
    let ann = crate::model::graph::encode(&mut tape, &bound, &x).unwrap();
    let beam = soft_beam_init(&mut tape, &bound, &ann, 2, false).unwrap();
    let (cands, _) = candidate_scores(&mut tape, &bound, &beam, &ann).unwrap();
    let vals = tape.value(cands);
    let max_logit = vals[..6].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert!(vals[6..].iter().all(|v| *v <= INIT_SCORE + max_logit));
    let tr = soft_transition(&mut tape, cands, beam.losses, &[0.0; 6], 2, 5.0).unwrap();
    let bp = tape.value(tr.backpointers);
    assert!(bp[1] == 0.0 && bp[3] == 0.0);
}

#[test]
fn hand_beam_trace() {
    let table = |prefix: &[usize]| match prefix {
        [] => vec![-0.5, -1.0],
        [0] => vec![-2.0, -0.1],
        [1] => vec![-0.2, -0.3],
        _ => unreachable!(),
    };
    let scorer = TableScorer::new(2, table);
    let out = hard_beam_search(&scorer, 2, Horizon::Fixed(2)).unwrap();
    assert_eq!(
        out.trace[0],
        vec![
            TraceEntry {
                parent: 0,
                token: Some(0),
                score: -0.5
            },
            TraceEntry {
                parent: 0,
                token: Some(1),
                score: -1.0
            },
        ]
    );
    assert_eq!(out.trace[1][0].parent, 0);
    assert_eq!(out.trace[1][0].token, Some(1));
    assert!((out.trace[1][0].score + 0.6).abs() < 1e-15);
    assert_eq!(
        (out.trace[1][1].parent, out.trace[1][1].token),
        (1, Some(0))
    );
    assert!((out.trace[1][1].score + 1.2).abs() < 1e-15);
    assert_eq!(out.best.tokens, vec![0, 1]);
    assert_eq!(out.beam[1].tokens, vec![1, 0]);
    // Greedy misses nothing here but takes a different second path.
    assert_eq!(
        greedy(&scorer, Horizon::Fixed(2)).unwrap().best.tokens,
        vec![0, 1]
    );
}

#[test]
fn ties_prefer_lower_flat_index() {
    let scorer = TableScorer::new(3, |_p: &[usize]| vec![0.0, 0.0, 0.0]);
    let out = hard_beam_search(&scorer, 2, Horizon::Fixed(2)).unwrap();
    assert_eq!(out.beam[0].tokens, vec![0, 0]);
    assert_eq!(out.beam[1].tokens, vec![0, 1]);
}

#[test]
fn finished_hypotheses_carry_over_until_all_end() {
    // EOS is attractive immediately but a longer path scores higher overall.
    let table = |prefix: &[usize]| -> Vec<f64> {
        match prefix {
            [] => vec![0.0, 0.0, -0.1, -0.5],
            [3] => vec![0.0, 0.0, -5.0, 0.3],
            [3, 3] => vec![0.0, 0.0, -0.01, -9.0],
            _ => vec![0.0, 0.0, -0.5, -0.5],
        }
    };
    let scorer = TableScorer::new(4, table);
    let out = hard_beam_search(&scorer, 2, Horizon::UntilEos(6)).unwrap();
    assert_eq!(out.best.tokens, vec![2]);
    assert!(out.best.finished);
    assert!(out.beam.iter().all(|h| h.finished));
    assert!(out
        .trace
        .iter()
        .flatten()
        .all(|e| e.token != Some(PAD) && e.token != Some(BOS)));
    let wide = hard_beam_search(&scorer, 3, Horizon::UntilEos(6)).unwrap();
    assert_eq!(wide.best.tokens, vec![2]);
    let ex = exhaustive_search(&scorer, Horizon::UntilEos(3)).unwrap();
    assert_eq!(ex.tokens, vec![2]);
}

#[test]
fn exact_search_limit_on_tiny_space() {
    for norm in [Normalization::Local, Normalization::Global] {
        for seed in 0..10 {
            let p = tagger(3, norm, seed, 2.0);
            let dec = Decoder::new(&p, &[3, 4, 5]).unwrap();
            let ex = exhaustive_search(&dec, Horizon::Fixed(3)).unwrap();
            let beam = hard_beam_search(&dec, 27, Horizon::Fixed(3)).unwrap();
            assert_eq!(beam.best.tokens, ex.tokens);
            assert!((beam.best.score - ex.score).abs() < 1e-12);
        }
    }
}

#[test]
fn greedy_is_beam_of_one() {
    let p = tagger(6, Normalization::Local, 9, 2.0);
    let dec = Decoder::new(&p, &[3, 4, 5, 6]).unwrap();
    let g = greedy(&dec, Horizon::Fixed(4)).unwrap();
    let b = hard_beam_search(&dec, 1, Horizon::Fixed(4)).unwrap();
    assert_eq!(g, b);
    let mut manual = Vec::new();
    let mut st = dec.initial().unwrap();
    for _ in 0..4 {
        let (s, post) = dec.step(&st).unwrap();
        let best = exact_top_k(&s, 1).unwrap()[0].1;
        manual.push(best);
        st = dec.feed(&post, best);
    }
    assert_eq!(g.best.tokens, manual);
}

fn objective(p: &ModelParams, x: &[usize], y: &[usize], k: usize, alpha: f64) -> f64 {
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape).unwrap();
    let j = soft_beam_objective(
        &mut tape,
        &bound,
        x,
        y,
        crate::model::LengthContract::Tagging,
        k,
        alpha,
    )
    .unwrap();
    tape.scalar(j)
}

#[test]
fn sharp_relaxation_matches_hard_beam() {
    for (seed, norm) in [
        (1, Normalization::Local),
        (2, Normalization::Global),
        (3, Normalization::Local),
    ] {
        let p = tagger(5, norm, seed, 3.0);
        let x = [3, 4, 5, 6];
        let y = [3, 4, 4, 3];
        let hard = hard_beam_search(&Decoder::new(&p, &x).unwrap(), 2, Horizon::Fixed(4)).unwrap();
        let map = soft_beam_map_decode(
            &p,
            &x,
            crate::model::LengthContract::Tagging,
            2,
            1e6,
            MapMode::Committed,
            None,
        )
        .unwrap();
        assert_eq!(map.tokens, hard.best.tokens);
        for (t, step) in hard.trace.iter().enumerate() {
            for (slot, e) in step.iter().enumerate() {
                assert!((map.trace[t][slot].score - e.score).abs() < 1e-6);
            }
        }
        let j = hamming(&hard.best.tokens, &y);
        assert!((objective(&p, &x, &y, 2, 1e6) - j).abs() < 1e-4);
    }
}

#[test]
fn single_slot_relaxation_is_soft_greedy() {
    let p = tagger(5, Normalization::Local, 4, 1.0);
    let x = [3, 4];
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape).unwrap();
    let ann = crate::model::graph::encode(&mut tape, &bound, &x).unwrap();
    let beam = soft_beam_init(&mut tape, &bound, &ann, 1, false).unwrap();
    let (cands, _) = candidate_scores(&mut tape, &bound, &beam, &ann).unwrap();
    let c = tape.value(cands).to_vec();
    let (_, tr) = soft_beam_step(&mut tape, &bound, &beam, &ann, 3, 2.0).unwrap();
    let m = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert!(close(
        tape.value(tr.weights),
        &soft_k_argmax(&c, m, 2.0).unwrap(),
        1e-12
    ));
    assert_eq!(tape.value(tr.labels), tape.value(tr.weights));
}

#[test]
fn perfect_model_has_near_zero_surrogate() {
    let mut p = tagger(6, Normalization::Local, 5, 0.0);
    let ob = p.layout.out_b;
    p.block_mut(ob).values[4] = 12.0;
    let x = [3, 5, 6, 7];
    assert!(objective(&p, &x, &[4, 4, 4, 4], 3, 100.0) < 1e-3);
}

#[test]
fn map_decode_with_one_slot_is_greedy() {
    for alpha in [0.1, 2.0, 1e4] {
        let p = tagger(6, Normalization::Local, 6, 1.0);
        let x = [3, 4, 5, 6, 7];
        let g = greedy(&Decoder::new(&p, &x).unwrap(), Horizon::Fixed(5)).unwrap();
        for mode in [MapMode::Committed, MapMode::SoftStates] {
            let m = soft_beam_map_decode(
                &p,
                &x,
                crate::model::LengthContract::Tagging,
                1,
                alpha,
                mode,
                None,
            )
            .unwrap();
            assert_eq!(m.tokens, g.best.tokens, "{mode:?} alpha {alpha}");
        }
    }
}

#[test]
fn hand_map_trace_at_moderate_alpha() {
    let table = |prefix: &[usize]| match prefix {
        [] => vec![-0.5, -1.0],
        [0] => vec![-2.0, -0.1],
        [1] => vec![-0.2, -0.3],
        _ => unreachable!(),
    };
    let scorer = TableScorer::new(2, table);
    let alpha = 2.0;
    let out = committed_map_decode(&scorer, 2, 2, alpha, false, Some(&[0, 1])).unwrap();

    // Step 1: the replicated slot is masked, so each slot mixes the two
    // successors of the empty prefix with weights softmax(-2 d²).
    let q = 1.0 / (1.0 + (-0.5f64).exp());
    let s1 = [q * -0.5 + (1.0 - q) * -1.0, (1.0 - q) * -0.5 + q * -1.0];
    let l1 = [(1.0 - q), q];
    assert!((out.trace[0][0].score - s1[0]).abs() < 1e-12);
    assert!((out.trace[0][1].score - s1[1]).abs() < 1e-12);
    assert!((out.trace[0][0].loss.unwrap() - l1[0]).abs() < 1e-12);
    assert!((out.trace[0][1].loss.unwrap() - l1[1]).abs() < 1e-12);
    assert_eq!((out.trace[0][0].backpointer, out.trace[0][0].label), (0, 0));
    assert_eq!((out.trace[0][1].backpointer, out.trace[0][1].label), (0, 1));

    // Step 2: slot 0 continues prefix [0], slot 1 prefix [1].
    let c = [s1[0] - 2.0, s1[0] - 0.1, s1[1] - 0.2, s1[1] - 0.3];
    let cost = [1.0, 0.0, 1.0, 0.0];
    let prev = [l1[0], l1[0], l1[1], l1[1]];
    let mut order = [0usize, 1, 2, 3];
    order.sort_by(|a, b| c[*b].partial_cmp(&c[*a]).unwrap());
    for slot in 0..2 {
        let m = c[order[slot]];
        let e: Vec<f64> = c.iter().map(|v| (-alpha * (v - m).powi(2)).exp()).collect();
        let z: f64 = e.iter().sum();
        let score: f64 = e.iter().zip(&c).map(|(w, v)| w * v).sum::<f64>() / z;
        let loss: f64 = (0..4).map(|j| e[j] * (prev[j] + cost[j])).sum::<f64>() / z;
        let entry = out.trace[1][slot];
        assert!((entry.score - score).abs() < 1e-12);
        assert!((entry.loss.unwrap() - loss).abs() < 1e-12);
        assert_eq!(
            (entry.backpointer, entry.label),
            (order[slot] / 2, order[slot] % 2)
        );
    }
    assert_eq!(out.tokens, vec![0, 1]);
    let text = out.format_trace();
    assert_eq!(text.lines().count(), 4);
    assert!(text.starts_with("step=0 slot=0 score="));
}

#[test]
fn surrogate_gradients_match_finite_differences() {
    for norm in [Normalization::Local, Normalization::Global] {
        let p = tagger(4, norm, 7, 1.0);
        let (x, y) = ([3, 4, 5], [3, 3, 2]);
        let report = grad_check(
            |tape, leaves| {
                let bound = p.bind_leaves(leaves)?;
                soft_beam_objective(
                    tape,
                    &bound,
                    &x,
                    &y,
                    crate::model::LengthContract::Tagging,
                    2,
                    5.0,
                )
            },
            &p.blocks,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{norm:?}: {report:?}");
    }
}

#[test]
fn transduction_surrogate_pads_gold() {
    let cfg = ModelConfig {
        src_vocab: 8,
        tgt_vocab: 6,
        embed_dim: 3,
        hidden_dim: 4,
        encoder: EncoderMode::Bidirectional,
        attention: AttentionMode::Content,
        normalization: Normalization::Local,
    };
    let p = ModelParams::init(cfg, 8).unwrap();
    let contract = crate::model::LengthContract::Transduction { t_max: 5 };
    assert_eq!(padded_gold(&[3, EOS], 5), vec![3, EOS, PAD, PAD, PAD]);
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape).unwrap();
    let j = soft_beam_objective(&mut tape, &bound, &[3, 4], &[3, EOS], contract, 3, 4.0).unwrap();
    let v = tape.scalar(j);
    assert!(v >= 0.0 && v <= 5.0);
    let d = soft_beam_map_decode(&p, &[3, 4], contract, 3, 4.0, MapMode::Committed, None).unwrap();
    assert!(d.tokens.len() <= 5);
    assert!(d
        .tokens
        .iter()
        .position(|t| *t == EOS)
        .is_none_or(|i| i + 1 == d.tokens.len()));
}

#[test]
fn label_bias_construction_in_global_mode() {
    // Step 1: the bad token 1 outscores the good token 0. Step 2: every
    // successor of the bad prefix is driven to a negligible score.
    let table = |prefix: &[usize]| match prefix {
        [] => vec![0.0, 1.0],
        [0] => vec![0.5, 0.3],
        [1] => vec![-30.0, -30.0],
        _ => unreachable!(),
    };
    let out = hard_beam_search(&TableScorer::new(2, table), 2, Horizon::Fixed(2)).unwrap();
    assert!(out.beam.iter().all(|h| h.tokens[0] == 0));
}

fn transducer(normalization: Normalization, seed: u64) -> ModelParams {
    let cfg = ModelConfig {
        src_vocab: 8,
        tgt_vocab: 6,
        embed_dim: 4,
        hidden_dim: 5,
        encoder: EncoderMode::Bidirectional,
        attention: AttentionMode::Content,
        normalization,
    };
    let mut p = ModelParams::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    for idx in [p.layout.out_w, p.layout.out_b, p.layout.tgt_embed] {
        p.block_mut(idx)
            .values
            .iter_mut()
            .for_each(|v| *v = 3.0 * rng.gen_range(-1.0..1.0));
    }
    p
}

#[test]
fn sharp_transduction_relaxation_matches_hard_beam() {
    let x = [3, 4, 5];
    let y = [4, 3, EOS];
    let contract = crate::model::LengthContract::Transduction { t_max: 5 };
    for seed in 0..12 {
        let norm = if seed % 2 == 0 {
            Normalization::Local
        } else {
            Normalization::Global
        };
        let p = transducer(norm, seed);
        let hard =
            hard_beam_search(&Decoder::new(&p, &x).unwrap(), 2, Horizon::UntilEos(5)).unwrap();
        for mode in [MapMode::Committed, MapMode::SoftStates] {
            let map = soft_beam_map_decode(&p, &x, contract, 2, 1e6, mode, None).unwrap();
            assert_eq!(map.tokens, hard.best.tokens, "seed {seed} {mode:?}");
        }
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape).unwrap();
        let j = soft_beam_objective(&mut tape, &bound, &x, &y, contract, 2, 1e6).unwrap();
        let want = padded_gold(&hard.best.tokens, 5)
            .iter()
            .zip(padded_gold(&y, 5))
            .filter(|&(&a, b)| a != b && !(b == PAD && a == EOS))
            .count() as f64;
        assert!(
            (tape.scalar(j) - want).abs() < 1e-4,
            "seed {seed}: {} vs {want} {:?}",
            tape.scalar(j),
            hard.best.tokens
        );
    }
}

#[test]
fn finished_slots_only_extend_with_pad() {
    let (keep, offset) = eos_masks(&[true, false], 4);
    assert_eq!(
        keep,
        vec![0.0; 4].into_iter().chain([1.0; 4]).collect::<Vec<_>>()
    );
    for tok in 0..4 {
        let want = if tok == PAD { 0.0 } else { INIT_SCORE };
        assert_eq!(offset[tok], want);
        let live = if tok == PAD || tok == BOS {
            INIT_SCORE
        } else {
            0.0
        };
        assert_eq!(offset[4 + tok], live);
    }
    let top = [
        (-1.0, EOS),
        (-2.0, 4 + PAD),
        (INIT_SCORE, PAD),
        (-3.0, 4 + 3),
    ];
    assert_eq!(finished_slots(&top, 4), vec![true, true, false, false]);
    assert_eq!(final_offsets(&[false, true]), vec![INIT_SCORE, 0.0]);
    assert_eq!(final_offsets(&[false, false]), vec![0.0, 0.0]);
}
