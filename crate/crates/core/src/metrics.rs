//! Accuracy, corpus BLEU, length buckets, and report tables.
//!
//! BLEU is computed from corpus-level clipped n-gram counts (n = 1..4) with
//! no smoothing: if any precision is zero the score is zero. The brevity
//! penalty is `exp(1 - r/c)` when the candidate length `c` is below the
//! reference length `r`.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tasks::TaskKind;

/// Decoding regime a report was produced under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeMode {
    PretrainGreedy,
    PretrainBeam,
    LocallyNormalized,
    GloballyNormalized,
}

impl DecodeMode {
    pub const ALL: [DecodeMode; 4] = [
        DecodeMode::PretrainGreedy,
        DecodeMode::PretrainBeam,
        DecodeMode::LocallyNormalized,
        DecodeMode::GloballyNormalized,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            DecodeMode::PretrainGreedy => "pretrain-greedy",
            DecodeMode::PretrainBeam => "pretrain-beam",
            DecodeMode::LocallyNormalized => "locally-normalized",
            DecodeMode::GloballyNormalized => "globally-normalized",
        }
    }
}

impl std::fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

fn check_counts<T>(preds: &[T], golds: &[T]) -> Result<()> {
    if preds.len() != golds.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} references",
            preds.len(),
            golds.len()
        )));
    }
    Ok(())
}

/// Mismatching positions and total positions over aligned tagging pairs.
fn hamming_counts(preds: &[Vec<usize>], golds: &[Vec<usize>]) -> Result<(usize, usize)> {
    check_counts(preds, golds)?;
    let (mut wrong, mut total) = (0, 0);
    for (i, (p, g)) in preds.iter().zip(golds).enumerate() {
        if p.len() != g.len() {
            return Err(Error::Contract(format!(
                "pair {i}: prediction length {} differs from gold length {}",
                p.len(),
                g.len()
            )));
        }
        wrong += p.iter().zip(g).filter(|(a, b)| a != b).count();
        total += g.len();
    }
    Ok((wrong, total))
}

/// Fraction of token positions where the prediction equals the gold tag.
pub fn sequence_accuracy(preds: &[Vec<usize>], golds: &[Vec<usize>]) -> Result<f64> {
    let (wrong, total) = hamming_counts(preds, golds)?;
    Ok(if total == 0 {
        1.0
    } else {
        (total - wrong) as f64 / total as f64
    })
}

/// Mean per-position Hamming loss.
pub fn hamming_rate(preds: &[Vec<usize>], golds: &[Vec<usize>]) -> Result<f64> {
    let (wrong, total) = hamming_counts(preds, golds)?;
    Ok(if total == 0 {
        0.0
    } else {
        wrong as f64 / total as f64
    })
}

/// Fraction of pairs reproduced exactly.
pub fn exact_match(preds: &[Vec<usize>], golds: &[Vec<usize>]) -> Result<f64> {
    check_counts(preds, golds)?;
    if golds.is_empty() {
        return Ok(1.0);
    }
    Ok(preds.iter().zip(golds).filter(|(p, g)| p == g).count() as f64 / golds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bleu {
    /// In `[0, 100]`.
    pub bleu: f64,
    /// Modified 1..4-gram precisions in `[0, 100]`.
    pub precisions: [f64; 4],
    /// Total prediction length over total reference length.
    pub length_ratio: f64,
}

/// Clipped matches and candidate n-gram totals per order, plus lengths.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BleuCounts {
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub pred_len: usize,
    pub ref_len: usize,
}

impl BleuCounts {
    pub fn sentence(pred: &[usize], reference: &[usize]) -> Self {
        let mut c = Self {
            pred_len: pred.len(),
            ref_len: reference.len(),
            ..Default::default()
        };
        for n in 1..=4 {
            if pred.len() < n {
                continue;
            }
            let mut ref_counts: HashMap<&[usize], usize> = HashMap::new();
            for g in reference.windows(n) {
                *ref_counts.entry(g).or_default() += 1;
            }
            let mut pred_counts: HashMap<&[usize], usize> = HashMap::new();
            for g in pred.windows(n) {
                *pred_counts.entry(g).or_default() += 1;
            }
            c.totals[n - 1] = pred.len() + 1 - n;
            c.matches[n - 1] = pred_counts
                .iter()
                .map(|(g, k)| (*k).min(ref_counts.get(g).copied().unwrap_or(0)))
                .sum();
        }
        c
    }

    pub fn merge(mut self, other: &Self) -> Self {
        for n in 0..4 {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.pred_len += other.pred_len;
        self.ref_len += other.ref_len;
        self
    }

    pub fn score(&self) -> Bleu {
        let precisions = std::array::from_fn(|n| {
            if self.totals[n] == 0 {
                0.0
            } else {
                100.0 * self.matches[n] as f64 / self.totals[n] as f64
            }
        });
        let length_ratio = if self.ref_len == 0 {
            0.0
        } else {
            self.pred_len as f64 / self.ref_len as f64
        };
        let bleu = if self.matches.contains(&0) {
            0.0
        } else {
            let log_mean = (0..4)
                .map(|n| (self.matches[n] as f64 / self.totals[n] as f64).ln())
                .sum::<f64>()
                / 4.0;
            let bp = if self.pred_len < self.ref_len {
                (1.0 - self.ref_len as f64 / self.pred_len as f64).exp()
            } else {
                1.0
            };
            100.0 * bp * log_mean.exp()
        };
        Bleu {
            bleu,
            precisions,
            length_ratio,
        }
    }
}

/// Corpus-level BLEU of `preds` against one reference each.
pub fn bleu(preds: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<Bleu> {
    check_counts(preds, refs)?;
    if preds.is_empty() {
        return Err(Error::Contract("BLEU of an empty corpus".into()));
    }
    Ok(preds
        .iter()
        .zip(refs)
        .map(|(p, r)| BleuCounts::sentence(p, r))
        .fold(BleuCounts::default(), |acc, c| acc.merge(&c))
        .score())
}

/// Source-length range `[lo, hi)`, open-ended when `hi` is `None`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bucket {
    pub lo: usize,
    pub hi: Option<usize>,
}

impl Bucket {
    pub fn contains(&self, len: usize) -> bool {
        len >= self.lo && self.hi.is_none_or(|h| len < h)
    }

    pub fn label(&self) -> String {
        match self.hi {
            Some(h) => format!("{}-{h}", self.lo),
            None => format!("{}+", self.lo),
        }
    }
}

/// Buckets split at the given boundaries: `[0,b0) [b0,b1) .. [bn,∞)`.
pub fn buckets_from_bounds(bounds: &[usize]) -> Vec<Bucket> {
    let mut out = Vec::with_capacity(bounds.len() + 1);
    let mut lo = 0;
    for &b in bounds {
        out.push(Bucket { lo, hi: Some(b) });
        lo = b;
    }
    out.push(Bucket { lo, hi: None });
    out
}

/// Desk-scale source-length buckets.
pub fn default_buckets() -> Vec<Bucket> {
    buckets_from_bounds(&[5, 8, 10])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Accuracy,
    Bleu,
}

impl Metric {
    pub fn for_task(task: TaskKind) -> Self {
        match task {
            TaskKind::Tagging => Metric::Accuracy,
            TaskKind::Transduction => Metric::Bleu,
        }
    }

    /// Score in points (accuracy as a percentage, BLEU as is).
    pub fn compute(&self, preds: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<f64> {
        match self {
            Metric::Accuracy => Ok(100.0 * sequence_accuracy(preds, refs)?),
            Metric::Bleu => Ok(bleu(preds, refs)?.bleu),
        }
    }
}

/// `metric` per source-length bucket, in bucket order; empty buckets are omitted.
pub fn length_bucket_report(
    preds: &[Vec<usize>],
    refs: &[Vec<usize>],
    src_lens: &[usize],
    buckets: &[Bucket],
    metric: Metric,
) -> Result<Vec<(String, f64)>> {
    check_counts(preds, refs)?;
    if src_lens.len() != refs.len() {
        return Err(Error::Contract(format!(
            "{} source lengths for {} pairs",
            src_lens.len(),
            refs.len()
        )));
    }
    let mut out = Vec::new();
    for b in buckets {
        let idx: Vec<usize> = (0..refs.len())
            .filter(|&i| b.contains(src_lens[i]))
            .collect();
        if idx.is_empty() {
            continue;
        }
        let p: Vec<Vec<usize>> = idx.iter().map(|&i| preds[i].clone()).collect();
        let r: Vec<Vec<usize>> = idx.iter().map(|&i| refs[i].clone()).collect();
        out.push((b.label(), metric.compute(&p, &r)?));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: DecodeMode,
    pub task: TaskKind,
    /// Token accuracy for tagging, exact-match rate for transduction.
    pub accuracy: f64,
    pub bleu: f64,
    pub ngram_precisions: [f64; 4],
    pub length_ratio: f64,
    pub buckets: Vec<(String, f64)>,
    pub count: usize,
}

impl EvalReport {
    /// Evaluates predictions against golds. Sequences are compared as given;
    /// callers strip EOS first if it should not count.
    pub fn evaluate(
        task: TaskKind,
        mode: DecodeMode,
        preds: &[Vec<usize>],
        golds: &[Vec<usize>],
        src_lens: &[usize],
        buckets: &[Bucket],
    ) -> Result<Self> {
        let accuracy = match task {
            TaskKind::Tagging => sequence_accuracy(preds, golds)?,
            TaskKind::Transduction => exact_match(preds, golds)?,
        };
        let b = bleu(preds, golds)?;
        let buckets =
            length_bucket_report(preds, golds, src_lens, buckets, Metric::for_task(task))?;
        Ok(Self {
            mode,
            task,
            accuracy,
            bleu: b.bleu,
            ngram_precisions: b.precisions,
            length_ratio: b.length_ratio,
            buckets,
            count: golds.len(),
        })
    }

    /// Headline metric in points: accuracy percentage for tagging, BLEU otherwise.
    pub fn primary(&self) -> f64 {
        match self.task {
            TaskKind::Tagging => 100.0 * self.accuracy,
            TaskKind::Transduction => self.bleu,
        }
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or("—".to_string(), |x| format!("{x:.2}"))
}

fn render(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| {
            rows.iter()
                .filter_map(|r| r.get(c))
                .map(|s| s.chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for r in rows {
        let line: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(c, s)| format!("{s}{}", " ".repeat(widths[c] - s.chars().count())))
            .collect();
        let _ = writeln!(out, "| {} |", line.join(" | "));
    }
    out
}

/// Cells of the warm-start × normalization grid, indexed `[regular, self-normalized]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub pretrain_greedy: [Option<f64>; 2],
    pub pretrain_beam: [Option<f64>; 2],
    pub locally_normalized: [Option<f64>; 2],
    pub globally_normalized: [Option<f64>; 2],
}

impl Grid {
    pub fn row(&self, mode: DecodeMode) -> [Option<f64>; 2] {
        match mode {
            DecodeMode::PretrainGreedy => self.pretrain_greedy,
            DecodeMode::PretrainBeam => self.pretrain_beam,
            DecodeMode::LocallyNormalized => self.locally_normalized,
            DecodeMode::GloballyNormalized => self.globally_normalized,
        }
    }

    pub fn row_mut(&mut self, mode: DecodeMode) -> &mut [Option<f64>; 2] {
        match mode {
            DecodeMode::PretrainGreedy => &mut self.pretrain_greedy,
            DecodeMode::PretrainBeam => &mut self.pretrain_beam,
            DecodeMode::LocallyNormalized => &mut self.locally_normalized,
            DecodeMode::GloballyNormalized => &mut self.globally_normalized,
        }
    }
}

/// Four decode-mode rows by two initialization columns; missing cells print "—".
pub fn grid_table(grid: &Grid) -> String {
    let mut rows = vec![vec![
        "Init-scheme →".to_string(),
        "Regular".into(),
        "Self-normalized".into(),
    ]];
    for mode in DecodeMode::ALL {
        let r = grid.row(mode);
        rows.push(vec![mode.label().to_string(), cell(r[0]), cell(r[1])]);
    }
    render(&rows)
}

/// N-gram precisions and length ratio per decode mode.
pub fn bleu_breakdown_table(reports: &[&EvalReport]) -> String {
    let mut rows = vec![vec![
        String::new(),
        "N-gram overlap".into(),
        "Length ratio".into(),
    ]];
    for r in reports {
        let p = r.ngram_precisions.map(|x| format!("{x:.1}")).join("/");
        rows.push(vec![
            r.mode.label().to_string(),
            p,
            format!("{:.3}", r.length_ratio),
        ]);
    }
    render(&rows)
}

/// Per-bucket scores per decode mode; buckets a report lacks print "—".
pub fn length_table(reports: &[&EvalReport]) -> String {
    let mut labels: Vec<String> = Vec::new();
    for r in reports {
        for (l, _) in &r.buckets {
            if !labels.contains(l) {
                labels.push(l.clone());
            }
        }
    }
    let mut rows = vec![std::iter::once("Src length →".to_string())
        .chain(labels.iter().cloned())
        .collect()];
    for r in reports {
        let mut row = vec![r.mode.label().to_string()];
        for l in &labels {
            row.push(cell(
                r.buckets.iter().find(|(b, _)| b == l).map(|(_, v)| *v),
            ));
        }
        rows.push(row);
    }
    render(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seqs(v: &[&[usize]]) -> Vec<Vec<usize>> {
        v.iter().map(|s| s.to_vec()).collect()
    }

    #[test]
    fn accuracy_examples() {
        let g = seqs(&[&[3, 4, 5]]);
        assert_eq!(sequence_accuracy(&g, &g).unwrap(), 1.0);
        let p = seqs(&[&[3, 5, 5]]);
        assert_eq!(sequence_accuracy(&p, &g).unwrap(), 2.0 / 3.0);
        assert!(sequence_accuracy(&seqs(&[&[3]]), &g).is_err());
        assert!(sequence_accuracy(&[], &g).is_err());
    }

    proptest! {
        #[test]
        fn accuracy_matches_loop_and_complements_hamming(
            pairs in proptest::collection::vec(
                (1usize..8).prop_flat_map(|n| (
                    proptest::collection::vec(0usize..4, n),
                    proptest::collection::vec(0usize..4, n),
                )),
                100,
            )
        ) {
            let preds: Vec<Vec<usize>> = pairs.iter().map(|p| p.0.clone()).collect();
            let golds: Vec<Vec<usize>> = pairs.iter().map(|p| p.1.clone()).collect();
            let (mut right, mut total) = (0, 0);
            for i in 0..preds.len() {
                for j in 0..golds[i].len() {
                    if preds[i][j] == golds[i][j] {
                        right += 1;
                    }
                    total += 1;
                }
            }
            let acc = sequence_accuracy(&preds, &golds).unwrap();
            prop_assert_eq!(acc, right as f64 / total as f64);
            prop_assert!((acc - (1.0 - hamming_rate(&preds, &golds).unwrap())).abs() < 1e-12);
        }

        #[test]
        fn bleu_of_self_is_100(
            corpus in proptest::collection::vec(proptest::collection::vec(0usize..6, 1..10), 1..6)
        ) {
            let b = bleu(&corpus, &corpus).unwrap();
            if corpus.iter().any(|s| s.len() >= 4) {
                prop_assert!((b.bleu - 100.0).abs() < 1e-9);
            }
            prop_assert!(b.bleu <= 100.0 + 1e-9);
            prop_assert_eq!(b.length_ratio, 1.0);
        }
    }

    #[test]
    fn bleu_identical() {
        let c = seqs(&[&[1, 2, 3, 4, 5], &[6, 7, 8, 9]]);
        let b = bleu(&c, &c).unwrap();
        assert!((b.bleu - 100.0).abs() < 1e-12);
        assert_eq!(b.precisions, [100.0; 4]);
        assert_eq!(b.length_ratio, 1.0);
    }

    #[test]
    fn bleu_brevity_hand_example() {
        let b = bleu(&seqs(&[&[1, 2, 3, 4]]), &seqs(&[&[1, 2, 3, 4, 5]])).unwrap();
        assert_eq!(b.precisions, [100.0; 4]);
        let expect = 100.0 * (1.0f64 - 5.0 / 4.0).exp();
        assert!((b.bleu - expect).abs() < 1e-12);
        assert!((b.bleu - 77.88).abs() < 0.005);
        assert_eq!(b.length_ratio, 0.8);
    }

    #[test]
    fn bleu_disjoint_is_zero() {
        let b = bleu(&seqs(&[&[1, 2, 3, 4]]), &seqs(&[&[5, 6, 7, 8]])).unwrap();
        assert_eq!(b.bleu, 0.0);
        assert_eq!(b.precisions, [0.0; 4]);
        assert!(bleu(&[], &[]).is_err());
    }

    #[test]
    fn bleu_clips_repeated_ngrams() {
        // "a a a a" vs "a b c d": unigram 1/4, no higher-order matches.
        let b = bleu(&seqs(&[&[1, 1, 1, 1]]), &seqs(&[&[1, 2, 3, 4]])).unwrap();
        assert_eq!(b.precisions[0], 25.0);
        assert_eq!(b.bleu, 0.0);
    }

    #[test]
    fn bleu_aggregates_counts_not_sentence_scores() {
        // Sentence 1 matches fully (4 tokens); sentence 2 "1 2 9 9 9" vs "1 2 3 4 5".
        let p = seqs(&[&[5, 6, 7, 8], &[1, 2, 9, 9, 9]]);
        let r = seqs(&[&[5, 6, 7, 8], &[1, 2, 3, 4, 5]]);
        let b = bleu(&p, &r).unwrap();
        let prec = [6.0 / 9.0, 4.0 / 7.0, 2.0 / 5.0, 1.0 / 3.0];
        let expect = 100.0 * (prec.iter().map(|x: &f64| x.ln()).sum::<f64>() / 4.0).exp();
        assert!((b.bleu - expect).abs() < 1e-9, "{} vs {expect}", b.bleu);
    }

    #[test]
    fn single_bucket_equals_corpus_metric() {
        let p = seqs(&[&[1, 2, 3, 4], &[5, 6, 7, 8, 9]]);
        let r = seqs(&[&[1, 2, 3, 4, 5], &[5, 6, 7, 8, 9]]);
        let rep = length_bucket_report(&p, &r, &[3, 4], &buckets_from_bounds(&[10]), Metric::Bleu)
            .unwrap();
        assert_eq!(rep.len(), 1);
        assert_eq!(rep[0].0, "0-10");
        assert_eq!(rep[0].1, bleu(&p, &r).unwrap().bleu);
    }

    #[test]
    fn two_bucket_hand_split() {
        let p = seqs(&[&[3, 4], &[3, 3, 3], &[4, 4, 4, 4]]);
        let g = seqs(&[&[3, 4], &[3, 4, 4], &[4, 3, 3, 3]]);
        let rep = length_bucket_report(
            &p,
            &g,
            &[2, 3, 4],
            &buckets_from_bounds(&[3, 8]),
            Metric::Accuracy,
        )
        .unwrap();
        // [0,3): pair 0, 2/2. [3,8): pairs 1 and 2, (1 + 1) / 7.
        assert_eq!(rep.len(), 2);
        assert_eq!(rep[0], ("0-3".to_string(), 100.0));
        assert_eq!(rep[1].0, "3-8");
        assert!((rep[1].1 - 100.0 * 2.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn bucket_labels() {
        let b = default_buckets();
        assert_eq!(
            b.iter().map(Bucket::label).collect::<Vec<_>>(),
            ["0-5", "5-8", "8-10", "10+"]
        );
        assert!(b[3].contains(100) && !b[0].contains(5) && b[1].contains(5));
    }

    fn report(mode: DecodeMode) -> EvalReport {
        let p = seqs(&[&[1, 2, 3, 4]]);
        let r = seqs(&[&[1, 2, 3, 4, 5]]);
        EvalReport::evaluate(
            TaskKind::Transduction,
            mode,
            &p,
            &r,
            &[4],
            &default_buckets(),
        )
        .unwrap()
    }

    #[test]
    fn eval_report_fields() {
        let r = report(DecodeMode::PretrainBeam);
        assert_eq!(r.accuracy, 0.0);
        assert!((r.primary() - 77.88).abs() < 0.005);
        assert_eq!(r.buckets.len(), 1);
        assert_eq!(r.count, 1);
    }

    #[test]
    fn grid_table_shape_and_gaps() {
        let mut g = Grid::default();
        g.pretrain_greedy = [Some(76.54), Some(73.12)];
        g.pretrain_beam = [Some(77.76), Some(73.83)];
        g.locally_normalized = [Some(83.9), Some(83.35)];
        g.globally_normalized = [None, Some(85.5)];
        let t = grid_table(&g);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[0].contains("Regular") && lines[0].contains("Self-normalized"));
        assert!(lines[4].starts_with("| globally-normalized") && lines[4].contains("—"));
        assert!(lines[4].contains("85.50"));
        assert!(lines[3].contains("83.90") && lines[3].contains("83.35"));
    }

    #[test]
    fn breakdown_and_length_tables() {
        let a = report(DecodeMode::PretrainBeam);
        let mut b = report(DecodeMode::GloballyNormalized);
        b.buckets = vec![("5-8".into(), 12.5)];
        let t = bleu_breakdown_table(&[&a, &b]);
        assert!(t.contains("100.0/100.0/100.0/100.0") && t.contains("0.800"));
        let l = length_table(&[&a, &b]);
        let lines: Vec<&str> = l.lines().collect();
        assert!(lines[0].contains("0-5") && lines[0].contains("5-8"));
        assert!(lines[1].contains("77.88") && lines[1].contains("—"));
        assert!(lines[2].contains("12.50"));
    }
}
