//! Warm-start objectives and log-normalizer statistics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::graph::{self, Bound};
use crate::model::{infer, LengthContract, ModelParams};
use crate::tensor::{Tape, Tensor};

/// `-Σ_t log_softmax(logits_t)[y_t]` for logits `[n, |V|]`.
pub fn nll_from_logits(tape: &mut Tape, logits: Tensor, y: &[usize]) -> Result<Tensor> {
    let v = tape.shape(logits)[1];
    let lse = tape.logsumexp(logits, 1)?;
    let total_lse = tape.sum(lse)?;
    let picks = tape.gather(
        logits,
        y.iter().enumerate().map(|(t, tok)| t * v + tok).collect(),
    )?;
    let gold = tape.sum(picks)?;
    Ok(tape.sub(total_lse, gold)?)
}

/// NLL plus `lambda · Σ_t (log Z_t)²`. With `lambda == 0` the penalty is not
/// built at all, so the result is bit-identical to [`nll_from_logits`].
pub fn self_normalized_from_logits(
    tape: &mut Tape,
    logits: Tensor,
    y: &[usize],
    lambda: f64,
) -> Result<Tensor> {
    check_lambda(lambda)?;
    let nll = nll_from_logits(tape, logits, y)?;
    if lambda == 0.0 {
        return Ok(nll);
    }
    let lse = tape.logsumexp(logits, 1)?;
    let sq = tape.mul(lse, lse)?;
    let total = tape.sum(sq)?;
    let penalty = tape.scale(total, lambda)?;
    Ok(tape.add(nll, penalty)?)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!(
            "lambda must be finite and non-negative, got {lambda}"
        )));
    }
    Ok(())
}

/// Teacher-forcing cross entropy with gold history.
pub fn teacher_forcing_nll(
    tape: &mut Tape,
    bound: &Bound,
    x: &[usize],
    y: &[usize],
    contract: LengthContract,
) -> Result<Tensor> {
    contract.check_gold(x, y)?;
    let logits = graph::teacher_forced_logits(tape, bound, x, y)?;
    nll_from_logits(tape, logits, y)
}

pub fn self_normalized_nll(
    tape: &mut Tape,
    bound: &Bound,
    x: &[usize],
    y: &[usize],
    contract: LengthContract,
    lambda: f64,
) -> Result<Tensor> {
    check_lambda(lambda)?;
    contract.check_gold(x, y)?;
    let logits = graph::teacher_forced_logits(tape, bound, x, y)?;
    self_normalized_from_logits(tape, logits, y, lambda)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogZStats {
    pub mean: f64,
    /// Population variance.
    pub variance: f64,
    pub split: Split,
    pub count: usize,
}

impl LogZStats {
    /// Two-pass mean and population variance.
    pub fn from_values(values: &[f64], split: Split) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Data(format!("no decoding steps in {split} split")));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let variance = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Ok(Self {
            mean,
            variance,
            split,
            count: values.len(),
        })
    }
}

/// `log Z` at every gold-history step of every example.
pub fn log_normalizers(
    params: &ModelParams,
    examples: &[(Vec<usize>, Vec<usize>)],
) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (x, y) in examples {
        for logits in infer::teacher_forced_logits(params, x, y)? {
            out.push(infer::log_normalizer(&logits));
        }
    }
    Ok(out)
}

pub fn logz_stats(
    params: &ModelParams,
    examples: &[(Vec<usize>, Vec<usize>)],
    split: Split,
) -> Result<LogZStats> {
    if examples.is_empty() {
        return Err(Error::Data(format!("empty {split} split")));
    }
    LogZStats::from_values(&log_normalizers(params, examples)?, split)
}

/// One row of the log-Z table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogZRow {
    pub model: String,
    pub train: Option<LogZStats>,
    pub dev: Option<LogZStats>,
    /// Dev accuracy or BLEU of the same model.
    pub metric: Option<f64>,
}

/// Text table with train and dev mean/variance columns; missing cells as "—".
pub fn logz_table(rows: &[LogZRow]) -> String {
    let cell = |s: Option<LogZStats>, var: bool| match s {
        Some(s) if var => format!("{:.2}", s.variance),
        Some(s) => format!("{:.2}", s.mean),
        None => "—".to_string(),
    };
    let width = rows
        .iter()
        .map(|r| r.model.chars().count())
        .max()
        .unwrap_or(0)
        .max(5);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:width$} | {:^17} | {:^17} | {:>8}",
        "", "Train logZ", "Dev logZ", "Acc/"
    );
    let _ = writeln!(
        out,
        "{:width$} | {:>8} {:>8} | {:>8} {:>8} | {:>8}",
        "Model", "Mean", "Var", "Mean", "Var", "BLEU"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:width$} | {:>8} {:>8} | {:>8} {:>8} | {:>8}",
            r.model,
            cell(r.train, false),
            cell(r.train, true),
            cell(r.dev, false),
            cell(r.dev, true),
            r.metric.map_or("—".to_string(), |m| format!("{m:.2}")),
        );
    }
    out
}
