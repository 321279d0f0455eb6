use thiserror::Error;

use super::{Param, Tape, Tensor, TensorError};

/// Gradients smaller than this are compared in absolute rather than relative
/// terms; central differences cannot resolve them to a relative 1e-4.
const SCALE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GradCheckError {
    #[error("epsilon {0} outside [1e-7, 1e-3]")]
    Epsilon(f64),
    #[error("protocol error: objective is not deterministic ({first} vs {second})")]
    NonDeterministic { first: f64, second: f64 },
    #[error("objective evaluation failed: {0}")]
    Eval(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter block, coordinate) of the largest error.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_tol: f64,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.rel_tol
    }
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(SCALE_FLOOR)
}

fn evaluate<F, E>(f: &F, params: &[Param]) -> Result<(Tape, Vec<Tensor>, Tensor), GradCheckError>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<Tensor, E>,
    E: std::fmt::Display,
{
    let mut tape = Tape::new();
    let leaves = params
        .iter()
        .map(|p| tape.param(p))
        .collect::<Result<Vec<_>, _>>()?;
    let loss = f(&mut tape, &leaves).map_err(|e| GradCheckError::Eval(e.to_string()))?;
    Ok((tape, leaves, loss))
}

fn value_at<F, E>(f: &F, params: &[Param]) -> Result<f64, GradCheckError>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<Tensor, E>,
    E: std::fmt::Display,
{
    let (tape, _, loss) = evaluate(f, params)?;
    Ok(tape.scalar(loss))
}

/// Compares reverse-mode gradients of `f` at `params` against central
/// differences `(f(p + eps e) - f(p - eps e)) / (2 eps)` on every coordinate.
pub fn grad_check<F, E>(
    f: F,
    params: &[Param],
    epsilon: f64,
    rel_tol: f64,
) -> Result<GradCheckReport, GradCheckError>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<Tensor, E>,
    E: std::fmt::Display,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(GradCheckError::Epsilon(epsilon));
    }
    let (tape, leaves, loss) = evaluate(&f, params)?;
    let first = tape.scalar(loss);
    let second = value_at(&f, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(GradCheckError::NonDeterministic { first, second });
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = leaves.iter().map(|t| grads.wrt(*t)).collect();
    drop(tape);

    let mut probe = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        rel_tol,
        coordinates: 0,
    };
    for (b, block) in params.iter().enumerate() {
        for c in 0..block.numel() {
            let orig = block.values[c];
            probe[b].values[c] = orig + epsilon;
            let plus = value_at(&f, &probe)?;
            probe[b].values[c] = orig - epsilon;
            let minus = value_at(&f, &probe)?;
            probe[b].values[c] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic[b][c];
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((b, c));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
