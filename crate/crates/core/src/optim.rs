//! First-order optimizers with global-norm gradient clipping.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(Error::Config(format!(
                "unknown optimizer {other:?} (expected sgd or adam)"
            ))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sgd => "sgd",
            Self::Adam => "adam",
        })
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    clip: Option<f64>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, clip: Option<f64>) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be finite and non-negative, got {lr}"
            )));
        }
        if let Some(c) = clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!(
                    "clip norm must be positive, got {c}"
                )));
            }
        }
        Ok(Self {
            kind,
            lr,
            clip,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        })
    }

    /// Applies one update from per-block gradients; returns the pre-clip
    /// global gradient norm.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Vec<f64>]) -> Result<f64> {
        if grads.len() != params.blocks.len() {
            return Err(Error::Contract(format!(
                "{} gradient blocks for {} parameter blocks",
                grads.len(),
                params.blocks.len()
            )));
        }
        let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Tensor(crate::tensor::TensorError::NonFinite {
                op: "gradient norm",
            }));
        }
        let scale = match self.clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        if self.lr == 0.0 {
            return Ok(norm);
        }
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.blocks.iter_mut().zip(grads) {
                    for (w, gi) in p.values.iter_mut().zip(g) {
                        *w -= self.lr * scale * gi;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.m.is_empty() {
                    self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
                    self.v = self.m.clone();
                }
                self.t += 1;
                let bc1 = 1.0 - BETA1.powi(self.t);
                let bc2 = 1.0 - BETA2.powi(self.t);
                for (i, (p, g)) in params.blocks.iter_mut().zip(grads).enumerate() {
                    for (j, (w, gi)) in p.values.iter_mut().zip(g).enumerate() {
                        let gi = gi * scale;
                        let m = &mut self.m[i][j];
                        let v = &mut self.v[i][j];
                        *m = BETA1 * *m + (1.0 - BETA1) * gi;
                        *v = BETA2 * *v + (1.0 - BETA2) * gi * gi;
                        *w -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AttentionMode, EncoderMode, ModelConfig, Normalization};

    fn params() -> ModelParams {
        ModelParams::init(
            ModelConfig {
                src_vocab: 5,
                tgt_vocab: 5,
                embed_dim: 2,
                hidden_dim: 2,
                encoder: EncoderMode::Unidirectional,
                attention: AttentionMode::FixedPosition,
                normalization: Normalization::Local,
            },
            0,
        )
        .unwrap()
    }

    fn grads(p: &ModelParams, value: f64) -> Vec<Vec<f64>> {
        p.blocks.iter().map(|b| vec![value; b.numel()]).collect()
    }

    #[test]
    fn sgd_step_without_clipping() {
        let mut p = params();
        let before = p.clone();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.5, None).unwrap();
        let g = grads(&p, 0.1);
        opt.step(&mut p, &g).unwrap();
        for (a, b) in p.blocks.iter().zip(&before.blocks) {
            for (x, y) in a.values.iter().zip(&b.values) {
                assert!((x - (y - 0.05)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn clipping_rescales_to_the_global_norm() {
        let mut p = params();
        let before = p.clone();
        let n = p.num_values() as f64;
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 1.0, Some(5.0)).unwrap();
        let g = grads(&p, 10.0);
        let norm = opt.step(&mut p, &g).unwrap();
        assert!((norm - 10.0 * n.sqrt()).abs() < 1e-9);
        let moved: f64 = p
            .blocks
            .iter()
            .zip(&before.blocks)
            .flat_map(|(a, b)| {
                a.values
                    .iter()
                    .zip(&b.values)
                    .map(|(x, y)| (x - y) * (x - y))
            })
            .sum::<f64>()
            .sqrt();
        assert!((moved - 5.0).abs() < 1e-9);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = params();
        let before = p.clone();
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01, Some(5.0)).unwrap();
        let g = grads(&p, -3.0);
        opt.step(&mut p, &g).unwrap();
        let d = p.blocks[0].values[0] - before.blocks[0].values[0];
        assert!((d - 0.01).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut p = params();
        let before = p.clone();
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.0, Some(5.0)).unwrap();
        let g = grads(&p, 1.0);
        opt.step(&mut p, &g).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn invalid_settings_are_config_errors() {
        assert!(Optimizer::new(OptimizerKind::Sgd, -1.0, None).is_err());
        assert!(Optimizer::new(OptimizerKind::Sgd, 0.1, Some(0.0)).is_err());
        assert!("rmsprop".parse::<OptimizerKind>().is_err());
        let mut p = params();
        let g = grads(&p, f64::NAN);
        assert!(Optimizer::new(OptimizerKind::Sgd, 0.1, None)
            .unwrap()
            .step(&mut p, &g)
            .is_err());
    }
}
