//! LSTM encoder-decoder producing per-step successor scores in log space.
//!
//! The nonnegative successor score is `s = exp(logit)`, so the log-score of a
//! token is its raw logit. A locally normalized model subtracts the per-step
//! log-normalizer `log Z = logsumexp(logits)`; a globally normalized model uses
//! the raw logits and never computes the sequence-level normalizer.
//!
//! Two forward paths share one set of parameters: [`graph`] records on a
//! [`Tape`](crate::tensor::Tape) for training, [`infer`] evaluates with plain
//! vectors for decoding. Their logits agree to rounding.

pub mod checkpoint;
pub mod graph;
pub mod infer;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Param;
use crate::{EOS, RESERVED};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderMode {
    Unidirectional,
    Bidirectional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    /// Step `i` reads annotation row `i`; output length equals input length.
    FixedPosition,
    /// Bilinear attention over all annotation rows.
    Content,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    Local,
    Global,
}

/// What produced a set of parameters; recorded in checkpoints so warm starts
/// can be audited.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Random,
    TeacherForcing,
    SelfNormalized,
    SoftBeam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub encoder: EncoderMode,
    pub attention: AttentionMode,
    pub normalization: Normalization,
}

impl ModelConfig {
    pub fn annotation_dim(&self) -> usize {
        match self.encoder {
            EncoderMode::Unidirectional => self.hidden_dim,
            EncoderMode::Bidirectional => 2 * self.hidden_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.src_vocab <= RESERVED || self.tgt_vocab < RESERVED {
            return Err(Error::Config(format!(
                "vocabularies must include the {RESERVED} reserved ids (src {}, tgt {})",
                self.src_vocab, self.tgt_vocab
            )));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config(
                "embedding and hidden sizes must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// How many decoding steps a task runs and how gold outputs end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LengthContract {
    /// One output per input position.
    Tagging,
    /// Outputs end with EOS and have at most `t_max` tokens including it.
    Transduction { t_max: usize },
}

impl LengthContract {
    /// Checks a gold output against the contract.
    pub fn check_gold(&self, x: &[usize], y: &[usize]) -> Result<()> {
        match *self {
            LengthContract::Tagging if y.len() != x.len() => Err(Error::Contract(format!(
                "tagging output has {} tokens for {} inputs",
                y.len(),
                x.len()
            ))),
            LengthContract::Transduction { t_max } if y.last() != Some(&EOS) || y.len() > t_max => {
                Err(Error::Contract(format!(
                    "transduction output must end with EOS and have at most {t_max} tokens (got {})",
                    y.len()
                )))
            }
            _ => Ok(()),
        }
    }

    /// Number of relaxed decoding steps for an input of length `n`.
    pub fn soft_steps(&self, n: usize) -> usize {
        match *self {
            LengthContract::Tagging => n,
            LengthContract::Transduction { t_max } => t_max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmLayout {
    pub wx: usize,
    pub wh: usize,
    pub b: usize,
}

/// Indices of each parameter block in declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub src_embed: usize,
    pub tgt_embed: usize,
    pub enc_fwd: LstmLayout,
    pub enc_bwd: Option<LstmLayout>,
    pub dec: LstmLayout,
    pub attention: Option<usize>,
    pub init_w: Option<usize>,
    pub init_b: Option<usize>,
    pub out_w: usize,
    pub out_b: usize,
}

impl Layout {
    /// Declared block order with names and shapes.
    pub fn blocks(config: &ModelConfig) -> (Layout, Vec<(String, Vec<usize>)>) {
        let (d, h, a) = (config.embed_dim, config.hidden_dim, config.annotation_dim());
        let mut blocks: Vec<(String, Vec<usize>)> = Vec::new();
        let mut add = |name: &str, shape: Vec<usize>| {
            blocks.push((name.to_string(), shape));
            blocks.len() - 1
        };
        let src_embed = add("src_embed", vec![config.src_vocab, d]);
        let tgt_embed = add("tgt_embed", vec![config.tgt_vocab, d]);
        let mut lstm = |prefix: &str, input: usize| LstmLayout {
            wx: add(&format!("{prefix}.wx"), vec![input, 4 * h]),
            wh: add(&format!("{prefix}.wh"), vec![h, 4 * h]),
            b: add(&format!("{prefix}.b"), vec![4 * h]),
        };
        let enc_fwd = lstm("enc_fwd", d);
        let enc_bwd = (config.encoder == EncoderMode::Bidirectional).then(|| lstm("enc_bwd", d));
        let dec = lstm("dec", d + a);
        let content = config.attention == AttentionMode::Content;
        let attention = content.then(|| add("attention", vec![h, a]));
        let init_w = content.then(|| add("init.w", vec![a, 2 * h]));
        let init_b = content.then(|| add("init.b", vec![2 * h]));
        let out_w = add("out.w", vec![h, config.tgt_vocab]);
        let out_b = add("out.b", vec![config.tgt_vocab]);
        let layout = Layout {
            src_embed,
            tgt_embed,
            enc_fwd,
            enc_bwd,
            dec,
            attention,
            init_w,
            init_b,
            out_w,
            out_b,
        };
        (layout, blocks)
    }
}

/// All trainable weights plus the configuration that shapes them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub provenance: Provenance,
    pub layout: Layout,
    pub blocks: Vec<Param>,
}

impl ModelParams {
    /// Uniform(-0.1, 0.1) initialization from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (layout, shapes) = Layout::blocks(&config);
        let blocks = shapes
            .into_iter()
            .map(|(name, shape)| {
                let n = shape.iter().product();
                Param::new(
                    name,
                    shape,
                    (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect(),
                )
            })
            .collect();
        Ok(Self {
            config,
            provenance: Provenance::Random,
            layout,
            blocks,
        })
    }

    /// Builds parameters from explicit blocks, checking their shapes.
    pub fn from_blocks(
        config: ModelConfig,
        provenance: Provenance,
        blocks: Vec<Param>,
    ) -> Result<Self> {
        config.validate()?;
        let (layout, shapes) = Layout::blocks(&config);
        if shapes.len() != blocks.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} blocks, got {}",
                shapes.len(),
                blocks.len()
            )));
        }
        for ((name, shape), block) in shapes.iter().zip(&blocks) {
            if *shape != block.shape {
                return Err(Error::Checkpoint(format!(
                    "block {name}: expected shape {shape:?}, got {:?}",
                    block.shape
                )));
            }
        }
        Ok(Self {
            config,
            provenance,
            layout,
            blocks,
        })
    }

    pub fn block(&self, idx: usize) -> &Param {
        &self.blocks[idx]
    }

    pub fn block_mut(&mut self, idx: usize) -> &mut Param {
        &mut self.blocks[idx]
    }

    pub fn num_values(&self) -> usize {
        self.blocks.iter().map(Param::numel).sum()
    }

    /// Same weights, different scoring mode.
    pub fn with_normalization(&self, normalization: Normalization) -> Self {
        let mut out = self.clone();
        out.config.normalization = normalization;
        out
    }

    pub(crate) fn check_source(&self, x: &[usize]) -> Result<()> {
        if x.is_empty() {
            return Err(Error::Contract("empty input sequence".into()));
        }
        if let Some(bad) = x.iter().find(|id| **id >= self.config.src_vocab) {
            return Err(Error::Data(format!(
                "source id {bad} out of vocabulary (size {})",
                self.config.src_vocab
            )));
        }
        Ok(())
    }

    pub(crate) fn check_target(&self, y: &[usize]) -> Result<()> {
        if let Some(bad) = y.iter().find(|id| **id >= self.config.tgt_vocab) {
            return Err(Error::Data(format!(
                "target id {bad} out of vocabulary (size {})",
                self.config.tgt_vocab
            )));
        }
        Ok(())
    }
}
