//! Training loops: teacher-forcing pretraining and search-aware training with
//! the relaxed beam objective, each with restarts and dev-based selection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::beam::{soft_beam_objective, AnnealSchedule, MapMode};
use crate::decode::{decode_corpus, evaluate_predictions, Strategy};
use crate::error::{Error, Result};
use crate::metrics::{DecodeMode, Metric};
use crate::model::graph::Bound;
use crate::model::{ModelConfig, ModelParams, Normalization, Provenance};
use crate::objectives::{self_normalized_nll, teacher_forcing_nll};
use crate::optim::{Optimizer, OptimizerKind};
use crate::tasks::Corpus;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "objective", rename_all = "kebab-case")]
pub enum PretrainObjective {
    TeacherForcing,
    SelfNormalized { lambda: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub clip: f64,
    pub seed: u64,
    pub restarts: usize,
    /// Dev-selection metric; `None` uses the task's headline metric.
    pub dev_metric: Option<Metric>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 0.01,
            batch_size: 8,
            optimizer: OptimizerKind::Adam,
            clip: 5.0,
            seed: 0,
            restarts: 3,
            dev_metric: None,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 {
            return Err(Error::Config("restarts must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Optimizer::new(self.optimizer, self.lr, Some(self.clip)).map(|_| ())
    }

    /// Seed used by restart `r`.
    pub fn restart_seed(&self, r: usize) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(r as u64)
    }
}

/// One line of a training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub restart: usize,
    pub epoch: usize,
    pub alpha: Option<f64>,
    /// Mean per-example training loss over the epoch.
    pub train_loss: f64,
    pub dev_metric: f64,
}

impl std::fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let alpha = self.alpha.map_or("-".to_string(), |a| format!("{a}"));
        write!(
            f,
            "restart={} epoch={} alpha={alpha} train_loss={:.6} dev_metric={:.4}",
            self.restart, self.epoch, self.train_loss, self.dev_metric
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the best dev metric over all restarts and epochs.
    pub params: ModelParams,
    pub best_dev: f64,
    pub best_restart: usize,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Loss and per-block gradients of one example.
pub fn example_gradients<F>(params: &ModelParams, loss: F) -> Result<(f64, Vec<Vec<f64>>)>
where
    F: FnOnce(&mut Tape, &Bound) -> Result<Tensor>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape)?;
    let l = loss(&mut tape, &bound)?;
    let grads = tape.backward(l)?;
    Ok((
        tape.scalar(l),
        bound.leaves.iter().map(|t| grads.wrt(*t)).collect(),
    ))
}

/// Dev metric in points under `strategy`; `metric` defaults to the task's.
pub fn dev_metric(
    params: &ModelParams,
    dev: &Corpus,
    strategy: Strategy,
    metric: Option<Metric>,
) -> Result<f64> {
    let preds = decode_corpus(params, dev, strategy, None)?;
    let report = evaluate_predictions(dev, &preds, DecodeMode::PretrainBeam, &[])?;
    Ok(match metric.unwrap_or(Metric::for_task(dev.task)) {
        Metric::Accuracy => 100.0 * report.accuracy,
        Metric::Bleu => report.bleu,
    })
}

/// Runs `epochs` of minibatch training from `params`, calling `epoch_end`
/// after each epoch with the epoch index and mean loss; keeps the epoch with
/// the highest returned dev metric.
fn run<L, E>(
    mut params: ModelParams,
    train: &Corpus,
    settings: &TrainSettings,
    restart: usize,
    loss: L,
    mut epoch_end: E,
) -> Result<(ModelParams, f64, usize)>
where
    L: Fn(&ModelParams, usize, &[usize], &[usize]) -> Result<(f64, Vec<Vec<f64>>)>,
    E: FnMut(&ModelParams, usize, f64) -> Result<f64>,
{
    if train.is_empty() {
        return Err(Error::Data("empty training corpus".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.restart_seed(restart));
    let mut opt = Optimizer::new(settings.optimizer, settings.lr, Some(settings.clip))?;
    let mut best: Option<(ModelParams, f64, usize)> = None;
    for epoch in 0..settings.epochs {
        let mut total = 0.0;
        for batch in train.batches(settings.batch_size, &mut rng) {
            let mut acc: Vec<Vec<f64>> =
                params.blocks.iter().map(|b| vec![0.0; b.numel()]).collect();
            for &i in &batch {
                let (x, y) = &train.examples[i];
                let (l, g) = loss(&params, epoch, x, y)?;
                total += l;
                for (a, gi) in acc.iter_mut().zip(g) {
                    for (s, v) in a.iter_mut().zip(gi) {
                        *s += v;
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            acc.iter_mut().flatten().for_each(|v| *v *= inv);
            opt.step(&mut params, &acc)?;
        }
        let dev = epoch_end(&params, epoch, total / train.len() as f64)?;
        if best.as_ref().is_none_or(|b| dev > b.1) {
            best = Some((params.clone(), dev, epoch));
        }
    }
    best.ok_or_else(|| Error::Config("epochs must be at least 1".into()))
}

fn keep_best(
    best: &mut Option<TrainOutcome>,
    params: ModelParams,
    dev: f64,
    restart: usize,
    epoch: usize,
) {
    if best.as_ref().is_none_or(|b| dev > b.best_dev) {
        *best = Some(TrainOutcome {
            params,
            best_dev: dev,
            best_restart: restart,
            best_epoch: epoch,
            history: Vec::new(),
        });
    }
}

/// Teacher-forcing pretraining from random initialization; restart `r`
/// initializes with `restart_seed(r)`. The dev metric is greedy decoding.
pub fn pretrain(
    config: ModelConfig,
    train: &Corpus,
    dev: &Corpus,
    objective: PretrainObjective,
    settings: &TrainSettings,
    mut log: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    settings.validate()?;
    let contract = train.contract();
    let config = ModelConfig {
        normalization: Normalization::Local,
        ..config
    };
    let provenance = match objective {
        PretrainObjective::TeacherForcing => Provenance::TeacherForcing,
        PretrainObjective::SelfNormalized { .. } => Provenance::SelfNormalized,
    };
    let mut history = Vec::new();
    let mut best = None;
    for r in 0..settings.restarts {
        let mut init = ModelParams::init(config, settings.restart_seed(r))?;
        init.provenance = provenance;
        let (params, dev_best, epoch) = run(
            init,
            train,
            settings,
            r,
            |p, _, x, y| {
                example_gradients(p, |tape, bound| match objective {
                    PretrainObjective::TeacherForcing => {
                        teacher_forcing_nll(tape, bound, x, y, contract)
                    }
                    PretrainObjective::SelfNormalized { lambda } => {
                        self_normalized_nll(tape, bound, x, y, contract, lambda)
                    }
                })
            },
            |p, epoch, train_loss| {
                let dev_metric = dev_metric(p, dev, Strategy::Greedy, settings.dev_metric)?;
                let rec = EpochRecord {
                    restart: r,
                    epoch,
                    alpha: None,
                    train_loss,
                    dev_metric,
                };
                log(&rec);
                history.push(rec);
                Ok(dev_metric)
            },
        )?;
        keep_best(&mut best, params, dev_best, r, epoch);
    }
    let mut out = best.expect("at least one restart");
    out.history = history;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchAwareSettings {
    pub normalization: Normalization,
    pub k: usize,
    pub schedule: AnnealSchedule,
    pub map_mode: MapMode,
    /// Inverse temperature of the dev MAP decode; `None` uses `alpha_max`.
    pub decode_alpha: Option<f64>,
}

impl SearchAwareSettings {
    pub fn dev_strategy(&self) -> Strategy {
        Strategy::SoftMap {
            k: self.k,
            alpha: self.decode_alpha.unwrap_or(self.schedule.alpha_max),
            mode: self.map_mode,
        }
    }
}

/// Search-aware training of the relaxed beam objective from a warm start.
///
/// Epoch `e` trains at `α(e)`; the dev metric is soft-beam MAP decoding at
/// the settings' decode `α`. Restarts share the warm start and differ in
/// example order.
pub fn train_search_aware(
    warm: &ModelParams,
    train: &Corpus,
    dev: &Corpus,
    search: &SearchAwareSettings,
    settings: &TrainSettings,
    mut log: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    settings.validate()?;
    search.schedule.validate()?;
    if search.k == 0 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    let contract = train.contract();
    let mut start = warm.with_normalization(search.normalization);
    start.provenance = Provenance::SoftBeam;
    let mut history = Vec::new();
    let mut best = None;
    for r in 0..settings.restarts {
        let (params, dev_best, epoch) = run(
            start.clone(),
            train,
            settings,
            r,
            |p, epoch, x, y| {
                let alpha = search.schedule.alpha(epoch);
                example_gradients(p, |tape, bound| {
                    soft_beam_objective(tape, bound, x, y, contract, search.k, alpha)
                })
            },
            |p, epoch, train_loss| {
                let dev_metric = dev_metric(p, dev, search.dev_strategy(), settings.dev_metric)?;
                let rec = EpochRecord {
                    restart: r,
                    epoch,
                    alpha: Some(search.schedule.alpha(epoch)),
                    train_loss,
                    dev_metric,
                };
                log(&rec);
                history.push(rec);
                Ok(dev_metric)
            },
        )?;
        keep_best(&mut best, params, dev_best, r, epoch);
    }
    let mut out = best.expect("at least one restart");
    out.history = history;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AttentionMode, EncoderMode};
    use crate::tasks::{gen_lookahead_tagging, TaggingSpec};

    fn data(seed: u64, count: usize) -> Corpus {
        gen_lookahead_tagging(&TaggingSpec {
            min_len: 3,
            max_len: 5,
            vocab_size: 4,
            ambiguity_rate: 0.5,
            modes: 2,
            count,
            seed,
        })
        .unwrap()
    }

    fn config(c: &Corpus) -> ModelConfig {
        ModelConfig {
            src_vocab: c.src_vocab.len(),
            tgt_vocab: c.tgt_vocab.len(),
            embed_dim: 6,
            hidden_dim: 8,
            encoder: EncoderMode::Bidirectional,
            attention: AttentionMode::FixedPosition,
            normalization: Normalization::Local,
        }
    }

    fn settings(epochs: usize, restarts: usize) -> TrainSettings {
        TrainSettings {
            epochs,
            restarts,
            lr: 0.05,
            ..Default::default()
        }
    }

    #[test]
    fn pretraining_learns_the_bidirectional_task() {
        let (train, dev) = (data(1, 120), data(2, 40));
        let out = pretrain(
            config(&train),
            &train,
            &dev,
            PretrainObjective::TeacherForcing,
            &settings(8, 1),
            |_| {},
        )
        .unwrap();
        assert!(out.best_dev > 90.0, "{}", out.best_dev);
        let losses: Vec<f64> = out.history.iter().map(|r| r.train_loss).collect();
        assert!(losses.last().unwrap() < &(losses[0] / 2.0), "{losses:?}");
        assert_eq!(out.params.provenance, Provenance::TeacherForcing);
    }

    #[test]
    fn zero_lambda_matches_teacher_forcing_trajectory() {
        let (train, dev) = (data(1, 30), data(2, 10));
        let a = pretrain(
            config(&train),
            &train,
            &dev,
            PretrainObjective::TeacherForcing,
            &settings(2, 1),
            |_| {},
        )
        .unwrap();
        let b = pretrain(
            config(&train),
            &train,
            &dev,
            PretrainObjective::SelfNormalized { lambda: 0.0 },
            &settings(2, 1),
            |_| {},
        )
        .unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.params.blocks, b.params.blocks);
    }

    #[test]
    fn best_restart_maximizes_dev_metric() {
        let (train, dev) = (data(3, 30), data(4, 10));
        let out = pretrain(
            config(&train),
            &train,
            &dev,
            PretrainObjective::TeacherForcing,
            &settings(2, 3),
            |_| {},
        )
        .unwrap();
        let max = out
            .history
            .iter()
            .map(|r| r.dev_metric)
            .fold(f64::MIN, f64::max);
        assert_eq!(out.best_dev, max);
        assert_eq!(out.history.len(), 6);
        let rec = out
            .history
            .iter()
            .find(|r| r.restart == out.best_restart && r.epoch == out.best_epoch)
            .unwrap();
        assert_eq!(rec.dev_metric, out.best_dev);
        assert_eq!(
            dev_metric(&out.params, &dev, Strategy::Greedy, None).unwrap(),
            out.best_dev
        );
    }

    #[test]
    fn zero_learning_rate_search_aware_epoch_reproduces_warm_start() {
        let (train, dev) = (data(5, 20), data(6, 10));
        let warm = ModelParams::init(config(&train), 9).unwrap();
        let search = SearchAwareSettings {
            normalization: Normalization::Local,
            k: 2,
            schedule: AnnealSchedule::default(),
            map_mode: MapMode::Committed,
            decode_alpha: Some(1.0),
        };
        let s = TrainSettings {
            lr: 0.0,
            ..settings(1, 1)
        };
        let out = train_search_aware(&warm, &train, &dev, &search, &s, |_| {}).unwrap();
        let expect = dev_metric(
            &warm,
            &dev,
            Strategy::SoftMap {
                k: 2,
                alpha: 1.0,
                mode: MapMode::Committed,
            },
            None,
        )
        .unwrap();
        assert_eq!(out.history[0].dev_metric, expect);
        assert_eq!(out.params.blocks, warm.blocks);
        assert_eq!(out.params.provenance, Provenance::SoftBeam);
    }

    #[test]
    fn invalid_settings_are_rejected() {
        let (train, dev) = (data(1, 4), data(2, 2));
        let bad = TrainSettings {
            restarts: 0,
            ..Default::default()
        };
        assert!(matches!(
            pretrain(
                config(&train),
                &train,
                &dev,
                PretrainObjective::TeacherForcing,
                &bad,
                |_| {}
            ),
            Err(Error::Config(_))
        ));
    }
}
