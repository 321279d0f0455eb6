//! Experiment orchestration: flat config files, run directories, and the
//! commands behind the `softbeam` binary.
//!
//! A run directory holds `config.txt` (every key explicit), `train.log`
//! (one record per epoch plus the restart-selection line), `model.ckpt`, and
//! `summary.json` with the evaluation reports the tables are rendered from.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::beam::{soft_beam_objective, AnnealSchedule, MapMode};
use crate::decode::{check_compatible, decode_corpus, evaluate, evaluate_predictions, Strategy};
use crate::error::{Error, Result};
use crate::metrics::{
    bleu_breakdown_table, default_buckets, grid_table, length_table, DecodeMode, EvalReport, Grid,
    Metric,
};
use crate::model::{
    checkpoint, AttentionMode, EncoderMode, LengthContract, ModelConfig, ModelParams,
    Normalization, Provenance,
};
use crate::objectives::{
    logz_stats, logz_table, self_normalized_nll, teacher_forcing_nll, LogZRow, LogZStats, Split,
};
use crate::optim::OptimizerKind;
use crate::tasks::{
    gen_lookahead_tagging, gen_transduction, read_corpus, write_corpus, Corpus, TaggingSpec,
    TaskKind, TransductionSpec,
};
use crate::tensor::grad_check;
use crate::train::{
    pretrain, train_search_aware, EpochRecord, PretrainObjective, SearchAwareSettings,
    TrainOutcome, TrainSettings,
};
use crate::{EOS, RESERVED};

/// Environment variable naming the root under which run directories live.
pub const RUN_DIR_ENV: &str = "SOFTBEAM_RUN_DIR";

pub fn run_root() -> PathBuf {
    std::env::var_os(RUN_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

fn parse_enum<T: DeserializeOwned>(key: &str, value: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn enum_name<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        _ => String::new(),
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn prefix_config(at: &str, e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("{at}: {m}")),
        other => Error::Config(format!("{at}: {other}")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    TeacherForcing,
    SelfNormalized,
    SoftBeam,
}

/// Every key a config file may contain.
pub const CONFIG_KEYS: [&str; 25] = [
    "task",
    "train",
    "dev",
    "embed_dim",
    "hidden_dim",
    "encoder",
    "attention",
    "normalization",
    "objective",
    "warm_start",
    "beam_size",
    "alpha0",
    "alpha_growth",
    "alpha_max",
    "decode_alpha",
    "lambda",
    "learning_rate",
    "epochs",
    "batch_size",
    "optimizer",
    "clip",
    "seed",
    "restarts",
    "dev_metric",
    "map_mode",
];

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub task: TaskKind,
    pub train: PathBuf,
    pub dev: PathBuf,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub encoder: EncoderMode,
    pub attention: AttentionMode,
    pub normalization: Normalization,
    pub objective: Objective,
    pub warm_start: Option<PathBuf>,
    pub beam_size: usize,
    pub schedule: AnnealSchedule,
    pub decode_alpha: Option<f64>,
    pub lambda: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub clip: f64,
    pub seed: u64,
    pub restarts: usize,
    pub dev_metric: Metric,
    pub map_mode: MapMode,
}

impl TrainConfig {
    /// Defaults for `task`: fixed-position attention and K = 5 for tagging,
    /// content attention and K = 3 for transduction.
    pub fn new(task: TaskKind, train: PathBuf, dev: PathBuf) -> Self {
        let (attention, beam_size) = match task {
            TaskKind::Tagging => (AttentionMode::FixedPosition, 5),
            TaskKind::Transduction => (AttentionMode::Content, 3),
        };
        let s = TrainSettings::default();
        Self {
            task,
            train,
            dev,
            embed_dim: 8,
            hidden_dim: 16,
            encoder: EncoderMode::Unidirectional,
            attention,
            normalization: Normalization::Local,
            objective: Objective::TeacherForcing,
            warm_start: None,
            beam_size,
            schedule: AnnealSchedule::default(),
            decode_alpha: None,
            lambda: 0.1,
            learning_rate: 0.02,
            epochs: s.epochs,
            batch_size: s.batch_size,
            optimizer: s.optimizer,
            clip: s.clip,
            seed: s.seed,
            restarts: s.restarts,
            dev_metric: Metric::for_task(task),
            map_mode: MapMode::Committed,
        }
    }

    /// Parses `key = value` lines; `#` starts a comment. `task`, `train` and
    /// `dev` are required, unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !CONFIG_KEYS.contains(&k) {
                return Err(Error::Config(format!("line {}: unknown key {k:?}", n + 1)));
            }
            if entries
                .insert(k.to_string(), (n + 1, v.to_string()))
                .is_some()
            {
                return Err(Error::Config(format!(
                    "line {}: duplicate key {k:?}",
                    n + 1
                )));
            }
        }
        let required = |k: &str| {
            entries
                .get(k)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| Error::Config(format!("missing required key {k:?}")))
        };
        let task: TaskKind = required("task")?.parse()?;
        let mut cfg = Self::new(task, required("train")?.into(), required("dev")?.into());
        for (k, (n, v)) in &entries {
            cfg.set(k, v)
                .map_err(|e| prefix_config(&format!("line {n}"), e))?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| prefix_config(&path.display().to_string(), e))
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let opt_path = |v: &str| (v != "none").then(|| PathBuf::from(v));
        match key {
            "task" => self.task = value.parse()?,
            "train" => self.train = value.into(),
            "dev" => self.dev = value.into(),
            "embed_dim" => self.embed_dim = parse_num(key, value)?,
            "hidden_dim" => self.hidden_dim = parse_num(key, value)?,
            "encoder" => self.encoder = parse_enum(key, value)?,
            "attention" => self.attention = parse_enum(key, value)?,
            "normalization" => self.normalization = parse_enum(key, value)?,
            "objective" => self.objective = parse_enum(key, value)?,
            "warm_start" => self.warm_start = opt_path(value),
            "beam_size" => self.beam_size = parse_num(key, value)?,
            "alpha0" => self.schedule.alpha0 = parse_num(key, value)?,
            "alpha_growth" => self.schedule.growth = parse_num(key, value)?,
            "alpha_max" => self.schedule.alpha_max = parse_num(key, value)?,
            "decode_alpha" => {
                self.decode_alpha = if value == "none" {
                    None
                } else {
                    Some(parse_num(key, value)?)
                }
            }
            "lambda" => self.lambda = parse_num(key, value)?,
            "learning_rate" => self.learning_rate = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "optimizer" => self.optimizer = value.parse()?,
            "clip" => self.clip = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "restarts" => self.restarts = parse_num(key, value)?,
            "dev_metric" => self.dev_metric = parse_enum(key, value)?,
            "map_mode" => self.map_mode = parse_enum(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in canonical order.
    pub fn render(&self) -> String {
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map_or("none".to_string(), |p| p.display().to_string())
        };
        let values: [String; 25] = [
            self.task.to_string(),
            self.train.display().to_string(),
            self.dev.display().to_string(),
            self.embed_dim.to_string(),
            self.hidden_dim.to_string(),
            enum_name(&self.encoder),
            enum_name(&self.attention),
            enum_name(&self.normalization),
            enum_name(&self.objective),
            path(&self.warm_start),
            self.beam_size.to_string(),
            self.schedule.alpha0.to_string(),
            self.schedule.growth.to_string(),
            self.schedule.alpha_max.to_string(),
            self.decode_alpha
                .map_or("none".to_string(), |a| a.to_string()),
            self.lambda.to_string(),
            self.learning_rate.to_string(),
            self.epochs.to_string(),
            self.batch_size.to_string(),
            self.optimizer.to_string(),
            self.clip.to_string(),
            self.seed.to_string(),
            self.restarts.to_string(),
            enum_name(&self.dev_metric),
            enum_name(&self.map_mode),
        ];
        CONFIG_KEYS
            .iter()
            .zip(values)
            .fold(String::new(), |mut out, (k, v)| {
                let _ = writeln!(out, "{k} = {v}");
                out
            })
    }

    /// Default run directory name, e.g. `tagging-self-normalized-local-unidirectional-s0`.
    pub fn run_name(&self) -> String {
        format!(
            "{}-{}-{}-{}-s{}",
            self.task,
            enum_name(&self.objective),
            enum_name(&self.normalization),
            enum_name(&self.encoder),
            self.seed
        )
    }

    pub fn settings(&self) -> TrainSettings {
        TrainSettings {
            epochs: self.epochs,
            lr: self.learning_rate,
            batch_size: self.batch_size,
            optimizer: self.optimizer,
            clip: self.clip,
            seed: self.seed,
            restarts: self.restarts,
            dev_metric: Some(self.dev_metric),
        }
    }

    pub fn search(&self) -> SearchAwareSettings {
        SearchAwareSettings {
            normalization: self.normalization,
            k: self.beam_size,
            schedule: self.schedule,
            map_mode: self.map_mode,
            decode_alpha: self.decode_alpha,
        }
    }

    pub fn model_config(&self, corpus: &Corpus) -> ModelConfig {
        ModelConfig {
            src_vocab: corpus.src_vocab.len(),
            tgt_vocab: corpus.tgt_vocab.len(),
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            encoder: self.encoder,
            attention: self.attention,
            normalization: self.normalization,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.task == TaskKind::Transduction && self.attention == AttentionMode::FixedPosition {
            return Err(Error::Config(
                "fixed-position attention requires the tagging task".into(),
            ));
        }
        if self.objective == Objective::SoftBeam && self.warm_start.is_none() {
            return Err(Error::Config(
                "objective soft-beam requires warm_start".into(),
            ));
        }
        if self.beam_size == 0 {
            return Err(Error::Config("beam_size must be at least 1".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        if let Some(a) = self.decode_alpha {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::Config(format!(
                    "decode_alpha must be positive, got {a}"
                )));
            }
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        self.schedule.validate()?;
        self.settings().validate()
    }

    /// Non-fatal problems with a search-aware run given its warm start.
    pub fn warnings(&self, warm: &ModelParams) -> Vec<String> {
        let mut out = Vec::new();
        if self.objective == Objective::SoftBeam
            && self.normalization == Normalization::Global
            && warm.provenance != Provenance::SelfNormalized
        {
            out.push(format!(
                "global search-aware training warm-started from a {} checkpoint, not a self-normalized one; unnormalized scores of such models are usually badly scaled",
                enum_name(&warm.provenance)
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunKind {
    Pretrain,
    SearchAware,
}

/// Machine-readable record of one completed run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub kind: RunKind,
    pub task: TaskKind,
    pub objective: Objective,
    pub normalization: Normalization,
    pub encoder: EncoderMode,
    /// Provenance of the warm start (search-aware runs only).
    pub warm_start: Option<Provenance>,
    pub best_dev: f64,
    pub best_restart: usize,
    pub best_epoch: usize,
    pub logz_train: Option<LogZStats>,
    pub logz_dev: Option<LogZStats>,
    pub reports: Vec<EvalReport>,
}

impl RunSummary {
    pub fn report(&self, mode: DecodeMode) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.mode == mode)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("summary.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

fn load_corpora(cfg: &TrainConfig) -> Result<(Corpus, Corpus)> {
    let train = read_corpus(&cfg.train)?;
    let dev = read_corpus(&cfg.dev)?;
    for (name, c) in [("train", &train), ("dev", &dev)] {
        if c.task != cfg.task {
            return Err(Error::Config(format!(
                "{name} corpus is a {} corpus but task = {}",
                c.task, cfg.task
            )));
        }
    }
    if train.src_vocab != dev.src_vocab || train.tgt_vocab != dev.tgt_vocab {
        return Err(Error::Data("train and dev vocabularies differ".into()));
    }
    Ok((train, dev))
}

/// Line-oriented training log.
struct RunLog {
    file: fs::File,
    path: PathBuf,
}

impl RunLog {
    fn create(path: PathBuf) -> Result<Self> {
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self { file, path })
    }

    fn line(&mut self, text: &str) -> Result<()> {
        writeln!(self.file, "{text}").map_err(|e| Error::io(&self.path, e))
    }
}

fn start_run(cfg: &TrainConfig, out: &Path) -> Result<RunLog> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_text(&out.join("config.txt"), &cfg.render())?;
    RunLog::create(out.join("train.log"))
}

fn train_logged<F>(log: &mut RunLog, train: F) -> Result<TrainOutcome>
where
    F: FnOnce(&mut dyn FnMut(&EpochRecord)) -> Result<TrainOutcome>,
{
    let mut lines = Vec::new();
    let outcome = train(&mut |r: &EpochRecord| {
        log::info!("{r}");
        lines.push(r.to_string());
    });
    for l in &lines {
        log.line(l)?;
    }
    let outcome = outcome?;
    log.line(&format!(
        "selected restart={} epoch={} dev_metric={:.4}",
        outcome.best_restart, outcome.best_epoch, outcome.best_dev
    ))?;
    Ok(outcome)
}

/// Trains from random initialization with teacher forcing or
/// self-normalization, writes the checkpoint, and reports log-Z statistics
/// plus greedy and beam decodes of the dev set.
pub fn cmd_pretrain(cfg: &TrainConfig, out: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let objective = match cfg.objective {
        Objective::TeacherForcing => PretrainObjective::TeacherForcing,
        Objective::SelfNormalized => PretrainObjective::SelfNormalized { lambda: cfg.lambda },
        Objective::SoftBeam => {
            return Err(Error::Config(
                "pretrain needs objective teacher-forcing or self-normalized".into(),
            ));
        }
    };
    let (train, dev) = load_corpora(cfg)?;
    let mut log = start_run(cfg, out)?;
    let settings = cfg.settings();
    let outcome = train_logged(&mut log, |f| {
        pretrain(
            cfg.model_config(&train),
            &train,
            &dev,
            objective,
            &settings,
            f,
        )
    })?;
    let params = outcome.params;
    checkpoint::save(&params, &out.join("model.ckpt"))?;
    let buckets = default_buckets();
    let greedy = evaluate(
        &params,
        &dev,
        Strategy::Greedy,
        None,
        DecodeMode::PretrainGreedy,
        &buckets,
    )?
    .1;
    let beam = evaluate(
        &params,
        &dev,
        Strategy::Beam { k: cfg.beam_size },
        None,
        DecodeMode::PretrainBeam,
        &buckets,
    )?
    .1;
    let summary = RunSummary {
        kind: RunKind::Pretrain,
        task: cfg.task,
        objective: cfg.objective,
        normalization: params.config.normalization,
        encoder: cfg.encoder,
        warm_start: None,
        best_dev: outcome.best_dev,
        best_restart: outcome.best_restart,
        best_epoch: outcome.best_epoch,
        logz_train: Some(logz_stats(&params, &train.examples, Split::Train)?),
        logz_dev: Some(logz_stats(&params, &dev.examples, Split::Dev)?),
        reports: vec![greedy, beam],
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Search-aware training from the configured warm start.
pub fn cmd_train_search_aware(cfg: &TrainConfig, out: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    if cfg.objective != Objective::SoftBeam {
        return Err(Error::Config("train needs objective soft-beam".into()));
    }
    let warm_path = cfg
        .warm_start
        .as_ref()
        .ok_or_else(|| Error::Config("objective soft-beam requires warm_start".into()))?;
    if !warm_path.exists() {
        return Err(Error::Config(format!(
            "warm start {} does not exist",
            warm_path.display()
        )));
    }
    let warm = checkpoint::load(warm_path)?;
    let (train, dev) = load_corpora(cfg)?;
    check_compatible(&warm, &train)?;
    let mut log = start_run(cfg, out)?;
    for w in cfg.warnings(&warm) {
        log::warn!("{w}");
        log.line(&format!("warning: {w}"))?;
    }
    let search = cfg.search();
    let settings = cfg.settings();
    let outcome = train_logged(&mut log, |f| {
        train_search_aware(&warm, &train, &dev, &search, &settings, f)
    })?;
    let params = outcome.params;
    checkpoint::save(&params, &out.join("model.ckpt"))?;
    let mode = match cfg.normalization {
        Normalization::Local => DecodeMode::LocallyNormalized,
        Normalization::Global => DecodeMode::GloballyNormalized,
    };
    let report = evaluate(
        &params,
        &dev,
        search.dev_strategy(),
        None,
        mode,
        &default_buckets(),
    )?
    .1;
    let summary = RunSummary {
        kind: RunKind::SearchAware,
        task: cfg.task,
        objective: cfg.objective,
        normalization: cfg.normalization,
        encoder: warm.config.encoder,
        warm_start: Some(warm.provenance),
        best_dev: outcome.best_dev,
        best_restart: outcome.best_restart,
        best_epoch: outcome.best_epoch,
        logz_train: None,
        logz_dev: None,
        reports: vec![report],
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeKind {
    Greedy,
    Beam,
    SoftMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMode {
    /// Per-step log-softmax.
    Normalized,
    /// Raw logits.
    Unnormalized,
}

impl ScoreMode {
    pub fn normalization(self) -> Normalization {
        match self {
            ScoreMode::Normalized => Normalization::Local,
            ScoreMode::Unnormalized => Normalization::Global,
        }
    }
}

macro_rules! from_str_via_serde {
    ($($t:ty => $what:literal),*) => {$(
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                parse_enum($what, s)
            }
        }
    )*};
}

from_str_via_serde!(
    Objective => "objective",
    DecodeKind => "decode mode",
    ScoreMode => "score mode",
    RunKind => "run kind"
);

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeRequest {
    pub checkpoint: PathBuf,
    pub corpus: PathBuf,
    pub kind: DecodeKind,
    pub k: usize,
    pub alpha: f64,
    pub map_mode: MapMode,
    /// Overrides the checkpoint's scoring mode.
    pub scores: Option<ScoreMode>,
}

impl DecodeRequest {
    pub fn strategy(&self) -> Strategy {
        match self.kind {
            DecodeKind::Greedy => Strategy::Greedy,
            DecodeKind::Beam => Strategy::Beam { k: self.k },
            DecodeKind::SoftMap => Strategy::SoftMap {
                k: self.k,
                alpha: self.alpha,
                mode: self.map_mode,
            },
        }
    }
}

/// Report label for a decode: greedy and beam decodes describe the
/// initializer, soft-map decodes the search-aware model's scoring mode.
pub fn decode_label(kind: DecodeKind, normalization: Normalization) -> DecodeMode {
    match (kind, normalization) {
        (DecodeKind::Greedy, _) => DecodeMode::PretrainGreedy,
        (DecodeKind::Beam, _) => DecodeMode::PretrainBeam,
        (DecodeKind::SoftMap, Normalization::Local) => DecodeMode::LocallyNormalized,
        (DecodeKind::SoftMap, Normalization::Global) => DecodeMode::GloballyNormalized,
    }
}

pub fn cmd_decode(req: &DecodeRequest) -> Result<(Corpus, Vec<Vec<usize>>, EvalReport)> {
    let params = checkpoint::load(&req.checkpoint)?;
    let corpus = read_corpus(&req.corpus)?;
    let scores = req.scores.map(ScoreMode::normalization);
    let label = decode_label(req.kind, scores.unwrap_or(params.config.normalization));
    let (preds, report) = evaluate(
        &params,
        &corpus,
        req.strategy(),
        scores,
        label,
        &default_buckets(),
    )?;
    Ok((corpus, preds, report))
}

/// One decoded sequence per line, tokens space-separated.
pub fn write_predictions(corpus: &Corpus, preds: &[Vec<usize>], path: &Path) -> Result<()> {
    let text = preds.iter().fold(String::new(), |mut out, p| {
        let _ = writeln!(out, "{}", corpus.tgt_vocab.detokenize(p));
        out
    });
    write_text(path, &text)
}

pub fn read_predictions(corpus: &Corpus, path: &Path) -> Result<Vec<Vec<usize>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(n, line)| {
            line.split_whitespace()
                .map(|t| {
                    corpus.tgt_vocab.id(t).ok_or_else(|| {
                        Error::Data(format!("{}:{}: unknown token {t:?}", path.display(), n + 1))
                    })
                })
                .collect()
        })
        .collect()
}

/// Scores a predictions file against a corpus.
pub fn cmd_eval(corpus_path: &Path, predictions: &Path, mode: DecodeMode) -> Result<EvalReport> {
    let corpus = read_corpus(corpus_path)?;
    let preds = read_predictions(&corpus, predictions)?;
    if preds.len() != corpus.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} examples",
            preds.len(),
            corpus.len()
        )));
    }
    evaluate_predictions(&corpus, &preds, mode, &default_buckets())
}

/// Consolidated tables for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: TaskKind,
    pub grid: Grid,
    pub logz: Vec<LogZRow>,
    /// Self-normalized column reports behind the breakdown tables.
    pub breakdown: Vec<EvalReport>,
    pub text: String,
}

fn column(p: Provenance) -> Option<usize> {
    match p {
        Provenance::TeacherForcing => Some(0),
        Provenance::SelfNormalized => Some(1),
        _ => None,
    }
}

fn better(slot: &mut Option<f64>, v: f64) {
    if slot.is_none_or(|old| v > old) {
        *slot = Some(v);
    }
}

/// Builds the tables for one task from completed run summaries. Where
/// several runs fill the same cell the best value is kept.
pub fn task_report(task: TaskKind, runs: &[RunSummary]) -> TaskReport {
    let mut grid = Grid::default();
    let mut logz: [Option<&RunSummary>; 2] = [None, None];
    let mut breakdown: BTreeMap<&'static str, EvalReport> = BTreeMap::new();
    let mut keep = |r: &EvalReport| {
        let e = breakdown.entry(r.mode.label()).or_insert_with(|| r.clone());
        if r.primary() > e.primary() {
            *e = r.clone();
        }
    };
    for s in runs.iter().filter(|s| s.task == task) {
        match s.kind {
            RunKind::Pretrain => {
                let col = match s.objective {
                    Objective::TeacherForcing => 0,
                    Objective::SelfNormalized => 1,
                    Objective::SoftBeam => continue,
                };
                for mode in [DecodeMode::PretrainGreedy, DecodeMode::PretrainBeam] {
                    if let Some(r) = s.report(mode) {
                        better(&mut grid.row_mut(mode)[col], r.primary());
                        if col == 1 && mode == DecodeMode::PretrainBeam {
                            keep(r);
                        }
                    }
                }
                if logz[col].is_none_or(|old| s.best_dev > old.best_dev) {
                    logz[col] = Some(s);
                }
            }
            RunKind::SearchAware => {
                let Some(col) = s.warm_start.and_then(column) else {
                    continue;
                };
                let mode = match s.normalization {
                    Normalization::Local => DecodeMode::LocallyNormalized,
                    Normalization::Global => DecodeMode::GloballyNormalized,
                };
                if let Some(r) = s.report(mode) {
                    better(&mut grid.row_mut(mode)[col], r.primary());
                    if col == 1 {
                        keep(r);
                    }
                }
            }
        }
    }
    let logz: Vec<LogZRow> = ["CE", "L2"]
        .iter()
        .zip(logz)
        .map(|(name, s)| LogZRow {
            model: name.to_string(),
            train: s.and_then(|s| s.logz_train),
            dev: s.and_then(|s| s.logz_dev),
            metric: s
                .and_then(|s| s.report(DecodeMode::PretrainBeam))
                .map(EvalReport::primary),
        })
        .collect();
    let breakdown: Vec<EvalReport> = DecodeMode::ALL
        .iter()
        .filter_map(|m| breakdown.get(m.label()).cloned())
        .collect();
    let metric = match task {
        TaskKind::Tagging => "accuracy",
        TaskKind::Transduction => "BLEU",
    };
    let mut text = format!("== {task}: dev {metric} by initialization ==\n");
    text.push_str(&grid_table(&grid));
    let _ = write!(
        text,
        "\n== {task}: log normalizer ==\n{}",
        logz_table(&logz)
    );
    if task == TaskKind::Transduction && !breakdown.is_empty() {
        let refs: Vec<&EvalReport> = breakdown.iter().collect();
        let _ = write!(
            text,
            "\n== {task}: BLEU breakdown (self-normalized init) ==\n{}\n== {task}: BLEU by source length (self-normalized init) ==\n{}",
            bleu_breakdown_table(&refs),
            length_table(&refs)
        );
    }
    TaskReport {
        task,
        grid,
        logz,
        breakdown,
        text,
    }
}

/// Summaries of every run directory directly under `root`, in name order.
pub fn collect_runs(root: &Path) -> Result<Vec<RunSummary>> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("summary.json").is_file())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| RunSummary::load(d)).collect()
}

/// Renders the tables for every task with completed runs under `root` and
/// writes `report.txt` and `report.json` there.
pub fn cmd_report(root: &Path) -> Result<Vec<TaskReport>> {
    let runs = collect_runs(root)?;
    if runs.is_empty() {
        return Err(Error::Data(format!(
            "no completed runs under {}",
            root.display()
        )));
    }
    let reports: Vec<TaskReport> = [TaskKind::Tagging, TaskKind::Transduction]
        .into_iter()
        .filter(|t| runs.iter().any(|r| r.task == *t))
        .map(|t| task_report(t, &runs))
        .collect();
    let text: String = reports
        .iter()
        .map(|r| r.text.as_str())
        .collect::<Vec<_>>()
        .join("\n");
    write_text(&root.join("report.txt"), &text)?;
    write_json(&root.join("report.json"), &reports)?;
    Ok(reports)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "kebab-case")]
pub enum GenSpec {
    Tagging(TaggingSpec),
    Transduction(TransductionSpec),
}

/// Writes `train.txt` and `dev.txt` (with sidecars) under `out`; the dev
/// split uses `seed + 1`.
pub fn cmd_gen_data(
    spec: GenSpec,
    train_count: usize,
    dev_count: usize,
    out: &Path,
) -> Result<(Corpus, Corpus)> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (train, dev) = match spec {
        GenSpec::Tagging(s) => (
            gen_lookahead_tagging(&TaggingSpec {
                count: train_count,
                ..s
            })?,
            gen_lookahead_tagging(&TaggingSpec {
                count: dev_count,
                seed: s.seed.wrapping_add(1),
                ..s
            })?,
        ),
        GenSpec::Transduction(s) => (
            gen_transduction(&TransductionSpec {
                count: train_count,
                ..s
            })?,
            gen_transduction(&TransductionSpec {
                count: dev_count,
                seed: s.seed.wrapping_add(1),
                ..s
            })?,
        ),
    };
    write_corpus(&train, &out.join("train.txt"))?;
    write_corpus(&dev, &out.join("dev.txt"))?;
    Ok((train, dev))
}

/// One finite-difference check of one objective on one random instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckLine {
    pub objective: String,
    pub instance: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl std::fmt::Display for GradCheckLine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "gradcheck objective={} instance={} coordinates={} max_rel_error={:.3e} {}",
            self.objective,
            self.instance,
            self.coordinates,
            self.max_rel_error,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

pub const GRADCHECK_OBJECTIVES: [&str; 4] = [
    "teacher-forcing",
    "self-normalized",
    "soft-beam-local",
    "soft-beam-global",
];

/// A random small model and example: `d = h ≤ 4`, `|V| ≤ 8`, `n ≤ 5`, `K ≤ 3`.
struct Instance {
    params: ModelParams,
    x: Vec<usize>,
    y: Vec<usize>,
    contract: LengthContract,
    k: usize,
    alpha: f64,
    lambda: f64,
}

fn random_instance(rng: &mut ChaCha8Rng, normalization: Normalization) -> Result<Instance> {
    let dim = rng.gen_range(2..=4);
    let tgt_vocab = rng.gen_range(RESERVED + 1..=8);
    let src_vocab = rng.gen_range(RESERVED + 1..=8);
    let tagging = rng.gen_bool(0.5);
    let config = ModelConfig {
        src_vocab,
        tgt_vocab,
        embed_dim: dim,
        hidden_dim: dim,
        encoder: if rng.gen_bool(0.5) {
            EncoderMode::Unidirectional
        } else {
            EncoderMode::Bidirectional
        },
        attention: if tagging {
            AttentionMode::FixedPosition
        } else {
            AttentionMode::Content
        },
        normalization,
    };
    let mut params = ModelParams::init(config, rng.gen())?;
    // Spread the scores so candidates are well separated.
    for b in &mut params.blocks {
        for v in &mut b.values {
            *v *= 5.0;
        }
    }
    let n = rng.gen_range(1..=5);
    let x: Vec<usize> = (0..n).map(|_| rng.gen_range(RESERVED..src_vocab)).collect();
    let (y, contract) = if tagging {
        (
            (0..n).map(|_| rng.gen_range(RESERVED..tgt_vocab)).collect(),
            LengthContract::Tagging,
        )
    } else {
        let m = rng.gen_range(0..n);
        let mut y: Vec<usize> = (0..m).map(|_| rng.gen_range(RESERVED..tgt_vocab)).collect();
        y.push(EOS);
        (y, LengthContract::Transduction { t_max: n + 1 })
    };
    Ok(Instance {
        params,
        x,
        y,
        contract,
        k: rng.gen_range(1..=3),
        alpha: rng.gen_range(0.5..4.0),
        lambda: rng.gen_range(0.05..1.0),
    })
}

/// Central finite-difference checks of every objective on `instances`
/// random small instances each.
pub fn gradcheck_suite(instances: usize, seed: u64, rel_tol: f64) -> Result<Vec<GradCheckLine>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(instances * GRADCHECK_OBJECTIVES.len());
    for name in GRADCHECK_OBJECTIVES {
        let norm = if name == "soft-beam-global" {
            Normalization::Global
        } else {
            Normalization::Local
        };
        for i in 0..instances {
            let inst = random_instance(&mut rng, norm)?;
            let Instance {
                params,
                x,
                y,
                contract,
                k,
                alpha,
                lambda,
            } = &inst;
            let report = grad_check(
                |tape, leaves| {
                    let bound = params.bind_leaves(leaves)?;
                    match name {
                        "teacher-forcing" => teacher_forcing_nll(tape, &bound, x, y, *contract),
                        "self-normalized" => {
                            self_normalized_nll(tape, &bound, x, y, *contract, *lambda)
                        }
                        _ => soft_beam_objective(tape, &bound, x, y, *contract, *k, *alpha),
                    }
                },
                &params.blocks,
                1e-5,
                rel_tol,
            )?;
            out.push(GradCheckLine {
                objective: name.to_string(),
                instance: i,
                coordinates: report.coordinates,
                max_rel_error: report.max_rel_error,
                passed: report.passed(),
            });
        }
    }
    Ok(out)
}

/// Parses the epoch records of a `train.log`, skipping other lines.
pub fn read_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if !line.starts_with("restart=") {
            continue;
        }
        let bad = || Error::Data(format!("{}:{}: malformed record", path.display(), n + 1));
        let fields: BTreeMap<&str, &str> = line
            .split_whitespace()
            .filter_map(|f| f.split_once('='))
            .collect();
        let get = |k: &str| fields.get(k).copied().ok_or_else(bad);
        out.push(EpochRecord {
            restart: get("restart")?.parse().map_err(|_| bad())?,
            epoch: get("epoch")?.parse().map_err(|_| bad())?,
            alpha: match get("alpha")? {
                "-" => None,
                a => Some(a.parse().map_err(|_| bad())?),
            },
            train_loss: get("train_loss")?.parse().map_err(|_| bad())?,
            dev_metric: get("dev_metric")?.parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

/// Decodes a corpus with a loaded model; used by the CLI's `decode` when no
/// evaluation is wanted.
pub fn decode_only(
    params: &ModelParams,
    corpus: &Corpus,
    strategy: Strategy,
    scores: Option<ScoreMode>,
) -> Result<Vec<Vec<usize>>> {
    decode_corpus(
        params,
        corpus,
        strategy,
        scores.map(ScoreMode::normalization),
    )
}
