//! Synthetic tasks, vocabularies, and the corpus text format.
//!
//! # Lookahead tagging
//!
//! The source alphabet has `U` unambiguous words `u0..`, `A` ambiguous words
//! `a0..` (`U + A` is the configured vocabulary size, `U = ⌈size/2⌉`) and
//! `M` mode markers `m0..`. A sentence of length `n` ends with a marker `m_k`
//! drawn uniformly; every earlier position is ambiguous with the configured
//! probability and then draws a uniform `a_j`, otherwise a uniform `u_j`.
//! Tags:
//!
//! * `u_j` → `U{j}`
//! * `a_j` → `A{j}_{k}`, where `k` is the sentence's final marker
//! * `m_k` → `M{k}`
//!
//! A model reading the whole input is exact. A left-to-right predictor cannot
//! know `k` at an ambiguous position and is right there with probability at
//! most `1/M`, so its expected token accuracy is at most
//! `1 - (1 - 1/M) · ρ · E[n - 1] / E[n]`.
//!
//! # Transduction
//!
//! Source words `w0..` map to target words `y0..`. The source is cut into
//! consecutive blocks of `window + 1` tokens, each block is reversed, and
//! each token `w_j` is then rewritten: `j % 5 == 0` emits `y_j y_j`,
//! `j % 5 == 4` emits nothing, and any other `j` emits `y_j`. The output
//! ends with `</s>`. With the identity rewrite every `w_j` emits `y_j`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LengthContract;
use crate::{EOS, RESERVED};

pub const RESERVED_TOKENS: [&str; RESERVED] = ["<pad>", "<s>", "</s>"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Reserved tokens followed by `words` in order.
    pub fn new<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.into_iter().map(Into::into));
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED || tokens[..RESERVED] != RESERVED_TOKENS {
            return Err(Error::Data(format!(
                "vocabulary must start with {RESERVED_TOKENS:?}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Data(format!(
                    "invalid vocabulary token {t:?} at id {i}"
                )));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("<unk>", String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|i| self.token(*i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Tagging,
    Transduction,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tagging" => Ok(TaskKind::Tagging),
            "transduction" => Ok(TaskKind::Transduction),
            other => Err(Error::Config(format!(
                "unknown task {other:?} (expected tagging or transduction)"
            ))),
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskKind::Tagging => "tagging",
            TaskKind::Transduction => "transduction",
        })
    }
}

pub type Example = (Vec<usize>, Vec<usize>);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub examples: Vec<Example>,
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
    pub task: TaskKind,
    /// Maximum output length including EOS (transduction only).
    pub t_max: Option<usize>,
}

impl Corpus {
    pub fn new(
        examples: Vec<Example>,
        src_vocab: Vocab,
        tgt_vocab: Vocab,
        task: TaskKind,
        t_max: Option<usize>,
    ) -> Result<Self> {
        let c = Self {
            examples,
            src_vocab,
            tgt_vocab,
            task,
            t_max,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn contract(&self) -> LengthContract {
        match self.task {
            TaskKind::Tagging => LengthContract::Tagging,
            TaskKind::Transduction => LengthContract::Transduction {
                t_max: self.t_max.unwrap_or(0),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.task == TaskKind::Transduction && self.t_max.is_none() {
            return Err(Error::Data("transduction corpus needs t_max".into()));
        }
        let contract = self.contract();
        for (i, (x, y)) in self.examples.iter().enumerate() {
            if x.is_empty() {
                return Err(Error::Data(format!("example {i}: empty source")));
            }
            if let Some(bad) = x.iter().find(|t| **t >= self.src_vocab.len()) {
                return Err(Error::Data(format!(
                    "example {i}: source id {bad} out of vocabulary"
                )));
            }
            if let Some(bad) = y.iter().find(|t| **t >= self.tgt_vocab.len()) {
                return Err(Error::Data(format!(
                    "example {i}: target id {bad} out of vocabulary"
                )));
            }
            contract
                .check_gold(x, y)
                .map_err(|e| Error::Data(format!("example {i}: {e}")))?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Shuffled index batches for one epoch.
    pub fn batches(&self, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.examples.len()).collect();
        order.shuffle(rng);
        order
            .chunks(batch_size.max(1))
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// Same vocabularies and task with a subset of examples.
    pub fn with_examples(&self, examples: Vec<Example>) -> Self {
        Self {
            examples,
            ..self.clone()
        }
    }
}

fn check_lengths(min_len: usize, max_len: usize, floor: usize) -> Result<()> {
    if min_len < floor || max_len < min_len {
        return Err(Error::Config(format!(
            "length range {min_len}..={max_len} invalid (minimum length {floor})"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaggingSpec {
    pub min_len: usize,
    pub max_len: usize,
    /// Unambiguous plus ambiguous source words.
    pub vocab_size: usize,
    pub ambiguity_rate: f64,
    pub modes: usize,
    pub count: usize,
    pub seed: u64,
}

impl Default for TaggingSpec {
    fn default() -> Self {
        Self {
            min_len: 4,
            max_len: 10,
            vocab_size: 32,
            ambiguity_rate: 0.5,
            modes: 2,
            count: 1000,
            seed: 0,
        }
    }
}

impl TaggingSpec {
    fn split(&self) -> (usize, usize) {
        let u = self.vocab_size.div_ceil(2);
        (u, self.vocab_size - u)
    }

    pub fn validate(&self) -> Result<()> {
        check_lengths(self.min_len, self.max_len, 2)?;
        if self.vocab_size < 4 {
            return Err(Error::Config(format!(
                "vocab size must be at least 4, got {}",
                self.vocab_size
            )));
        }
        if !(0.0..=1.0).contains(&self.ambiguity_rate) {
            return Err(Error::Config(format!(
                "ambiguity rate {} outside [0, 1]",
                self.ambiguity_rate
            )));
        }
        if self.modes < 1 {
            return Err(Error::Config("at least one mode marker required".into()));
        }
        Ok(())
    }

    pub fn vocabularies(&self) -> Result<(Vocab, Vocab)> {
        let (u, a) = self.split();
        let m = self.modes;
        let src = Vocab::new(
            (0..u)
                .map(|j| format!("u{j}"))
                .chain((0..a).map(|j| format!("a{j}")))
                .chain((0..m).map(|k| format!("m{k}"))),
        )?;
        let tgt = Vocab::new(
            (0..u)
                .map(|j| format!("U{j}"))
                .chain((0..a).flat_map(|j| (0..m).map(move |k| format!("A{j}_{k}"))))
                .chain((0..m).map(|k| format!("M{k}"))),
        )?;
        Ok((src, tgt))
    }

    /// Expected token accuracy ceiling of any left-to-right predictor.
    pub fn greedy_ceiling(&self) -> f64 {
        let mean_n = (self.min_len + self.max_len) as f64 / 2.0;
        1.0 - (1.0 - 1.0 / self.modes as f64) * self.ambiguity_rate * (mean_n - 1.0) / mean_n
    }
}

pub fn gen_lookahead_tagging(spec: &TaggingSpec) -> Result<Corpus> {
    spec.validate()?;
    let (src, tgt) = spec.vocabularies()?;
    let (u, a) = spec.split();
    let m = spec.modes;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let examples = (0..spec.count)
        .map(|_| {
            let n = rng.gen_range(spec.min_len..=spec.max_len);
            let k = rng.gen_range(0..m);
            let mut x = Vec::with_capacity(n);
            let mut y = Vec::with_capacity(n);
            for _ in 0..n - 1 {
                if rng.gen_bool(spec.ambiguity_rate) {
                    let j = rng.gen_range(0..a);
                    x.push(RESERVED + u + j);
                    y.push(RESERVED + u + j * m + k);
                } else {
                    let j = rng.gen_range(0..u);
                    x.push(RESERVED + j);
                    y.push(RESERVED + j);
                }
            }
            x.push(RESERVED + u + a + k);
            y.push(RESERVED + u + a * m + k);
            (x, y)
        })
        .collect();
    Corpus::new(examples, src, tgt, TaskKind::Tagging, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransductionSpec {
    pub min_len: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub reorder_window: usize,
    pub identity_rewrite: bool,
    pub t_max: usize,
    pub count: usize,
    pub seed: u64,
}

impl Default for TransductionSpec {
    fn default() -> Self {
        Self {
            min_len: 4,
            max_len: 11,
            vocab_size: 64,
            reorder_window: 1,
            identity_rewrite: false,
            t_max: 24,
            count: 1000,
            seed: 0,
        }
    }
}

impl TransductionSpec {
    pub fn validate(&self) -> Result<()> {
        check_lengths(self.min_len, self.max_len, 1)?;
        if self.vocab_size < 1 {
            return Err(Error::Config("vocab size must be positive".into()));
        }
        let longest = if self.identity_rewrite {
            self.max_len
        } else {
            2 * self.max_len
        };
        if self.t_max < longest + 1 {
            return Err(Error::Config(format!(
                "t_max {} cannot hold outputs of up to {} tokens plus EOS",
                self.t_max, longest
            )));
        }
        Ok(())
    }

    pub fn vocabularies(&self) -> Result<(Vocab, Vocab)> {
        Ok((
            Vocab::new((0..self.vocab_size).map(|j| format!("w{j}")))?,
            Vocab::new((0..self.vocab_size).map(|j| format!("y{j}")))?,
        ))
    }
}

/// Rule-based gold output for source word indices `words` (0-based, not ids).
pub fn transduction_oracle(
    words: &[usize],
    reorder_window: usize,
    identity_rewrite: bool,
) -> Vec<usize> {
    let mut out = Vec::with_capacity(2 * words.len() + 1);
    for block in words.chunks(reorder_window + 1) {
        for &j in block.iter().rev() {
            let y = RESERVED + j;
            match (identity_rewrite, j % 5) {
                (true, _) => out.push(y),
                (false, 0) => out.extend([y, y]),
                (false, 4) => {}
                _ => out.push(y),
            }
        }
    }
    out.push(EOS);
    out
}

pub fn gen_transduction(spec: &TransductionSpec) -> Result<Corpus> {
    spec.validate()?;
    let (src, tgt) = spec.vocabularies()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let examples = (0..spec.count)
        .map(|_| {
            let n = rng.gen_range(spec.min_len..=spec.max_len);
            let words: Vec<usize> = (0..n).map(|_| rng.gen_range(0..spec.vocab_size)).collect();
            let y = transduction_oracle(&words, spec.reorder_window, spec.identity_rewrite);
            (words.into_iter().map(|j| RESERVED + j).collect(), y)
        })
        .collect();
    Corpus::new(examples, src, tgt, TaskKind::Transduction, Some(spec.t_max))
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes `path` (one `source<TAB>target` line per example), the vocabulary
/// sidecars `path.src.vocab` and `path.tgt.vocab`, and `path.meta`.
pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut text = String::new();
    for (x, y) in &corpus.examples {
        let _ = writeln!(
            text,
            "{}\t{}",
            corpus.src_vocab.detokenize(x),
            corpus.tgt_vocab.detokenize(y)
        );
    }
    write_file(path, &text)?;
    for (suffix, vocab) in [
        (".src.vocab", &corpus.src_vocab),
        (".tgt.vocab", &corpus.tgt_vocab),
    ] {
        let mut v = vocab.tokens().join("\n");
        v.push('\n');
        write_file(&sidecar(path, suffix), &v)?;
    }
    let mut meta = format!("task={}\n", corpus.task);
    if let Some(t) = corpus.t_max {
        let _ = writeln!(meta, "t_max={t}");
    }
    write_file(&sidecar(path, ".meta"), &meta)
}

fn read_vocab(path: &Path) -> Result<Vocab> {
    let tokens: Vec<String> = read_file(path)?.lines().map(str::to_string).collect();
    Vocab::from_tokens(tokens).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let src_vocab = read_vocab(&sidecar(path, ".src.vocab"))?;
    let tgt_vocab = read_vocab(&sidecar(path, ".tgt.vocab"))?;
    let meta_path = sidecar(path, ".meta");
    let mut task = None;
    let mut t_max = None;
    for (n, line) in read_file(&meta_path)?.lines().enumerate() {
        let bad = || {
            Error::Data(format!(
                "{}:{}: malformed line {line:?}",
                meta_path.display(),
                n + 1
            ))
        };
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(bad)?;
        match k.trim() {
            "task" => task = Some(v.trim().parse::<TaskKind>().map_err(|_| bad())?),
            "t_max" => t_max = Some(v.trim().parse::<usize>().map_err(|_| bad())?),
            _ => return Err(bad()),
        }
    }
    let task = task.ok_or_else(|| Error::Data(format!("{}: missing task", meta_path.display())))?;
    let mut examples = Vec::new();
    for (n, line) in read_file(path)?.lines().enumerate() {
        let lineno = n + 1;
        let (src, tgt) = line
            .split_once('\t')
            .ok_or_else(|| Error::Data(format!("{}:{lineno}: missing tab", path.display())))?;
        let ids = |text: &str, vocab: &Vocab, side: &str| -> Result<Vec<usize>> {
            let mut unknown = Vec::new();
            let ids: Vec<usize> = text
                .split_whitespace()
                .filter_map(|t| {
                    let id = vocab.id(t);
                    if id.is_none() {
                        unknown.push(t.to_string());
                    }
                    id
                })
                .collect();
            if unknown.is_empty() {
                Ok(ids)
            } else {
                Err(Error::Data(format!(
                    "{}:{lineno}: {side} tokens not in vocabulary: {}",
                    path.display(),
                    unknown.join(", ")
                )))
            }
        };
        examples.push((
            ids(src, &src_vocab, "source")?,
            ids(tgt, &tgt_vocab, "target")?,
        ));
    }
    Corpus::new(examples, src_vocab, tgt_vocab, task, t_max)
}
